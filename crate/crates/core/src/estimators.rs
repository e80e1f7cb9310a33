//! WLAV, L1-R and Capped-L1 estimators over the linear PMU model and the
//! Gauss–Newton linearization of the SCADA model.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meas::{eval_scada, scada_jacobian, Coords, Family, MeasurementPlan, StateVector};
use crate::netmodel::NetworkModel;
use crate::solvers::{solve_lad, solve_weighted_l1ls, SolverError, SolverOptions, SparseSolution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Model {
    #[serde(rename = "wlav")]
    Wlav,
    #[serde(rename = "l1r")]
    L1R,
    #[serde(rename = "capped")]
    CappedL1,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::Wlav, Model::L1R, Model::CappedL1];

    pub fn name(self) -> &'static str {
        match self {
            Model::Wlav => "wlav",
            Model::L1R => "l1r",
            Model::CappedL1 => "capped",
        }
    }

    pub fn is_sparse(self) -> bool {
        self != Model::Wlav
    }
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wlav" => Ok(Model::Wlav),
            "l1r" | "l1-r" => Ok(Model::L1R),
            "capped" | "cappedl1" | "capped-l1" => Ok(Model::CappedL1),
            other => Err(format!("unknown model '{other}' (expected wlav, l1r or capped)")),
        }
    }
}

/// Which components enter `min |ê_i|` in the capped-L1 threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// Every component; exact zeros make `α = 0`.
    AllComponents,
    /// Components that are penalized in the current stage and not exactly
    /// zero; freed components carry unshrunk fits, never set the scale and
    /// stay freed, so the weights only shrink and the loop cannot cycle.
    #[default]
    NonzeroComponents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub model: Model,
    pub lambda: f64,
    pub alpha_factor: f64,
    pub alpha_rule: AlphaRule,
    pub zero_tolerance: f64,
    pub max_stages: usize,
    pub gn_tolerance: f64,
    pub gn_max_iterations: usize,
    pub solver: SolverOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            model: Model::L1R,
            lambda: 0.3,
            alpha_factor: 1e5,
            alpha_rule: AlphaRule::default(),
            zero_tolerance: 1e-9,
            max_stages: 10,
            gn_tolerance: 1e-5,
            gn_max_iterations: 50,
            solver: SolverOptions::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn new(model: Model, lambda: f64) -> Self {
        EstimatorConfig {
            model,
            lambda,
            ..EstimatorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.model.is_sparse() && !(self.lambda > 0.0) {
            return Err(EstimatorError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.gn_tolerance > 0.0) {
            return Err(EstimatorError::Config("gn_tolerance must be positive".into()));
        }
        if self.max_stages == 0 {
            return Err(EstimatorError::Config("max_stages must be at least 1".into()));
        }
        if !(self.alpha_factor >= 0.0) || !(self.zero_tolerance >= 0.0) {
            return Err(EstimatorError::Config("alpha_factor and zero_tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("invalid estimator configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Dimension(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("Gauss-Newton diverged at iteration {iteration} (step history {history:?})")]
    Diverged { iteration: usize, history: Vec<f64> },
    #[error("Gauss-Newton did not converge in {iterations} iterations (last step {last_step:.3e})")]
    NotConverged {
        iterations: usize,
        last_step: f64,
        history: Vec<f64>,
    },
}

impl EstimatorError {
    /// True for failures of the iteration itself rather than of the input.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            EstimatorError::Diverged { .. }
                | EstimatorError::NotConverged { .. }
                | EstimatorError::Solver(SolverError::NotConverged { .. })
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationResult {
    /// Estimated unknowns in estimation coordinates.
    pub x_hat: Vec<f64>,
    /// Full state when a network was supplied.
    pub state: Option<StateVector>,
    /// Empty for WLAV.
    pub e_hat: Vec<f64>,
    /// `y − h(x̂) − ê`.
    pub residuals: Vec<f64>,
    /// Objective of the last convex subproblem.
    pub objective: f64,
    pub gn_iterations: usize,
    pub stages: usize,
    /// Final capped-L1 weights; all ones for the other models.
    pub weights: Vec<f64>,
    /// Largest optimality certificate over every convex solve performed.
    pub certificate: f64,
    pub wall_time: f64,
    pub error_vs_truth: Option<f64>,
}

impl EstimationResult {
    pub fn with_truth(mut self, x_true: &StateVector) -> Self {
        self.error_vs_truth = Some(error_vs_truth(&self.x_hat, x_true));
        self
    }
}

/// `‖x̂ − x_true‖₂` in estimation coordinates.
pub fn error_vs_truth(x_hat: &[f64], x_true: &StateVector) -> f64 {
    let t = x_true.estimation_coords();
    assert_eq!(t.len(), x_hat.len(), "state dimension mismatch");
    x_hat.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Outcome of one convex subproblem.
#[derive(Clone, Debug)]
struct Step {
    x: Vec<f64>,
    e: Vec<f64>,
    objective: f64,
    certificate: f64,
    stages: usize,
    weights: Vec<f64>,
}

/// Trace of the capped-L1 reweighting loop.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub solution: SparseSolution,
    pub weights: Vec<f64>,
    pub stages: usize,
    /// Objective of each stage's solution under that stage's weights.
    pub objectives: Vec<f64>,
    pub certificate: f64,
    /// Largest [`SparseSolution::kkt_floor`] over the stages.
    pub certificate_floor: f64,
}

fn threshold_base(e: &[f64], c: &[f64], rule: AlphaRule) -> f64 {
    let min = e
        .iter()
        .zip(c)
        .filter(|(v, ci)| rule == AlphaRule::AllComponents || (**ci > 0.0 && **v != 0.0))
        .map(|(v, _)| v.abs())
        .fold(f64::INFINITY, f64::min);
    if min.is_finite() {
        min
    } else {
        0.0
    }
}

/// Multi-stage convex relaxation: solve with weights `c`, then
/// `α = alpha_factor · min |ê_i|` over the components chosen by the
/// [`AlphaRule`] and `c_i = I(|ê_i| ≤ α + zero_tolerance)`.
/// Stops when `c` repeats (reported as the stage that would repeat) or when
/// `max_stages` solves have been made.
pub fn multi_stage<F>(mut solve_one_stage: F, c0: Vec<f64>, cfg: &EstimatorConfig) -> Result<StageTrace, SolverError>
where
    F: FnMut(&[f64]) -> Result<SparseSolution, SolverError>,
{
    let mut c = c0;
    let mut objectives = Vec::new();
    let mut certificate: f64 = 0.0;
    let mut certificate_floor: f64 = 0.0;
    let mut stage = 1;
    loop {
        let sol = solve_one_stage(&c)?;
        objectives.push(sol.objective);
        certificate = certificate.max(sol.kkt_residual);
        certificate_floor = certificate_floor.max(sol.kkt_floor);
        let alpha = cfg.alpha_factor * threshold_base(&sol.e_hat, &c, cfg.alpha_rule);
        let sticky = cfg.alpha_rule == AlphaRule::NonzeroComponents;
        let next: Vec<f64> = sol
            .e_hat
            .iter()
            .zip(&c)
            .map(|(e, ci)| {
                let kept = e.abs() <= alpha + cfg.zero_tolerance && !(sticky && *ci == 0.0);
                if kept {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        if next == c {
            return Ok(StageTrace {
                solution: sol,
                weights: c,
                stages: stage + 1,
                objectives,
                certificate,
                certificate_floor,
            });
        }
        if stage >= cfg.max_stages {
            return Ok(StageTrace {
                solution: sol,
                weights: c,
                stages: stage,
                objectives,
                certificate,
                certificate_floor,
            });
        }
        c = next;
        stage += 1;
    }
}

fn solve_step(h: &DMatrix<f64>, y: &[f64], cfg: &EstimatorConfig, c0: Option<Vec<f64>>) -> Result<Step, SolverError> {
    let m = y.len();
    match cfg.model {
        Model::Wlav => {
            let lad = solve_lad(h, y, &cfg.solver)?;
            Ok(Step {
                x: lad.x,
                e: vec![],
                objective: lad.objective,
                certificate: lad.certificate,
                stages: 1,
                weights: vec![1.0; m],
            })
        }
        Model::L1R => {
            let ones = vec![1.0; m];
            let sol = solve_weighted_l1ls(h, y, cfg.lambda, &ones, &cfg.solver)?;
            Ok(Step {
                certificate: sol.kkt_residual,
                x: sol.x_hat,
                e: sol.e_hat,
                objective: sol.objective,
                stages: 1,
                weights: ones,
            })
        }
        Model::CappedL1 => {
            let c0 = c0.unwrap_or_else(|| vec![1.0; m]);
            let trace = multi_stage(|c| solve_weighted_l1ls(h, y, cfg.lambda, c, &cfg.solver), c0, cfg)?;
            Ok(Step {
                x: trace.solution.x_hat,
                e: trace.solution.e_hat,
                objective: trace.solution.objective,
                certificate: trace.certificate,
                stages: trace.stages,
                weights: trace.weights,
            })
        }
    }
}

/// Estimate `x` from `y = Hx + v + e`.
pub fn estimate_linear(h: &DMatrix<f64>, y: &[f64], cfg: &EstimatorConfig) -> Result<EstimationResult, EstimatorError> {
    cfg.validate()?;
    if h.nrows() != y.len() {
        return Err(EstimatorError::Dimension(format!(
            "matrix has {} rows but {} measurements were given",
            h.nrows(),
            y.len()
        )));
    }
    let start = Instant::now();
    let step = solve_step(h, y, cfg, None)?;
    let wall_time = start.elapsed().as_secs_f64();
    let fitted = h * nalgebra::DVector::from_column_slice(&step.x);
    let residuals = (0..y.len())
        .map(|i| y[i] - fitted[i] - step.e.get(i).copied().unwrap_or(0.0))
        .collect();
    Ok(EstimationResult {
        x_hat: step.x,
        state: None,
        e_hat: step.e,
        residuals,
        objective: step.objective,
        gn_iterations: 0,
        stages: step.stages,
        weights: step.weights,
        certificate: step.certificate,
        wall_time,
        error_vs_truth: None,
    })
}

/// Gauss–Newton on the SCADA model: each step solves the chosen convex model
/// on `(H(x^k), y − h(x^k))` and applies `x^{k+1} = x^k + Δx` undamped.
pub fn estimate_nonlinear(
    net: &NetworkModel,
    plan: &MeasurementPlan,
    y: &[f64],
    x0: &StateVector,
    cfg: &EstimatorConfig,
) -> Result<EstimationResult, EstimatorError> {
    cfg.validate()?;
    if plan.family != Family::Scada {
        return Err(EstimatorError::Dimension("nonlinear estimation needs a SCADA plan".into()));
    }
    if y.len() != plan.len() {
        return Err(EstimatorError::Dimension(format!(
            "plan has {} channels but {} measurements were given",
            plan.len(),
            y.len()
        )));
    }
    if x0.n_buses() != net.n_buses() {
        return Err(EstimatorError::Dimension("initial state does not match the network".into()));
    }
    let start = Instant::now();
    let mut state = x0.to_polar();
    let mut x = state.estimation_coords();
    let n = net.n_buses();
    let mut weights: Option<Vec<f64>> = None;
    let mut history = Vec::new();
    let mut certificate: f64 = 0.0;
    for iteration in 1..=cfg.gn_max_iterations {
        let h_x = eval_scada(&state, net, plan);
        let dy: Vec<f64> = y.iter().zip(&h_x).map(|(a, b)| a - b).collect();
        let jac = scada_jacobian(&state, net, plan);
        let step = solve_step(&jac, &dy, cfg, weights.take())?;
        certificate = certificate.max(step.certificate);
        let size = step.x.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
        history.push(size);
        for (xi, di) in x.iter_mut().zip(&step.x) {
            *xi += di;
        }
        let v_ok = x[n - 1..].iter().all(|v| *v > 0.0);
        if !(size <= 10.0) || !v_ok {
            return Err(EstimatorError::Diverged { iteration, history });
        }
        state = state.with_estimation_coords(&x);
        if size <= cfg.gn_tolerance {
            let h_x = eval_scada(&state, net, plan);
            let residuals = (0..y.len())
                .map(|i| y[i] - h_x[i] - step.e.get(i).copied().unwrap_or(0.0))
                .collect();
            return Ok(EstimationResult {
                x_hat: x,
                state: Some(state),
                e_hat: step.e,
                residuals,
                objective: step.objective,
                gn_iterations: iteration,
                stages: step.stages,
                weights: step.weights,
                certificate,
                wall_time: start.elapsed().as_secs_f64(),
                error_vs_truth: None,
            });
        }
        if cfg.model == Model::CappedL1 {
            weights = Some(step.weights);
        }
    }
    Err(EstimatorError::NotConverged {
        iterations: cfg.gn_max_iterations,
        last_step: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Linear estimate on the PMU model of a network, returning the state too.
pub fn estimate_pmu(
    net: &NetworkModel,
    plan: &MeasurementPlan,
    h: &DMatrix<f64>,
    y: &[f64],
    cfg: &EstimatorConfig,
) -> Result<EstimationResult, EstimatorError> {
    if plan.family != Family::Pmu {
        return Err(EstimatorError::Dimension("linear estimation needs a PMU plan".into()));
    }
    let mut res = estimate_linear(h, y, cfg)?;
    let template = StateVector::flat(net, Family::Pmu);
    res.state = Some(template.with_estimation_coords(&res.x_hat));
    Ok(res)
}

/// Rectangular or polar, whichever the family estimates in.
pub fn family_of(state: &StateVector) -> Family {
    match state.coords {
        Coords::Rectangular { .. } => Family::Pmu,
        Coords::Polar { .. } => Family::Scada,
    }
}
