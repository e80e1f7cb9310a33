//! Monte Carlo experiments: trial generation, estimator runs over λ and
//! bad-rate grids, CSV output and aggregation.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{error_vs_truth, estimate_linear, estimate_nonlinear, EstimatorConfig, EstimatorError, Model};
use crate::meas::{default_plan, pmu_matrix, Family, StateVector};
use crate::netmodel::{load_case, CaseError};
use crate::scenario::{generate, true_state, ScenarioConfig, ScenarioError};

/// Version tag written as the first line of every results file.
pub const CSV_SCHEMA: &str = "# gridse results v1";
pub const CSV_HEADER: &str = "model,case,family,lambda,bad_rate,trial,seed,error,objective,gn_iters,stages,time_ms,converged";
/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "GRIDSE_THREADS";

pub const DEFAULT_LAMBDA_GRID: [f64; 11] = [0.01, 0.02, 0.05, 0.08, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 5.0];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("estimation failed: {0}")]
    Estimator(EstimatorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("spec file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub case_path: PathBuf,
    pub family: Family,
    pub models: Vec<Model>,
    pub lambda_grid: Vec<f64>,
    pub bad_rate_grid: Vec<f64>,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    /// Template for every run; `model` and `lambda` come from the grids.
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(case_path: impl Into<PathBuf>, family: Family) -> Self {
        ExperimentSpec {
            case_path: case_path.into(),
            family,
            models: Model::ALL.to_vec(),
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            bad_rate_grid: vec![ScenarioConfig::default().bad_rate],
            scenario: ScenarioConfig::default(),
            estimator: EstimatorConfig::default(),
            output_path: None,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.models.is_empty() {
            return Err(HarnessError::Spec("model list is empty".into()));
        }
        if self.lambda_grid.is_empty() || self.bad_rate_grid.is_empty() {
            return Err(HarnessError::Spec("λ and bad-rate grids must be non-empty".into()));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(HarnessError::Spec(format!("λ must be positive and finite, got {l}")));
        }
        for &rate in &self.bad_rate_grid {
            ScenarioConfig { bad_rate: rate, ..self.scenario.clone() }.validate()?;
        }
        self.scenario.validate()?;
        Ok(())
    }

    /// `|models| × |λ grid| × |rate grid| × trials`.
    pub fn row_count(&self) -> usize {
        self.models.len() * self.lambda_grid.len() * self.bad_rate_grid.len() * self.scenario.trials
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: Model,
    #[serde(rename = "case")]
    pub case_name: String,
    pub family: Family,
    pub lambda: f64,
    pub bad_rate: f64,
    pub trial: u64,
    pub seed: u64,
    /// Blank when the run failed.
    #[serde(rename = "error")]
    pub error_vs_truth: Option<f64>,
    pub objective: Option<f64>,
    #[serde(rename = "gn_iters")]
    pub gn_iterations: usize,
    pub stages: usize,
    #[serde(rename = "time_ms")]
    pub wall_time_ms: f64,
    pub converged: bool,
    /// Largest solver certificate of the run; not written to CSV.
    #[serde(skip)]
    pub certificate: Option<f64>,
    /// Failure message of a non-converged run; not written to CSV.
    #[serde(skip)]
    pub failure: Option<String>,
}

impl ResultRow {
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        (self.model, &self.case_name, self.family)
            .cmp(&(other.model, &other.case_name, other.family))
            .then(self.lambda.total_cmp(&other.lambda))
            .then(self.bad_rate.total_cmp(&other.bad_rate))
            .then(self.trial.cmp(&other.trial))
    }
}

/// Rayon pool honouring [`THREADS_ENV`].
fn worker_pool() -> Result<rayon::ThreadPool, HarnessError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(text) = std::env::var(THREADS_ENV) {
        let n: usize = text
            .trim()
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| HarnessError::Spec(format!("{THREADS_ENV} must be a positive integer, got `{text}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| HarnessError::Spec(e.to_string()))
}

/// Runs every (rate, trial) scenario through every model and λ.
/// Rows come back sorted by model, λ, rate and trial.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>, HarnessError> {
    spec.validate()?;
    let net = load_case(&spec.case_path)?;
    let plan = default_plan(&net, spec.family);
    plan.validate(&net).map_err(|e| HarnessError::Spec(e.to_string()))?;
    let x_true = true_state(&net, spec.family);
    let h = match spec.family {
        Family::Pmu => Some(pmu_matrix(&net, &plan)),
        Family::Scada => None,
    };
    let flat = StateVector::flat(&net, spec.family);

    let jobs: Vec<(f64, u64)> = spec
        .bad_rate_grid
        .iter()
        .flat_map(|&rate| (0..spec.scenario.trials as u64).map(move |t| (rate, t)))
        .collect();

    let run_job = |&(rate, trial): &(f64, u64)| -> Result<Vec<ResultRow>, HarnessError> {
        let scenario = ScenarioConfig { bad_rate: rate, ..spec.scenario.clone() };
        let set = generate(&net, &plan, &x_true, &scenario, trial)?;
        let mut rows = Vec::with_capacity(spec.models.len() * spec.lambda_grid.len());
        for &model in &spec.models {
            for &lambda in &spec.lambda_grid {
                let cfg = EstimatorConfig { model, lambda, ..spec.estimator.clone() };
                let start = Instant::now();
                let outcome = match &h {
                    Some(h) => estimate_linear(h, &set.y, &cfg),
                    None => estimate_nonlinear(&net, &plan, &set.y, &flat, &cfg),
                };
                let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
                let mut row = ResultRow {
                    model,
                    case_name: net.name.clone(),
                    family: spec.family,
                    lambda,
                    bad_rate: rate,
                    trial,
                    seed: scenario.seed,
                    error_vs_truth: None,
                    objective: None,
                    gn_iterations: 0,
                    stages: 0,
                    wall_time_ms,
                    converged: false,
                    certificate: None,
                    failure: None,
                };
                match outcome {
                    Ok(res) => {
                        row.error_vs_truth = Some(error_vs_truth(&res.x_hat, &x_true));
                        row.objective = Some(res.objective);
                        row.gn_iterations = res.gn_iterations;
                        row.stages = res.stages;
                        row.converged = true;
                        row.certificate = Some(res.certificate);
                    }
                    Err(err) if err.is_convergence_failure() => {
                        if let EstimatorError::NotConverged { iterations, .. } = &err {
                            row.gn_iterations = *iterations;
                        }
                        if let EstimatorError::Diverged { iteration, .. } = &err {
                            row.gn_iterations = *iteration;
                        }
                        row.failure = Some(err.to_string());
                    }
                    Err(err) => return Err(HarnessError::Estimator(err)),
                }
                rows.push(row);
            }
        }
        Ok(rows)
    };

    let pool = worker_pool()?;
    let chunks: Vec<Vec<ResultRow>> = pool.install(|| jobs.par_iter().map(run_job).collect::<Result<_, _>>())?;
    let mut rows: Vec<ResultRow> = chunks.into_iter().flatten().collect();
    rows.sort_by(ResultRow::canonical_cmp);
    Ok(rows)
}

pub fn write_rows<W: Write>(mut out: W, rows: &[ResultRow]) -> Result<(), HarnessError> {
    writeln!(out, "{CSV_SCHEMA}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(HarnessError::Spec(format!("unexpected results header `{}`", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

/// One aggregate cell of a summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: Model,
    pub case: String,
    pub family: Family,
    pub lambda: f64,
    pub bad_rate: f64,
    pub trials: usize,
    pub converged: usize,
    /// Runs that diverged or hit an iteration cap.
    pub failures: usize,
    /// Blank when every run failed.
    pub mean_error: Option<f64>,
    pub std_error: Option<f64>,
    pub mean_time_ms: Option<f64>,
    pub std_time_ms: Option<f64>,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    model: Model,
    case: String,
    family: Family,
    lambda: u64,
    bad_rate: u64,
}

/// Order-preserving key for non-negative floats.
fn float_key(x: f64) -> u64 {
    x.to_bits()
}

/// Mean and sample standard deviation of error and time over converged runs,
/// one row per model × case × λ × rate.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Spec("no rows to summarize".into()));
    }
    let mut cells: BTreeMap<CellKey, Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        let key = CellKey {
            model: row.model,
            case: row.case_name.clone(),
            family: row.family,
            lambda: float_key(row.lambda),
            bad_rate: float_key(row.bad_rate),
        };
        cells.entry(key).or_default().push(row);
    }
    Ok(cells
        .into_values()
        .map(|cell| {
            let ok: Vec<&&ResultRow> = cell.iter().filter(|r| r.converged).collect();
            let errors: Vec<f64> = ok.iter().filter_map(|r| r.error_vs_truth).collect();
            let times: Vec<f64> = ok.iter().map(|r| r.wall_time_ms).collect();
            let (mean_error, std_error) = mean_std(&errors);
            let (mean_time_ms, std_time_ms) = mean_std(&times);
            let first = cell[0];
            SummaryRow {
                model: first.model,
                case: first.case_name.clone(),
                family: first.family,
                lambda: first.lambda,
                bad_rate: first.bad_rate,
                trials: cell.len(),
                converged: ok.len(),
                failures: cell.len() - ok.len(),
                mean_error,
                std_error,
                mean_time_ms,
                std_time_ms,
            }
        })
        .collect())
}

pub fn write_summary<W: Write>(out: W, summary: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for row in summary {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: Model, lambda: f64, trial: u64, error: Option<f64>) -> ResultRow {
        ResultRow {
            model,
            case_name: "c".into(),
            family: Family::Pmu,
            lambda,
            bad_rate: 0.06,
            trial,
            seed: 1,
            error_vs_truth: error,
            objective: error,
            gn_iterations: 0,
            stages: 1,
            wall_time_ms: 1.5,
            converged: error.is_some(),
            certificate: None,
            failure: None,
        }
    }

    #[test]
    fn constant_errors_summarize_exactly() {
        let rows: Vec<_> = (0..100).map(|t| row(Model::L1R, 0.3, t, Some(0.5))).collect();
        let s = summarize(&rows).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_error, Some(0.5));
        assert_eq!(s[0].std_error, Some(0.0));
        assert_eq!(s[0].mean_time_ms, Some(1.5));
        assert_eq!((s[0].trials, s[0].converged, s[0].failures), (100, 100, 0));
    }

    #[test]
    fn failed_runs_are_excluded_and_counted() {
        let mut rows = vec![row(Model::Wlav, 0.3, 0, Some(1.0)), row(Model::Wlav, 0.3, 1, Some(3.0))];
        rows.push(row(Model::Wlav, 0.3, 2, None));
        rows.push(row(Model::L1R, 0.3, 0, None));
        let s = summarize(&rows).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].model, Model::Wlav);
        assert_eq!(s[0].mean_error, Some(2.0));
        assert_eq!(s[0].failures, 1);
        assert_eq!(s[1].mean_error, None);
        assert_eq!(s[1].converged, 0);
    }

    #[test]
    fn empty_summary_rejected() {
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_keeps_bits() {
        let mut rows = vec![row(Model::CappedL1, 0.08, 3, Some(0.1 + 0.2)), row(Model::Wlav, 5.0, 0, None)];
        rows[0].wall_time_ms = 1.0 / 3.0;
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_SCHEMA));
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let back = read_rows(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn foreign_header_rejected() {
        let text = "a,b\n1,2\n";
        assert!(matches!(read_rows(text.as_bytes()), Err(HarnessError::Spec(_))));
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::new("x.json", Family::Pmu);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.row_count(), 3 * 11 * 100);
        spec.lambda_grid = vec![];
        assert!(spec.validate().is_err());
        spec.lambda_grid = vec![0.0];
        assert!(spec.validate().is_err());
        spec.lambda_grid = vec![0.3];
        spec.bad_rate_grid = vec![0.7];
        assert!(matches!(spec.validate(), Err(HarnessError::Scenario(_))));
        spec.bad_rate_grid = vec![0.06];
        spec.models.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let text = r#"{"case_path":"data/ieee9.json","family":"scada","models":["l1r"],"lambda_grid":[0.08],"bad_rate_grid":[0.06]}"#;
        let spec: ExperimentSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.scenario, ScenarioConfig::default());
        assert_eq!(spec.models, vec![Model::L1R]);
        assert_eq!(spec.output_path, None);
    }
}
