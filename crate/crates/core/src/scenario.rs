//! Measurement realizations `y = h(x_true) + v + e` for Monte Carlo trials.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meas::{eval, Family, MeasurementPlan, StateVector};
use crate::netmodel::NetworkModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("bad_rate must lie in [0, 0.5), got {0}")]
    BadRate(f64),
    #[error("gross magnitude interval [{0}, {1}] must satisfy 0 <= lo <= hi")]
    Magnitude(f64, f64),
    #[error("trials must be at least 1")]
    Trials,
    #[error("noise_scale must be finite and non-negative, got {0}")]
    NoiseScale(f64),
    #[error("state has {state} buses but the network has {net}")]
    StateSize { state: usize, net: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub bad_rate: f64,
    /// `[lo, hi]` in multiples of each channel's σ.
    pub gross_magnitude: (f64, f64),
    pub seed: u64,
    pub trials: usize,
    /// Multiplies every σ when drawing noise; 0 gives noiseless data.
    pub noise_scale: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            bad_rate: 0.06,
            gross_magnitude: (25.0, 50.0),
            seed: 42,
            trials: 100,
            noise_scale: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(0.0..0.5).contains(&self.bad_rate) {
            return Err(ScenarioError::BadRate(self.bad_rate));
        }
        let (lo, hi) = self.gross_magnitude;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(ScenarioError::Magnitude(lo, hi));
        }
        if self.trials == 0 {
            return Err(ScenarioError::Trials);
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(ScenarioError::NoiseScale(self.noise_scale));
        }
        Ok(())
    }

    /// `round(bad_rate · channels)`.
    pub fn bad_count(&self, channels: usize) -> usize {
        (self.bad_rate * channels as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub plan: MeasurementPlan,
    pub y: Vec<f64>,
    pub y_clean: Vec<f64>,
    pub noise: Vec<f64>,
    pub gross: Vec<f64>,
    pub bad_mask: Vec<bool>,
    pub seed: u64,
    pub trial: u64,
}

impl MeasurementSet {
    pub fn bad_indices(&self) -> Vec<usize> {
        (0..self.bad_mask.len()).filter(|&i| self.bad_mask[i]).collect()
    }
}

/// Solved operating point of the case in the coordinates used by `family`.
pub fn true_state(net: &NetworkModel, family: Family) -> StateVector {
    let slack = net.slack();
    let v: Vec<f64> = net.buses.iter().map(|b| b.v_true).collect();
    let theta: Vec<f64> = net.buses.iter().map(|b| b.theta_true).collect();
    let polar = StateVector::polar(v, theta, slack);
    match family {
        Family::Pmu => polar.to_rectangular(),
        Family::Scada => polar,
    }
}

/// Independent stream per trial so results do not depend on execution order.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

pub fn generate(
    net: &NetworkModel,
    plan: &MeasurementPlan,
    x_true: &StateVector,
    cfg: &ScenarioConfig,
    trial: u64,
) -> Result<MeasurementSet, ScenarioError> {
    cfg.validate()?;
    if x_true.n_buses() != net.n_buses() {
        return Err(ScenarioError::StateSize {
            state: x_true.n_buses(),
            net: net.n_buses(),
        });
    }
    let y_clean = eval(x_true, net, plan);
    let sigmas = plan.sigmas();
    let m = y_clean.len();
    let mut rng = trial_rng(cfg.seed, trial);

    let noise: Vec<f64> = sigmas
        .iter()
        .map(|s| {
            let z: f64 = rng.sample(StandardNormal);
            cfg.noise_scale * s * z
        })
        .collect();

    let mut bad = index::sample(&mut rng, m, cfg.bad_count(m)).into_vec();
    bad.sort_unstable();
    let mut gross = vec![0.0; m];
    let mut bad_mask = vec![false; m];
    let (lo, hi) = cfg.gross_magnitude;
    for i in bad {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let u = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        gross[i] = sign * u * sigmas[i];
        bad_mask[i] = true;
    }
    let y = (0..m).map(|i| y_clean[i] + noise[i] + gross[i]).collect();
    Ok(MeasurementSet {
        plan: plan.clone(),
        y,
        y_clean,
        noise,
        gross,
        bad_mask,
        seed: cfg.seed,
        trial,
    })
}
