//! Measurement functions: linear PMU channels in rectangular coordinates and
//! nonlinear SCADA channels (voltage magnitudes, power injections and flows)
//! in polar coordinates, with the PMU matrix and SCADA Jacobian.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::NetworkModel;

pub const PMU_SIGMA_V: f64 = 0.002;
pub const PMU_SIGMA_I: f64 = 0.001;
pub const SCADA_SIGMA_V: f64 = 0.002;
pub const SCADA_SIGMA_PQ: f64 = 0.004;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("channel {index}: {kind:?} does not belong to the {family:?} family")]
    FamilyMismatch {
        index: usize,
        kind: ChannelKind,
        family: Family,
    },
    #[error("channel {index}: location does not fit a {kind:?} channel or is out of range")]
    BadLocation { index: usize, kind: ChannelKind },
    #[error("channel {index}: sigma must be positive")]
    NonPositiveSigma { index: usize },
    #[error("{channels} channels cannot determine {unknowns} unknowns")]
    TooFewChannels { channels: usize, unknowns: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Pmu,
    Scada,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Pmu => "pmu",
            Family::Scada => "scada",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pmu" => Ok(Family::Pmu),
            "scada" => Ok(Family::Scada),
            other => Err(format!("unknown measurement family `{other}` (expected pmu or scada)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelKind {
    VRe,
    VIm,
    IInjRe,
    IInjIm,
    IBrRe,
    IBrIm,
    Vmag,
    PInj,
    QInj,
    PFlow,
    QFlow,
}

impl ChannelKind {
    pub fn family(self) -> Family {
        use ChannelKind::*;
        match self {
            VRe | VIm | IInjRe | IInjIm | IBrRe | IBrIm => Family::Pmu,
            Vmag | PInj | QInj | PFlow | QFlow => Family::Scada,
        }
    }

    fn is_branch(self) -> bool {
        matches!(
            self,
            ChannelKind::IBrRe | ChannelKind::IBrIm | ChannelKind::PFlow | ChannelKind::QFlow
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum End {
    From,
    To,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Location {
    Bus { bus: usize },
    Branch { branch: usize, end: End },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementChannel {
    pub kind: ChannelKind,
    #[serde(flatten)]
    pub location: Location,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    pub family: Family,
    pub channels: Vec<MeasurementChannel>,
}

impl MeasurementPlan {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.sigma).collect()
    }

    pub fn validate(&self, net: &NetworkModel) -> Result<(), PlanError> {
        for (index, ch) in self.channels.iter().enumerate() {
            if ch.kind.family() != self.family {
                return Err(PlanError::FamilyMismatch {
                    index,
                    kind: ch.kind,
                    family: self.family,
                });
            }
            let ok = match ch.location {
                Location::Bus { bus } => !ch.kind.is_branch() && bus < net.n_buses(),
                Location::Branch { branch, .. } => ch.kind.is_branch() && branch < net.n_branches(),
            };
            if !ok {
                return Err(PlanError::BadLocation { index, kind: ch.kind });
            }
            if !(ch.sigma > 0.0) {
                return Err(PlanError::NonPositiveSigma { index });
            }
        }
        let unknowns = unknown_count(net, self.family);
        if self.channels.len() < unknowns {
            return Err(PlanError::TooFewChannels {
                channels: self.channels.len(),
                unknowns,
            });
        }
        Ok(())
    }
}

/// Number of estimated quantities: all `2n` rectangular coordinates for PMU,
/// `2n - 1` polar coordinates (slack angle pinned) for SCADA.
pub fn unknown_count(net: &NetworkModel, family: Family) -> usize {
    match family {
        Family::Pmu => 2 * net.n_buses(),
        Family::Scada => 2 * net.n_buses() - 1,
    }
}

fn bus_channel(kind: ChannelKind, bus: usize, sigma: f64) -> MeasurementChannel {
    MeasurementChannel {
        kind,
        location: Location::Bus { bus },
        sigma,
    }
}

fn branch_channel(kind: ChannelKind, branch: usize, end: End, sigma: f64) -> MeasurementChannel {
    MeasurementChannel {
        kind,
        location: Location::Branch { branch, end },
        sigma,
    }
}

/// Full-redundancy plan: every bus quantity and both ends of every branch.
pub fn default_plan(net: &NetworkModel, family: Family) -> MeasurementPlan {
    use ChannelKind::*;
    let n = net.n_buses();
    let mut channels = Vec::new();
    let (bus_kinds, flow_kinds, flow_sigma) = match family {
        Family::Pmu => (
            vec![
                (VRe, PMU_SIGMA_V),
                (VIm, PMU_SIGMA_V),
                (IInjRe, PMU_SIGMA_I),
                (IInjIm, PMU_SIGMA_I),
            ],
            [IBrRe, IBrIm],
            PMU_SIGMA_I,
        ),
        Family::Scada => (
            vec![(Vmag, SCADA_SIGMA_V), (PInj, SCADA_SIGMA_PQ), (QInj, SCADA_SIGMA_PQ)],
            [PFlow, QFlow],
            SCADA_SIGMA_PQ,
        ),
    };
    for &(kind, sigma) in &bus_kinds {
        for bus in 0..n {
            channels.push(bus_channel(kind, bus, sigma));
        }
    }
    for branch in 0..net.n_branches() {
        for end in [End::From, End::To] {
            for kind in flow_kinds {
                channels.push(branch_channel(kind, branch, end, flow_sigma));
            }
        }
    }
    MeasurementPlan { family, channels }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum Coords {
    Rectangular { e: Vec<f64>, f: Vec<f64> },
    Polar { v: Vec<f64>, theta: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub coords: Coords,
    pub slack_index: usize,
}

impl StateVector {
    pub fn rectangular(e: Vec<f64>, f: Vec<f64>, slack_index: usize) -> Self {
        assert_eq!(e.len(), f.len());
        StateVector {
            coords: Coords::Rectangular { e, f },
            slack_index,
        }
    }

    pub fn polar(v: Vec<f64>, theta: Vec<f64>, slack_index: usize) -> Self {
        assert_eq!(v.len(), theta.len());
        StateVector {
            coords: Coords::Polar { v, theta },
            slack_index,
        }
    }

    /// Flat start: `v = 1, θ = 0` (equivalently `e = 1, f = 0`), slack angle
    /// taken from the case.
    pub fn flat(net: &NetworkModel, family: Family) -> Self {
        let n = net.n_buses();
        let slack = net.slack();
        match family {
            Family::Pmu => StateVector::rectangular(vec![1.0; n], vec![0.0; n], slack),
            Family::Scada => {
                let mut theta = vec![0.0; n];
                theta[slack] = net.buses[slack].theta_true;
                StateVector::polar(vec![1.0; n], theta, slack)
            }
        }
    }

    pub fn n_buses(&self) -> usize {
        match &self.coords {
            Coords::Rectangular { e, .. } => e.len(),
            Coords::Polar { v, .. } => v.len(),
        }
    }

    pub fn voltages(&self) -> Vec<Complex64> {
        match &self.coords {
            Coords::Rectangular { e, f } => {
                e.iter().zip(f).map(|(&re, &im)| Complex64::new(re, im)).collect()
            }
            Coords::Polar { v, theta } => {
                v.iter().zip(theta).map(|(&m, &a)| Complex64::from_polar(m, a)).collect()
            }
        }
    }

    /// Coordinates that are actually estimated: `[e; f]` for rectangular,
    /// `[θ without slack; v]` for polar.
    pub fn estimation_coords(&self) -> Vec<f64> {
        match &self.coords {
            Coords::Rectangular { e, f } => e.iter().chain(f).copied().collect(),
            Coords::Polar { v, theta } => theta
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != self.slack_index)
                .map(|(_, &t)| t)
                .chain(v.iter().copied())
                .collect(),
        }
    }

    /// Inverse of [`estimation_coords`](Self::estimation_coords); the pinned
    /// slack angle is taken from `self`.
    pub fn with_estimation_coords(&self, x: &[f64]) -> Self {
        let n = self.n_buses();
        match &self.coords {
            Coords::Rectangular { .. } => {
                StateVector::rectangular(x[..n].to_vec(), x[n..2 * n].to_vec(), self.slack_index)
            }
            Coords::Polar { theta, .. } => {
                let mut th = theta.clone();
                let mut k = 0;
                for (i, t) in th.iter_mut().enumerate() {
                    if i != self.slack_index {
                        *t = x[k];
                        k += 1;
                    }
                }
                StateVector::polar(x[n - 1..2 * n - 1].to_vec(), th, self.slack_index)
            }
        }
    }

    pub fn to_polar(&self) -> Self {
        let u = self.voltages();
        StateVector::polar(
            u.iter().map(|c| c.norm()).collect(),
            u.iter().map(|c| c.arg()).collect(),
            self.slack_index,
        )
    }

    pub fn to_rectangular(&self) -> Self {
        let u = self.voltages();
        StateVector::rectangular(
            u.iter().map(|c| c.re).collect(),
            u.iter().map(|c| c.im).collect(),
            self.slack_index,
        )
    }
}

/// Evaluate `h(x)` for whichever family the plan belongs to.
pub fn eval(x: &StateVector, net: &NetworkModel, plan: &MeasurementPlan) -> Vec<f64> {
    match plan.family {
        Family::Pmu => eval_pmu(x, net, plan),
        Family::Scada => eval_scada(x, net, plan),
    }
}

fn branch_current(net: &NetworkModel, u: &[Complex64], branch: usize, end: End) -> Complex64 {
    let br = &net.branches[branch];
    let tp = net.two_port(branch);
    let (uf, ut) = (u[br.from_bus], u[br.to_bus]);
    match end {
        End::From => tp.from_current(uf, ut),
        End::To => tp.to_current(uf, ut),
    }
}

/// PMU channel values via complex arithmetic (`I = Y U` for injections).
pub fn eval_pmu(x: &StateVector, net: &NetworkModel, plan: &MeasurementPlan) -> Vec<f64> {
    let u = x.voltages();
    let inj = net.ybus.mul_vec(&u);
    plan.channels
        .iter()
        .map(|ch| {
            use ChannelKind::*;
            match (ch.kind, ch.location) {
                (VRe, Location::Bus { bus }) => u[bus].re,
                (VIm, Location::Bus { bus }) => u[bus].im,
                (IInjRe, Location::Bus { bus }) => inj[bus].re,
                (IInjIm, Location::Bus { bus }) => inj[bus].im,
                (IBrRe, Location::Branch { branch, end }) => branch_current(net, &u, branch, end).re,
                (IBrIm, Location::Branch { branch, end }) => branch_current(net, &u, branch, end).im,
                (kind, loc) => panic!("{kind:?} at {loc:?} is not a PMU channel"),
            }
        })
        .collect()
}

/// Complex coefficients `c_k` such that the channel's complex quantity is
/// `Σ c_k U_k`, for current-type channels.
fn current_coefficients(net: &NetworkModel, loc: Location) -> Vec<(usize, Complex64)> {
    match loc {
        Location::Bus { bus } => net.ybus.row(bus).to_vec(),
        Location::Branch { branch, end } => {
            let br = &net.branches[branch];
            let tp = net.two_port(branch);
            match end {
                End::From => vec![(br.from_bus, tp.y_ff), (br.to_bus, tp.y_ft)],
                End::To => vec![(br.from_bus, tp.y_tf), (br.to_bus, tp.y_tt)],
            }
        }
    }
}

/// Matrix `H` with `eval_pmu(x) = H [e; f]`; columns are `e_1..e_n, f_1..f_n`.
pub fn pmu_matrix(net: &NetworkModel, plan: &MeasurementPlan) -> DMatrix<f64> {
    let n = net.n_buses();
    let mut h = DMatrix::zeros(plan.len(), 2 * n);
    for (row, ch) in plan.channels.iter().enumerate() {
        use ChannelKind::*;
        match ch.kind {
            VRe | VIm => {
                let Location::Bus { bus } = ch.location else {
                    panic!("voltage channel on a branch")
                };
                let col = if ch.kind == VRe { bus } else { n + bus };
                h[(row, col)] = 1.0;
            }
            IInjRe | IBrRe => {
                // Re(y U) = g e - b f
                for (j, y) in current_coefficients(net, ch.location) {
                    h[(row, j)] += y.re;
                    h[(row, n + j)] -= y.im;
                }
            }
            IInjIm | IBrIm => {
                // Im(y U) = b e + g f
                for (j, y) in current_coefficients(net, ch.location) {
                    h[(row, j)] += y.im;
                    h[(row, n + j)] += y.re;
                }
            }
            other => panic!("{other:?} is not a PMU channel"),
        }
    }
    h
}

/// Bus whose voltage multiplies the conjugated current in a power channel.
fn power_anchor(net: &NetworkModel, loc: Location) -> usize {
    match loc {
        Location::Bus { bus } => bus,
        Location::Branch { branch, end: End::From } => net.branches[branch].from_bus,
        Location::Branch { branch, end: End::To } => net.branches[branch].to_bus,
    }
}

fn complex_power(u: &[Complex64], anchor: usize, coeffs: &[(usize, Complex64)]) -> Complex64 {
    let current: Complex64 = coeffs.iter().map(|&(k, c)| c * u[k]).sum();
    u[anchor] * current.conj()
}

/// SCADA channel values: `Vmag = v_i`, injections `S_i = U_i conj((Y U)_i)`,
/// flows `S = U_end conj(I_end)` from the branch two-port.
pub fn eval_scada(x: &StateVector, net: &NetworkModel, plan: &MeasurementPlan) -> Vec<f64> {
    let u = x.voltages();
    plan.channels
        .iter()
        .map(|ch| {
            use ChannelKind::*;
            match ch.kind {
                Vmag => {
                    let Location::Bus { bus } = ch.location else {
                        panic!("Vmag on a branch")
                    };
                    u[bus].norm()
                }
                PInj | QInj | PFlow | QFlow => {
                    let s = complex_power(
                        &u,
                        power_anchor(net, ch.location),
                        &current_coefficients(net, ch.location),
                    );
                    if matches!(ch.kind, PInj | PFlow) {
                        s.re
                    } else {
                        s.im
                    }
                }
                other => panic!("{other:?} is not a SCADA channel"),
            }
        })
        .collect()
}

/// Column layout of the polar unknowns: non-slack angles first, then all
/// magnitudes.
#[derive(Clone, Copy, Debug)]
pub struct PolarColumns {
    n: usize,
    slack: usize,
}

impl PolarColumns {
    pub fn new(n: usize, slack: usize) -> Self {
        PolarColumns { n, slack }
    }

    pub fn theta(&self, bus: usize) -> Option<usize> {
        match bus.cmp(&self.slack) {
            std::cmp::Ordering::Less => Some(bus),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(bus - 1),
        }
    }

    pub fn v(&self, bus: usize) -> usize {
        self.n - 1 + bus
    }

    pub fn len(&self) -> usize {
        2 * self.n - 1
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Analytic Jacobian of [`eval_scada`] with respect to the polar unknowns
/// (layout per [`PolarColumns`]).
pub fn scada_jacobian(x: &StateVector, net: &NetworkModel, plan: &MeasurementPlan) -> DMatrix<f64> {
    let polar = x.to_polar();
    let Coords::Polar { v, .. } = &polar.coords else {
        unreachable!()
    };
    let u = polar.voltages();
    let cols = PolarColumns::new(net.n_buses(), x.slack_index);
    let mut h = DMatrix::zeros(plan.len(), cols.len());
    let j = Complex64::new(0.0, 1.0);
    for (row, ch) in plan.channels.iter().enumerate() {
        use ChannelKind::*;
        let real_part = match ch.kind {
            Vmag => {
                let Location::Bus { bus } = ch.location else {
                    panic!("Vmag on a branch")
                };
                h[(row, cols.v(bus))] = 1.0;
                continue;
            }
            PInj | PFlow => true,
            QInj | QFlow => false,
            other => panic!("{other:?} is not a SCADA channel"),
        };
        let a = power_anchor(net, ch.location);
        let coeffs = current_coefficients(net, ch.location);
        let current: Complex64 = coeffs.iter().map(|&(k, c)| c * u[k]).sum();
        let s = u[a] * current.conj();
        let pick = |z: Complex64| if real_part { z.re } else { z.im };

        // dS/dθ_a and dS/dv_a carry the extra term from U_a itself.
        if let Some(c) = cols.theta(a) {
            h[(row, c)] += pick(j * s);
        }
        h[(row, cols.v(a))] += pick(u[a] / v[a] * current.conj());
        for &(k, c) in &coeffs {
            let term = u[a] * (c * u[k]).conj();
            if let Some(col) = cols.theta(k) {
                h[(row, col)] += pick(-j * term);
            }
            h[(row, cols.v(k))] += pick(term / v[k]);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::parse_case_json;

    fn two_bus(b_charging: f64) -> NetworkModel {
        let text = format!(
            r#"{{
            "base_mva": 100,
            "buses": [
                {{"id": 1, "slack": true, "vm": 1.0, "va_deg": 0}},
                {{"id": 2, "vm": 1.0, "va_deg": 0}}
            ],
            "branches": [{{"from": 1, "to": 2, "r": 0, "x": 0.1, "b": {b_charging}}}]
        }}"#
        );
        parse_case_json(&text, "two").unwrap()
    }

    fn channel_value(plan: &MeasurementPlan, values: &[f64], kind: ChannelKind, loc: Location) -> f64 {
        let idx = plan
            .channels
            .iter()
            .position(|c| c.kind == kind && c.location == loc)
            .expect("channel present");
        values[idx]
    }

    #[test]
    fn pmu_plan_counts_and_sigmas() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Pmu);
        assert_eq!(plan.len(), 4 * 2 + 4);
        assert!(plan
            .channels
            .iter()
            .filter(|c| matches!(c.kind, ChannelKind::VRe | ChannelKind::VIm))
            .all(|c| c.sigma == 0.002));
        assert!(plan
            .channels
            .iter()
            .filter(|c| !matches!(c.kind, ChannelKind::VRe | ChannelKind::VIm))
            .all(|c| c.sigma == 0.001));
        plan.validate(&net).unwrap();
    }

    #[test]
    fn scada_plan_sigmas() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Scada);
        assert_eq!(plan.len(), 3 * 2 + 4);
        for c in &plan.channels {
            let expect = if c.kind == ChannelKind::Vmag { 0.002 } else { 0.004 };
            assert_eq!(c.sigma, expect);
        }
    }

    #[test]
    fn equal_voltages_carry_no_branch_current() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Pmu);
        let x = StateVector::rectangular(vec![1.0, 1.0], vec![0.0, 0.0], 0);
        let y = eval_pmu(&x, &net, &plan);
        for (ch, val) in plan.channels.iter().zip(&y) {
            if matches!(ch.kind, ChannelKind::IBrRe | ChannelKind::IBrIm) {
                assert_eq!(*val, 0.0);
            }
        }
    }

    #[test]
    fn branch_and_injection_current_hand_values() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Pmu);
        let x = StateVector::rectangular(vec![1.0, 0.9], vec![0.0, 0.0], 0);
        let y = eval_pmu(&x, &net, &plan);
        let from = Location::Branch { branch: 0, end: End::From };
        assert!(channel_value(&plan, &y, ChannelKind::IBrRe, from).abs() < 1e-12);
        assert!((channel_value(&plan, &y, ChannelKind::IBrIm, from) + 1.0).abs() < 1e-12);
        let bus0 = Location::Bus { bus: 0 };
        assert!(channel_value(&plan, &y, ChannelKind::IInjRe, bus0).abs() < 1e-12);
        assert!((channel_value(&plan, &y, ChannelKind::IInjIm, bus0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pmu_matrix_rows() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Pmu);
        let h = pmu_matrix(&net, &plan);
        let idx = |kind, loc| plan.channels.iter().position(|c| c.kind == kind && c.location == loc).unwrap();
        let vre1 = idx(ChannelKind::VRe, Location::Bus { bus: 1 });
        assert_eq!(h.row(vre1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
        let ibr = idx(ChannelKind::IBrIm, Location::Branch { branch: 0, end: End::From });
        let row: Vec<f64> = h.row(ibr).iter().copied().collect();
        for (a, b) in row.iter().zip([-10.0, 10.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn flat_state_lossless_network_has_no_power() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Scada);
        let x = StateVector::polar(vec![1.0, 1.0], vec![0.0, 0.0], 0);
        let y = eval_scada(&x, &net, &plan);
        for (ch, val) in plan.channels.iter().zip(&y) {
            if ch.kind == ChannelKind::Vmag {
                assert_eq!(*val, 1.0);
            } else {
                assert!(val.abs() < 1e-14, "{ch:?} = {val}");
            }
        }
    }

    #[test]
    fn two_bus_flow_hand_value() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Scada);
        let x = StateVector::polar(vec![1.0, 1.0], vec![0.0, -0.1], 0);
        let y = eval_scada(&x, &net, &plan);
        let p = channel_value(&plan, &y, ChannelKind::PFlow, Location::Branch { branch: 0, end: End::From });
        assert!((p - 10.0 * 0.1f64.sin()).abs() < 1e-12, "{p}");
        assert!((p - 0.99833).abs() < 1e-5);
    }

    #[test]
    fn vmag_channel_is_magnitude() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Scada);
        let x = StateVector::polar(vec![1.03, 0.97], vec![0.0, -0.2], 0);
        let y = eval_scada(&x, &net, &plan);
        assert_eq!(channel_value(&plan, &y, ChannelKind::Vmag, Location::Bus { bus: 1 }), 0.97);
        assert!((channel_value(&plan, &y, ChannelKind::Vmag, Location::Bus { bus: 0 }) - 1.03).abs() < 1e-15);
    }

    #[test]
    fn jacobian_vmag_rows_are_unit() {
        let net = two_bus(0.1);
        let plan = default_plan(&net, Family::Scada);
        let x = StateVector::polar(vec![1.01, 0.98], vec![0.0, -0.05], 0);
        let h = scada_jacobian(&x, &net, &plan);
        let cols = PolarColumns::new(2, 0);
        for (row, ch) in plan.channels.iter().enumerate() {
            if let (ChannelKind::Vmag, Location::Bus { bus }) = (ch.kind, ch.location) {
                for c in 0..cols.len() {
                    let expect = if c == cols.v(bus) { 1.0 } else { 0.0 };
                    assert_eq!(h[(row, c)], expect);
                }
            }
        }
    }

    #[test]
    fn jacobian_flat_lossless_has_no_voltage_sensitivity_in_p() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Scada);
        let x = StateVector::flat(&net, Family::Scada);
        let h = scada_jacobian(&x, &net, &plan);
        let cols = PolarColumns::new(2, 0);
        for (row, ch) in plan.channels.iter().enumerate() {
            if ch.kind == ChannelKind::PInj {
                for bus in 0..2 {
                    assert!(h[(row, cols.v(bus))].abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn plan_json_shape() {
        let net = two_bus(0.0);
        let plan = default_plan(&net, Family::Pmu);
        let text = serde_json::to_string(&plan).unwrap();
        assert!(text.contains(r#"{"kind":"VRe","bus":0,"sigma":0.002}"#), "{text}");
        assert!(text.contains(r#"{"kind":"IBrRe","branch":0,"end":"from","sigma":0.001}"#), "{text}");
        let back: MeasurementPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn plan_validation_errors() {
        let net = two_bus(0.0);
        let mut plan = default_plan(&net, Family::Pmu);
        plan.channels[0].sigma = 0.0;
        assert_eq!(plan.validate(&net), Err(PlanError::NonPositiveSigma { index: 0 }));
        let mut plan = default_plan(&net, Family::Pmu);
        plan.channels[0].kind = ChannelKind::PInj;
        assert!(matches!(plan.validate(&net), Err(PlanError::FamilyMismatch { .. })));
        let mut plan = default_plan(&net, Family::Pmu);
        plan.channels[0].location = Location::Bus { bus: 9 };
        assert!(matches!(plan.validate(&net), Err(PlanError::BadLocation { .. })));
        let mut plan = default_plan(&net, Family::Pmu);
        plan.channels.truncate(3);
        assert!(matches!(plan.validate(&net), Err(PlanError::TooFewChannels { .. })));
    }

    #[test]
    fn estimation_coords_round_trip() {
        let x = StateVector::polar(vec![1.0, 0.9, 1.1], vec![0.1, 0.2, 0.3], 1);
        let c = x.estimation_coords();
        assert_eq!(c, vec![0.1, 0.3, 1.0, 0.9, 1.1]);
        assert_eq!(x.with_estimation_coords(&c), x);
    }
}
