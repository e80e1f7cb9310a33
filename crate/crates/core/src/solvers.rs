//! Convex kernels behind the estimators.
//!
//! * [`solve_lad`]: least absolute deviations, `min ‖b − Ax‖₁`, by a
//!   bounded-variable dual simplex on the vertex structure of the problem.
//!   Every return carries a dual vector `s` with `Aᵀs = 0`, `|s| ≤ 1` and
//!   `s_i = sign(r_i)` on nonzero residuals.
//! * [`solve_weighted_l1ls`]: `min ρ(b − Ax − e) + λ Σ c_i |e_i|`. With the
//!   squared residual `e` can be eliminated, leaving Huber regression in `x`
//!   with per-row threshold `λ c_i / 2`; it is solved by a finite Newton
//!   (active-set) iteration whose last step is exact. The unsquared form is
//!   reduced to a sequence of Huber problems through
//!   `‖r‖ = min_σ ‖r‖²/(2σ) + σ/2` and finished by an exact solve on the
//!   identified support.
//! * [`solve_l0_oracle`]: exhaustive search over small supports.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rank test threshold on the triangular factor, relative to its largest pivot.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Residual norms below this fraction of `1 + ‖b‖` count as exact fits.
const ZERO_RESIDUAL: f64 = 1e-10;

/// Largest accepted [`l1ls_kkt_floor`]; a residual that small relative to its
/// rounding is an exact fit and must pass the zero-residual test instead.
const MAX_KKT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("matrix is rank deficient (pivot ratio {ratio:.3e})")]
    Singular { ratio: f64 },
    #[error("no convergence after {iterations} iterations (optimality residual {kkt_residual:.3e})")]
    NotConverged {
        x: Vec<f64>,
        e: Vec<f64>,
        kkt_residual: f64,
        iterations: usize,
    },
    #[error("lambda must be positive, got {0}")]
    InvalidLambda(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("brute-force search limited to 20 rows and support 3 (got {rows} rows, support {k})")]
    OracleTooLarge { rows: usize, k: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualForm {
    /// `‖r‖₂²`
    L2Squared,
    /// `‖r‖₂`
    #[default]
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub residual_form: ResidualForm,
    pub tol: f64,
    pub max_inner_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            residual_form: ResidualForm::default(),
            tol: 1e-8,
            max_inner_iterations: 5_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseSolution {
    pub x_hat: Vec<f64>,
    pub e_hat: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    /// Roundoff level below which `kkt_residual` cannot be resolved at `x_hat`.
    pub kkt_floor: f64,
    pub inner_iterations: usize,
}

impl SparseSolution {
    /// `kkt_residual ≤ max(tol, kkt_floor)`.
    pub fn certified(&self, tol: f64) -> bool {
        self.kkt_residual <= tol.max(self.kkt_floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadSolution {
    pub x: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Dual certificate `s`.
    pub dual: Vec<f64>,
    pub objective: f64,
    /// `max(‖Aᵀs‖_∞, max_i |s_i| − 1)`.
    pub certificate: f64,
    pub iterations: usize,
    /// Rows interpolated exactly by `x`.
    pub basis: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct L0Solution {
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    pub support: Vec<usize>,
    /// `‖b − Ax − e‖₂`
    pub objective: f64,
}

fn check_dims(a: &DMatrix<f64>, b: &[f64]) -> Result<(), SolverError> {
    if a.nrows() != b.len() {
        return Err(SolverError::DimensionMismatch(format!(
            "matrix has {} rows but right-hand side has {}",
            a.nrows(),
            b.len()
        )));
    }
    if a.nrows() < a.ncols() {
        return Err(SolverError::Singular { ratio: 0.0 });
    }
    Ok(())
}

/// Least squares through Householder QR, rejecting rank-deficient `a`.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
    if a.nrows() < a.ncols() {
        return Err(SolverError::Singular { ratio: 0.0 });
    }
    if a.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = r.diagonal().iter().map(|d| d.abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min < RANK_TOLERANCE * max {
        return Err(SolverError::Singular {
            ratio: if max > 0.0 { min / max } else { 0.0 },
        });
    }
    let qtb = qr.q().tr_mul(b);
    r.solve_upper_triangular(&qtb)
        .ok_or(SolverError::Singular { ratio: 0.0 })
}

/// Objective `ρ(b − Ax − e) + λ Σ c_i |e_i|` for either residual form.
pub fn l1ls_objective(
    a: &DMatrix<f64>,
    b: &[f64],
    x: &[f64],
    e: &[f64],
    lambda: f64,
    c: &[f64],
    form: ResidualForm,
) -> f64 {
    let ax = a * DVector::from_column_slice(x);
    let rr: f64 = (0..b.len()).map(|i| (b[i] - ax[i] - e[i]).powi(2)).sum();
    let penalty: f64 = e.iter().zip(c).map(|(ei, ci)| ci * ei.abs()).sum();
    let fit = match form {
        ResidualForm::L2Squared => rr,
        ResidualForm::L2 => rr.sqrt(),
    };
    fit + lambda * penalty
}

/// First-order optimality residual of `(x, e)` for the weighted problem.
///
/// Squared form: `‖Aᵀr‖_∞`, `|2r_i| ≤ λc_i` where `e_i = 0`,
/// `2r_i = λc_i sign(e_i)` where `e_i ≠ 0`. Unsquared form: the same
/// conditions on `u = r/‖r‖` with `λc_i` in place of `2·`.
pub fn l1ls_kkt_residual(
    a: &DMatrix<f64>,
    b: &[f64],
    x: &[f64],
    e: &[f64],
    lambda: f64,
    c: &[f64],
    form: ResidualForm,
) -> f64 {
    let ax = a * DVector::from_column_slice(x);
    let mut r = DVector::from_fn(b.len(), |i, _| b[i] - ax[i] - e[i]);
    match form {
        ResidualForm::L2Squared => r *= 2.0,
        ResidualForm::L2 => {
            let norm = r.norm();
            let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= ZERO_RESIDUAL * (1.0 + bnorm) {
                return zero_residual_kkt(a, e, lambda, c);
            }
            r /= norm;
        }
    }
    let stationarity = if form == ResidualForm::L2Squared {
        (a.tr_mul(&r) / 2.0).amax()
    } else {
        a.tr_mul(&r).amax()
    };
    let mut worst = stationarity;
    for i in 0..b.len() {
        let bound = lambda * c[i];
        let v = if e[i] != 0.0 {
            (r[i] - bound * e[i].signum()).abs()
        } else {
            (r[i].abs() - bound).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Resolution limit of [`l1ls_kkt_residual`]. Rounding `x` to floats perturbs
/// `r` by about `ε(‖b‖ + ‖A‖‖x‖ + ‖e‖)`, which the unsquared form divides by
/// `‖r‖`, so a tiny but nonzero optimal residual cannot be certified to `tol`.
pub fn l1ls_kkt_floor(a: &DMatrix<f64>, b: &[f64], x: &[f64], e: &[f64], form: ResidualForm) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
    let anorm = a.norm();
    let noise = 4.0 * f64::EPSILON * (norm(b) + anorm * norm(x) + norm(e)) * anorm.max(1.0);
    match form {
        ResidualForm::L2Squared => 2.0 * noise,
        ResidualForm::L2 => {
            let ax = a * DVector::from_column_slice(x);
            let r = (0..b.len()).map(|i| (b[i] - ax[i] - e[i]).powi(2)).sum::<f64>().sqrt();
            if r <= ZERO_RESIDUAL * (1.0 + norm(b)) {
                0.0
            } else {
                (noise / r).min(MAX_KKT_FLOOR)
            }
        }
    }
}

/// Unsquared form at `r = 0`: the multiplier `u` is pinned to `λc_i sign(e_i)`
/// off the zero set `Z`, completed there by the minimum-norm `u_Z` with
/// `A_Zᵀu_Z = −g` and `|u_i| ≤ λc_i`, and must lie in the unit ball.
fn zero_residual_kkt(a: &DMatrix<f64>, e: &[f64], lambda: f64, c: &[f64]) -> f64 {
    let n = a.ncols();
    let mut g = DVector::zeros(n);
    let mut outside = 0.0;
    let zero: Vec<usize> = (0..e.len()).filter(|&i| e[i] == 0.0).collect();
    for i in 0..e.len() {
        if e[i] != 0.0 {
            let u = lambda * c[i] * e[i].signum();
            g.axpy(u, &a.row(i).transpose(), 1.0);
            outside += u * u;
        }
    }
    if zero.is_empty() {
        return g.amax().max(outside.sqrt() - 1.0).max(0.0);
    }
    let az = DMatrix::from_fn(zero.len(), n, |k, j| a[(zero[k], j)]);
    let bounds: Vec<f64> = zero.iter().map(|&i| lambda * c[i]).collect();
    let u = box_min_norm(&az, &bounds, &(-&g));
    let gap = (az.tr_mul(&u) + &g).amax();
    gap.max((outside + u.norm_squared()).sqrt() - 1.0).max(0.0)
}

/// `argmin ‖u‖₂` subject to `Mᵀu = f` and `|u_i| ≤ h_i`, through its dual
/// `min_y Σ huber_{h_i}(m_iᵀy) − fᵀy` whose minimizer gives `u = clip(My, h)`.
/// When the constraints are infeasible the returned `u` leaves a gap in `Mᵀu = f`.
fn box_min_norm(m: &DMatrix<f64>, h: &[f64], f: &DVector<f64>) -> DVector<f64> {
    let n = m.ncols();
    let clip = |t: &DVector<f64>| DVector::from_fn(t.len(), |i, _| t[i].clamp(-h[i], h[i]));
    let huber = |t: f64, hi: f64| {
        if t.abs() <= hi {
            0.5 * t * t
        } else {
            hi * t.abs() - 0.5 * hi * hi
        }
    };
    let phi = |y: &DVector<f64>| {
        let t = m * y;
        (0..t.len()).map(|i| huber(t[i], h[i])).sum::<f64>() - f.dot(y)
    };
    let scale = 1.0 + f.amax() + m.amax();
    // unconstrained minimum norm; it answers outright when no bound is active,
    // which also covers a multiplier sitting exactly on its bound
    if let Some(ch) = m.tr_mul(m).cholesky() {
        let u = m * ch.solve(f);
        if (0..u.len()).all(|i| u[i].abs() <= h[i] * (1.0 + 1e-12)) {
            return clip(&u);
        }
    }
    let mut y = DVector::zeros(n);
    for _ in 0..200 {
        let t = m * &y;
        let u = clip(&t);
        let grad = m.tr_mul(&u) - f;
        if grad.amax() <= 1e-15 * scale {
            break;
        }
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..t.len() {
            if t[i].abs() < h[i] {
                let row = m.row(i);
                hess.ger(1.0, &row.transpose(), &row.transpose(), 1.0);
            }
        }
        let mut ridge = 1e-12 * (1.0 + hess.diagonal().amax());
        let dir = loop {
            let mut reg = hess.clone();
            for j in 0..n {
                reg[(j, j)] += ridge;
            }
            if let Some(ch) = reg.cholesky() {
                break -ch.solve(&grad);
            }
            ridge *= 100.0;
        };
        let f0 = phi(&y);
        let slope = grad.dot(&dir);
        let gnorm = grad.norm();
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial = &y + step * &dir;
            // near the solution the decrease in φ is below its roundoff, so a
            // smaller gradient also counts as progress
            let smaller = (m.tr_mul(&clip(&(m * &trial))) - f).norm() < 0.5 * gnorm;
            if phi(&trial) <= f0 + 1e-4 * step * slope || smaller {
                y = trial;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    clip(&(m * &y))
}

// ---------------------------------------------------------------------------
// Least absolute deviations

struct Basis {
    rows: Vec<usize>,
    is_basic: Vec<bool>,
    inv: DMatrix<f64>,
}

impl Basis {
    fn refactor(&mut self, a: &DMatrix<f64>) -> Result<(), SolverError> {
        let n = a.ncols();
        let m = DMatrix::from_fn(n, n, |p, j| a[(self.rows[p], j)]);
        self.inv = m.try_inverse().ok_or(SolverError::Singular { ratio: 0.0 })?;
        Ok(())
    }
}

/// Pick `n` linearly independent rows, preferring small `|r|`. Strict passes
/// come first so that near-dependent rows do not pile up into a singular basis.
fn initial_basis(a: &DMatrix<f64>, r: &DVector<f64>) -> Result<Vec<usize>, SolverError> {
    let (m, n) = a.shape();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| r[i].abs().total_cmp(&r[j].abs()).then(i.cmp(&j)));
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut taken = vec![false; m];
    for threshold in [0.1, 1e-3, 1e-6] {
        for &i in &order {
            if taken[i] {
                continue;
            }
            let row = a.row(i).transpose();
            let norm = row.norm();
            if norm == 0.0 {
                continue;
            }
            let mut w = row.clone();
            for _ in 0..2 {
                for q in &ortho {
                    let d = q.dot(&w);
                    w.axpy(-d, q, 1.0);
                }
            }
            let wn = w.norm();
            if wn > threshold * norm {
                ortho.push(w / wn);
                rows.push(i);
                taken[i] = true;
                if rows.len() == n {
                    return Ok(rows);
                }
            }
        }
    }
    Err(SolverError::Singular { ratio: 0.0 })
}

/// `min_x ‖b − Ax‖₁` with a dual certificate.
pub fn solve_lad(a: &DMatrix<f64>, b: &[f64], opts: &SolverOptions) -> Result<LadSolution, SolverError> {
    check_dims(a, b)?;
    let (m, n) = a.shape();
    let bv = DVector::from_column_slice(b);
    let x_ls = least_squares(a, &bv)?;
    if n == 0 {
        let objective = b.iter().map(|v| v.abs()).sum();
        return Ok(LadSolution {
            x: vec![],
            residuals: b.to_vec(),
            dual: b.iter().map(|v| v.signum() * (*v != 0.0) as u8 as f64).collect(),
            objective,
            certificate: 0.0,
            iterations: 0,
            basis: vec![],
        });
    }
    let r_ls = &bv - a * &x_ls;
    let rows = initial_basis(a, &r_ls)?;
    let mut is_basic = vec![false; m];
    for &i in &rows {
        is_basic[i] = true;
    }
    let mut basis = Basis {
        rows,
        is_basic,
        inv: DMatrix::zeros(n, n),
    };
    basis.refactor(a)?;

    let scale = 1.0 + bv.amax();
    let zero_tol = 1e-12 * scale;
    let dual_tol = 1e-11;
    let refactor_every = 50;
    // right-hand side perturbation used to escape degenerate cycling
    let perturbation = 1e-9 * scale;
    let max_perturbations = 3;

    let mut work = bv.clone();
    let mut perturbed = false;
    let mut perturbations = 0;
    let b_basic = |basis: &Basis, rhs: &DVector<f64>| DVector::from_fn(n, |p, _| rhs[basis.rows[p]]);
    let residuals_of = |basis: &Basis, rhs: &DVector<f64>| {
        let x = &basis.inv * b_basic(basis, rhs);
        let mut r = rhs - a * &x;
        for &i in &basis.rows {
            r[i] = 0.0;
        }
        (x, r)
    };
    let (mut x, mut r) = residuals_of(&basis, &work);
    let mut iterations = 0;
    let mut since_refactor = 0;
    let mut degenerate_run = 0;
    // side a row left the basis toward, used as its dual while its residual is zero
    let mut hint = vec![0.0; m];
    let sign_of = |r: &DVector<f64>, hint: &[f64], j: usize| {
        if r[j].abs() > zero_tol {
            r[j].signum()
        } else {
            hint[j]
        }
    };
    let mut breakpoints: Vec<(f64, f64, usize)> = Vec::with_capacity(m);
    loop {
        // signs of nonbasic residuals and the implied basic duals
        let mut z = DVector::zeros(n);
        for j in 0..m {
            let sg = sign_of(&r, &hint, j);
            if !basis.is_basic[j] && sg != 0.0 {
                z.axpy(sg, &a.row(j).transpose(), 1.0);
            }
        }
        let s_basic = -(basis.inv.tr_mul(&z));

        let bland = degenerate_run > 2 * n;
        if bland && perturbations < max_perturbations {
            perturbations += 1;
            perturbed = true;
            for j in 0..m {
                // distinct deterministic offsets in [1, 2) · perturbation
                let u = ((j as f64 + 1.0) * 0.618_033_988_749_895).fract();
                work[j] = b[j] + perturbation * (1.0 + u) / perturbations as f64;
            }
            (x, r) = residuals_of(&basis, &work);
            degenerate_run = 0;
            since_refactor = 0;
            continue;
        }
        let leaving = if bland {
            // Bland-style fallback against cycling
            (0..n)
                .filter(|&p| s_basic[p].abs() > 1.0 + dual_tol)
                .min_by_key(|&p| basis.rows[p])
        } else {
            (0..n)
                .filter(|&p| s_basic[p].abs() > 1.0 + dual_tol)
                .max_by(|&p, &q| s_basic[p].abs().total_cmp(&s_basic[q].abs()))
        };
        let Some(p) = leaving else {
            let mut signs = DVector::from_fn(m, |j, _| sign_of(&r, &hint, j));
            if perturbed {
                // Back to the true data on the same basis. Rows whose true
                // residual vanishes may keep the perturbed sign as their dual.
                let (x0, r0) = residuals_of(&basis, &bv);
                let slack = 10.0 * perturbation;
                for j in 0..m {
                    if !basis.is_basic[j] && r0[j].abs() > slack {
                        signs[j] = r0[j].signum();
                    }
                }
                let mut z0 = DVector::zeros(n);
                for j in 0..m {
                    if !basis.is_basic[j] {
                        z0.axpy(signs[j], &a.row(j).transpose(), 1.0);
                    }
                }
                let s0 = -(basis.inv.tr_mul(&z0));
                work.copy_from(&bv);
                perturbed = false;
                x = x0;
                r = r0;
                if s0.amax() > 1.0 + dual_tol {
                    degenerate_run = 0;
                    continue;
                }
            }
            let mut dual = DVector::zeros(m);
            for j in 0..m {
                if !basis.is_basic[j] {
                    dual[j] = signs[j];
                }
            }
            let z_final = a.tr_mul(&dual);
            let s_final = -(basis.inv.tr_mul(&z_final));
            for (q, &i) in basis.rows.iter().enumerate() {
                dual[i] = s_final[q];
            }
            let residuals = &bv - a * &x;
            let certificate = a
                .tr_mul(&dual)
                .amax()
                .max(dual.iter().map(|s| s.abs() - 1.0).fold(0.0, f64::max));
            return Ok(LadSolution {
                objective: residuals.iter().map(|v| v.abs()).sum(),
                x: x.as_slice().to_vec(),
                residuals: residuals.as_slice().to_vec(),
                dual: dual.as_slice().to_vec(),
                certificate,
                iterations,
                basis: basis.rows.clone(),
            });
        };
        if iterations >= opts.max_inner_iterations {
            let (x0, _) = residuals_of(&basis, &bv);
            return Err(SolverError::NotConverged {
                x: x0.as_slice().to_vec(),
                e: vec![],
                kkt_residual: s_basic.amax() - 1.0,
                iterations,
            });
        }
        iterations += 1;

        let tau = s_basic[p].signum();
        let delta = -tau * basis.inv.column(p);
        let ad = a * &delta;
        let dscale = ad.amax().max(1.0);
        breakpoints.clear();
        for j in 0..m {
            if basis.is_basic[j] {
                continue;
            }
            let d = ad[j];
            if d.abs() <= 1e-9 * dscale {
                continue;
            }
            if r[j].abs() <= zero_tol {
                // a zero residual moving to its hinted side costs nothing
                if hint[j] == 0.0 {
                    breakpoints.push((0.0, d.abs(), j));
                } else if -d * hint[j] < 0.0 {
                    breakpoints.push((0.0, 2.0 * d.abs(), j));
                }
            } else if r[j] / d > 0.0 {
                breakpoints.push((r[j] / d, 2.0 * d.abs(), j));
            }
        }
        breakpoints.sort_by(|u, v| u.0.total_cmp(&v.0).then(u.2.cmp(&v.2)));
        let mut slope = 1.0 - s_basic[p].abs();
        let mut entering = None;
        for &(t, w, j) in &breakpoints {
            slope += w;
            if slope >= 0.0 {
                entering = Some((t, j));
                break;
            }
        }
        let Some((step, j)) = entering else {
            return Err(SolverError::NotConverged {
                x: x.as_slice().to_vec(),
                e: vec![],
                kkt_residual: f64::INFINITY,
                iterations,
            });
        };
        degenerate_run = if step * dscale <= zero_tol { degenerate_run + 1 } else { 0 };

        x.axpy(step, &delta, 1.0);
        r.axpy(-step, &ad, 1.0);
        let k = basis.rows[p];
        r[j] = 0.0;
        r[k] = step * tau;
        hint[k] = tau;
        hint[j] = 0.0;

        // W' = W − (W e_p)(vᵀ W) / (vᵀ W e_p + 1), v = a_j − a_k
        let wp = basis.inv.column(p).into_owned();
        let denom = -tau * ad[j];
        let vt_w = (a.row(j) - a.row(k)) * &basis.inv;
        basis.inv -= (&wp * vt_w) / denom;
        basis.rows[p] = j;
        basis.is_basic[k] = false;
        basis.is_basic[j] = true;

        since_refactor += 1;
        if since_refactor >= refactor_every {
            since_refactor = 0;
            basis.refactor(a)?;
            (x, r) = residuals_of(&basis, &work);
        }
    }
}

// ---------------------------------------------------------------------------
// L1-regularized least squares

struct Problem<'a> {
    a: &'a DMatrix<f64>,
    b: DVector<f64>,
    gram: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    fn new(a: &'a DMatrix<f64>, b: &[f64]) -> Self {
        let b = DVector::from_column_slice(b);
        Problem {
            gram: a.tr_mul(a),
            a,
            b,
        }
    }

    fn m(&self) -> usize {
        self.a.nrows()
    }

    fn n(&self) -> usize {
        self.a.ncols()
    }

    fn z(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.b - self.a * x
    }
}

/// Per-row state of the Huber model: inside the quadratic zone, on the
/// linear branch with a sign, or unpenalized (`c_i = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Zone {
    Quadratic,
    Linear(i8),
    Free,
}

fn zones(z: &DVector<f64>, t: &[f64]) -> Vec<Zone> {
    z.iter()
        .zip(t)
        .map(|(&zi, &ti)| {
            if ti == 0.0 {
                Zone::Free
            } else if zi > ti {
                Zone::Linear(1)
            } else if zi < -ti {
                Zone::Linear(-1)
            } else {
                Zone::Quadratic
            }
        })
        .collect()
}

/// Whether `z` fits `zone` up to `slack`. A residual on a kink belongs to
/// both neighbouring zones, and roundoff may put it on either side.
fn zone_holds(z: &DVector<f64>, zone: &[Zone], t: &[f64], slack: f64) -> bool {
    zone.iter().enumerate().all(|(i, zi)| match *zi {
        Zone::Free => true,
        Zone::Quadratic => z[i].abs() <= t[i] + slack,
        Zone::Linear(s) => s as f64 * z[i] >= t[i] - slack,
    })
}

fn huber_value(z: &DVector<f64>, t: &[f64]) -> f64 {
    z.iter()
        .zip(t)
        .map(|(&zi, &ti)| {
            if zi.abs() <= ti {
                zi * zi
            } else {
                2.0 * ti * zi.abs() - ti * ti
            }
        })
        .sum()
}

/// Factor of `A_Nᵀ A_N` for the rows in the quadratic zone. The flag is
/// false when a ridge had to be added to make it positive definite.
fn reduced_factor(p: &Problem, zone: &[Zone]) -> (Cholesky<f64, Dyn>, bool) {
    let mut g = p.gram.clone();
    for (i, zi) in zone.iter().enumerate() {
        if *zi != Zone::Quadratic {
            let row = p.a.row(i);
            g.ger(-1.0, &row.transpose(), &row.transpose(), 1.0);
        }
    }
    let n = p.n();
    let scale = p.gram.diagonal().amax().max(f64::MIN_POSITIVE);
    if let Some(ch) = Cholesky::new(g.clone()) {
        let l = ch.l_dirty().diagonal();
        let (lo, hi) = l.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        if lo > RANK_TOLERANCE * hi && hi * hi > 1e-14 * scale {
            return (ch, true);
        }
    }
    let mut jitter = 1e-10 * scale;
    loop {
        let mut gr = g.clone();
        for k in 0..n {
            gr[(k, k)] += jitter;
        }
        if let Some(ch) = Cholesky::new(gr) {
            return (ch, false);
        }
        jitter *= 100.0;
    }
}

/// Solve `A_Nᵀ(b_N − A_N x) + A_Sᵀ w_S = 0` with two refinement sweeps
/// computed from `A` itself.
fn zone_solve(p: &Problem, zone: &[Zone], chol: &Cholesky<f64, Dyn>, rhs_b: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let gradient = |x: &DVector<f64>| {
        let ax = p.a * x;
        let mut v = DVector::zeros(p.m());
        for i in 0..p.m() {
            v[i] = if zone[i] == Zone::Quadratic { rhs_b[i] - ax[i] } else { w[i] };
        }
        p.a.tr_mul(&v)
    };
    let mut x = chol.solve(&gradient(&DVector::zeros(p.n())));
    for _ in 0..2 {
        let g = gradient(&x);
        x += chol.solve(&g);
    }
    x
}

fn psi(z: f64, t: f64) -> f64 {
    z.clamp(-t, t)
}

/// Minimizer over `α ≥ 0` of the convex piecewise quadratic
/// `Σ h_t(z_i − α q_i)`, by bracketing and bisection on its derivative.
fn line_search(z: &DVector<f64>, q: &DVector<f64>, t: &[f64]) -> f64 {
    let slope = |alpha: f64| -> f64 {
        -(0..z.len())
            .map(|i| q[i] * psi(z[i] - alpha * q[i], t[i]))
            .sum::<f64>()
    };
    if slope(0.0) >= 0.0 {
        return 0.0;
    }
    let mut hi = 1.0;
    let mut doublings = 0;
    while slope(hi) < 0.0 {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return hi;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Finite Newton method for `min_x Σ h_{t_i}(b_i − a_iᵀx)`; an exact step on
/// the final zone pattern makes the result exact.
fn huber_newton(p: &Problem, t: &[f64], mut x: DVector<f64>, budget: usize, iters: &mut usize) -> Result<DVector<f64>, SolverError> {
    let mut z = p.z(&x);
    let mut value = huber_value(&z, t);
    let mut stalls = 0;
    let mut restarted = false;
    loop {
        if *iters >= budget {
            return Err(SolverError::NotConverged {
                x: x.as_slice().to_vec(),
                e: vec![],
                kkt_residual: f64::INFINITY,
                iterations: *iters,
            });
        }
        *iters += 1;
        let zone = zones(&z, t);
        let (chol, exact) = reduced_factor(p, &zone);
        let d = if exact {
            let w = DVector::from_fn(p.m(), |i, _| match zone[i] {
                Zone::Linear(s) => t[i] * s as f64,
                _ => 0.0,
            });
            let x_new = zone_solve(p, &zone, &chol, &p.b, &w);
            let z_new = p.z(&x_new);
            if zone_holds(&z_new, &zone, t, 1e-12 * (1.0 + p.b.amax())) {
                return Ok(x_new);
            }
            x_new - &x
        } else {
            let grad = DVector::from_fn(p.m(), |i, _| psi(z[i], t[i]));
            chol.solve(&p.a.tr_mul(&grad))
        };
        let q = p.a * &d;
        let alpha = line_search(&z, &q, t);
        let x_next = &x + alpha * &d;
        let z_next = p.z(&x_next);
        let v_next = huber_value(&z_next, t);
        if v_next < value {
            stalls = 0;
            x = x_next;
            z = z_next;
            value = v_next;
        } else {
            stalls += 1;
            if stalls > 2 {
                // A warm start can park on a kink where every Newton step is
                // below roundoff; start once more from the least-squares fit.
                if restarted {
                    return Ok(x);
                }
                restarted = true;
                stalls = 0;
                x = least_squares(p.a, &p.b)?;
                z = p.z(&x);
                value = huber_value(&z, t);
                continue;
            }
            if alpha > 0.0 && v_next == value {
                x = x_next;
                z = z_next;
            }
        }
    }
}

fn split_error(z: &DVector<f64>, t: &[f64]) -> DVector<f64> {
    DVector::from_fn(z.len(), |i, _| {
        if t[i] == 0.0 {
            z[i]
        } else if z[i] > t[i] {
            z[i] - t[i]
        } else if z[i] < -t[i] {
            z[i] + t[i]
        } else {
            0.0
        }
    })
}

fn finish(
    a: &DMatrix<f64>,
    b: &[f64],
    x: &DVector<f64>,
    e: &DVector<f64>,
    lambda: f64,
    c: &[f64],
    opts: &SolverOptions,
    iterations: usize,
) -> SparseSolution {
    let (xs, es) = (x.as_slice(), e.as_slice());
    SparseSolution {
        x_hat: xs.to_vec(),
        e_hat: es.to_vec(),
        objective: l1ls_objective(a, b, xs, es, lambda, c, opts.residual_form),
        kkt_residual: l1ls_kkt_residual(a, b, xs, es, lambda, c, opts.residual_form),
        kkt_floor: l1ls_kkt_floor(a, b, xs, es, opts.residual_form),
        inner_iterations: iterations,
    }
}

/// Exact solution of the unsquared problem on a fixed support and sign
/// pattern, or `None` if the pattern admits no consistent residual norm. The
/// caller checks optimality.
fn polish_unsquared(p: &Problem, zone: &[Zone], lambda: f64, c: &[f64]) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let (chol, _) = reduced_factor(p, zone);
    let m = p.m();
    let zero = DVector::zeros(m);
    let w1 = DVector::from_fn(m, |i, _| match zone[i] {
        Zone::Linear(s) => lambda * c[i] * s as f64,
        _ => 0.0,
    });
    let x0 = zone_solve(p, zone, &chol, &p.b, &zero);
    let x1 = zone_solve(p, zone, &chol, &zero, &w1);
    let z0 = p.z(&x0);
    let q = p.a * &x1;
    let (mut pp, mut pq, mut qq, mut kappa) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..m {
        match zone[i] {
            Zone::Quadratic => {
                pp += z0[i] * z0[i];
                pq += z0[i] * q[i];
                qq += q[i] * q[i];
            }
            Zone::Linear(_) => kappa += (lambda * c[i]).powi(2),
            Zone::Free => {}
        }
    }
    // ρ² = ‖p − ρq‖² + κρ²
    let qa = 1.0 - kappa - qq;
    if !(qa > 0.0) {
        return None;
    }
    let disc = (4.0 * pq * pq + 4.0 * qa * pp).max(0.0);
    // no positive root: offer the ρ → 0 limit, which is optimal when the
    // zone's multipliers already fit in the unit ball
    let rho = ((-2.0 * pq + disc.sqrt()) / (2.0 * qa)).max(0.0);
    if !rho.is_finite() {
        return None;
    }
    let x = x0 + rho * x1;
    let z = p.z(&x);
    let e = DVector::from_fn(m, |i, _| match zone[i] {
        Zone::Quadratic => 0.0,
        Zone::Linear(s) => z[i] - rho * lambda * c[i] * s as f64,
        Zone::Free => z[i],
    });
    Some((x, e, rho))
}

/// `min ρ(b − Ax − e) + λ Σ c_i|e_i|`; `c = 1` gives the plain L1-relaxed
/// problem, `c_i = 0` leaves `e_i` unpenalized.
pub fn solve_weighted_l1ls(
    a: &DMatrix<f64>,
    b: &[f64],
    lambda: f64,
    c: &[f64],
    opts: &SolverOptions,
) -> Result<SparseSolution, SolverError> {
    check_dims(a, b)?;
    if !(lambda > 0.0) {
        return Err(SolverError::InvalidLambda(lambda));
    }
    if c.len() != b.len() {
        return Err(SolverError::DimensionMismatch(format!(
            "{} weights for {} rows",
            c.len(),
            b.len()
        )));
    }
    let p = Problem::new(a, b);
    let x_ls = least_squares(a, &p.b)?;
    let budget = opts.max_inner_iterations;
    let mut iters = 0;
    match opts.residual_form {
        ResidualForm::L2Squared => {
            let t: Vec<f64> = c.iter().map(|ci| lambda * ci / 2.0).collect();
            let x = huber_newton(&p, &t, x_ls, budget, &mut iters)?;
            let e = split_error(&p.z(&x), &t);
            let sol = finish(a, b, &x, &e, lambda, c, opts, iters);
            if sol.certified(opts.tol) {
                Ok(sol)
            } else {
                Err(SolverError::NotConverged {
                    x: sol.x_hat,
                    e: sol.e_hat,
                    kkt_residual: sol.kkt_residual,
                    iterations: iters,
                })
            }
        }
        ResidualForm::L2 => {
            let bnorm = p.b.norm();
            let free: Vec<f64> = c.iter().map(|&ci| if ci == 0.0 { 0.0 } else { f64::INFINITY }).collect();
            // consistent data: the residual can be driven to zero with e = 0
            let mut x = x_ls;
            if c.iter().any(|&ci| ci == 0.0) {
                x = huber_newton(&p, &free, x, budget, &mut iters)?;
            }
            let mut z = p.z(&x);
            let mut rho = split_residual_norm(&z, &free);
            if rho <= 1e-13 * bnorm.max(1e-300) || bnorm == 0.0 {
                let e = split_error(&z, &free);
                let sol = finish(a, b, &x, &e, lambda, c, opts, iters);
                if sol.certified(opts.tol) {
                    return Ok(sol);
                }
            }
            if let Some((x0, e0)) = unsquared_zero_residual(a, b, lambda, c, opts)? {
                let sol = finish(a, b, &x0, &e0, lambda, c, opts, iters);
                if sol.certified(opts.tol) {
                    return Ok(sol);
                }
            }
            // The optimal ρ = ‖r‖ solves g(ρ) = ‖clip(z(ρ), ρλc)‖ / ρ = 1, where
            // z(ρ) comes from the Huber fit with thresholds ρλc. Proposals from the
            // exact zone polish or the fixed point are kept inside a bracket
            // lo < ρ* < hi with g(lo) > 1 > g(hi); otherwise bisect in log scale.
            let mut best: Option<SparseSolution> = None;
            let mut since_best = 0;
            let (mut lo, mut hi): (Option<f64>, Option<f64>) = (None, None);
            let mut step = 0usize;
            // below this g(ρ) is dominated by roundoff in z
            let floor = 1e-12 * bnorm;
            loop {
                step += 1;
                let t: Vec<f64> = c.iter().map(|ci| rho * lambda * ci).collect();
                x = huber_newton(&p, &t, x, budget, &mut iters)?;
                z = p.z(&x);
                let zone = zones(&z, &t);
                let ratio = split_residual_norm(&z, &t) / rho;
                let e = split_error(&z, &t);
                let mut candidates = vec![finish(a, b, &x, &e, lambda, c, opts, iters)];
                let polished = polish_unsquared(&p, &zone, lambda, c);
                if let Some((xp, ep, _)) = &polished {
                    candidates.push(finish(a, b, xp, ep, lambda, c, opts, iters));
                }
                for sol in candidates {
                    if sol.certified(opts.tol) {
                        return Ok(sol);
                    }
                    if best.as_ref().map_or(true, |s| sol.kkt_residual < s.kkt_residual) {
                        best = Some(sol);
                        since_best = 0;
                    }
                }
                since_best += 1;
                if ratio > 1.0 {
                    lo = Some(lo.map_or(rho, |l: f64| l.max(rho)));
                } else {
                    hi = Some(hi.map_or(rho, |h: f64| h.min(rho)));
                }
                let inside = |v: f64| v.is_finite() && v > lo.unwrap_or(0.0).max(floor) && v < hi.unwrap_or(f64::INFINITY);
                let bisect = match (lo, hi) {
                    (Some(l), Some(h)) => (l * h).sqrt(),
                    (None, Some(h)) => h / 10.0,
                    (Some(l), None) => l * 10.0,
                    (None, None) => rho,
                };
                let forced = lo.is_some() && hi.is_some() && step % 3 == 0;
                // the fixed point crawls when g ≈ 1; without a bracket on one
                // side, move at least by a factor of two towards it
                let fixed = match (lo, hi) {
                    (None, _) if ratio <= 1.0 => rho * ratio.min(0.5),
                    (_, None) if ratio > 1.0 => rho * ratio.max(2.0),
                    _ => rho * ratio,
                };
                let rho_next = match polished.as_ref().map(|(_, _, rp)| *rp) {
                    Some(rp) if !forced && inside(rp) => rp,
                    _ if !forced && inside(fixed) => fixed,
                    _ => bisect.max(floor),
                };
                let collapsed = matches!((lo, hi), (Some(l), Some(h)) if h <= l * (1.0 + 1e-14))
                    || hi.is_some_and(|h| h <= floor * (1.0 + 1e-14));
                if iters >= budget || since_best > 200 || collapsed || !(rho_next > 0.0) {
                    let best = best.expect("at least one iterate");
                    return Err(SolverError::NotConverged {
                        kkt_residual: best.kkt_residual,
                        x: best.x_hat,
                        e: best.e_hat,
                        iterations: iters,
                    });
                }
                rho = rho_next;
            }
        }
    }
}

/// For small `λ` the unsquared optimum has zero residual and `x` is the
/// weighted least-absolute-deviation fit. Returns it when its dual certifies
/// optimality.
fn unsquared_zero_residual(
    a: &DMatrix<f64>,
    b: &[f64],
    lambda: f64,
    c: &[f64],
    opts: &SolverOptions,
) -> Result<Option<(DVector<f64>, DVector<f64>)>, SolverError> {
    let n = a.ncols();
    let rows: Vec<usize> = (0..b.len()).filter(|&i| c[i] > 0.0).collect();
    if rows.len() < n || lambda * lambda * (rows.len() - n) as f64 > 1.0 {
        return Ok(None);
    }
    let sub = DMatrix::from_fn(rows.len(), n, |k, j| c[rows[k]] * a[(rows[k], j)]);
    let sb: Vec<f64> = rows.iter().map(|&i| c[i] * b[i]).collect();
    let lad = match solve_lad(&sub, &sb, opts) {
        Ok(lad) => lad,
        Err(SolverError::Singular { .. }) => return Ok(None),
        Err(other) => return Err(other),
    };
    let unorm = lambda * lad.dual.iter().map(|s| s * s).sum::<f64>().sqrt();
    if unorm > 1.0 {
        return Ok(None);
    }
    let x = DVector::from_column_slice(&lad.x);
    let ax = a * &x;
    let mut e = DVector::from_fn(b.len(), |i, _| b[i] - ax[i]);
    for &k in &lad.basis {
        e[rows[k]] = 0.0;
    }
    // degenerate rows: the residual is roundoff and its dual may sit anywhere in the box
    let tiny = 1e-12 * (1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    for (k, &i) in rows.iter().enumerate() {
        if lad.dual[k] == 0.0 || e[i].abs() <= tiny {
            e[i] = 0.0;
        }
    }
    Ok(Some((x, e)))
}

/// `‖clip(z, t)‖₂`: the residual left once `e` has absorbed the excess.
fn split_residual_norm(z: &DVector<f64>, t: &[f64]) -> f64 {
    z.iter()
        .zip(t)
        .map(|(&zi, &ti)| zi.clamp(-ti, ti).powi(2))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// L0 oracle

/// Exact `min ‖b − Ax − e‖₂ s.t. ‖e‖₀ ≤ k` by enumerating supports. Ties go
/// to the smaller support, then to the lexicographically first one.
pub fn solve_l0_oracle(a: &DMatrix<f64>, b: &[f64], k: usize) -> Result<L0Solution, SolverError> {
    check_dims(a, b)?;
    let (m, n) = a.shape();
    if m > 20 || k > 3 {
        return Err(SolverError::OracleTooLarge { rows: m, k });
    }
    let mut best: Option<L0Solution> = None;
    for size in 0..=k.min(m) {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let keep: Vec<usize> = (0..m).filter(|i| !combo.contains(i)).collect();
            if keep.len() >= n {
                let sub = DMatrix::from_fn(keep.len(), n, |r, j| a[(keep[r], j)]);
                let rhs = DVector::from_fn(keep.len(), |r, _| b[keep[r]]);
                if let Ok(x) = least_squares(&sub, &rhs) {
                    let fitted = a * &x;
                    let mut e = vec![0.0; m];
                    for &i in &combo {
                        e[i] = b[i] - fitted[i];
                    }
                    let objective = keep
                        .iter()
                        .map(|&i| (b[i] - fitted[i]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let better = match &best {
                        None => true,
                        Some(cur) => objective < cur.objective - 1e-12 * (1.0 + cur.objective),
                    };
                    if better {
                        best = Some(L0Solution {
                            x: x.as_slice().to_vec(),
                            e,
                            support: combo.clone(),
                            objective,
                        });
                    }
                }
            }
            if !next_combination(&mut combo, m) {
                break;
            }
        }
    }
    best.ok_or(SolverError::Singular { ratio: 0.0 })
}

fn next_combination(combo: &mut [usize], m: usize) -> bool {
    let k = combo.len();
    for pos in (0..k).rev() {
        if combo[pos] < m - k + pos {
            combo[pos] += 1;
            for q in pos + 1..k {
                combo[q] = combo[q - 1] + 1;
            }
            return true;
        }
    }
    false
}
