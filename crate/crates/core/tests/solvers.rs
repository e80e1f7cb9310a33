use gridse::solvers::{
    l1ls_kkt_floor, l1ls_kkt_residual, l1ls_objective, least_squares, solve_l0_oracle, solve_lad, solve_weighted_l1ls, ResidualForm,
    SolverOptions,
};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn opts(form: ResidualForm) -> SolverOptions {
    SolverOptions {
        residual_form: form,
        ..SolverOptions::default()
    }
}

/// LAD through the nonnegative split `Ax + a − b' = b`, `a, b' ≥ 0`.
fn lad_by_lp(a: &DMatrix<f64>, b: &[f64]) -> (Vec<f64>, f64) {
    let (m, n) = a.shape();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let xs: Vec<_> = (0..n)
        .map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    let pos: Vec<_> = (0..m).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    let neg: Vec<_> = (0..m).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    for i in 0..m {
        let mut terms: Vec<_> = (0..n).map(|j| (xs[j], a[(i, j)])).collect();
        terms.push((pos[i], 1.0));
        terms.push((neg[i], -1.0));
        lp.add_constraint(&terms[..], ComparisonOp::Eq, b[i]);
    }
    let sol = lp.solve().expect("lp solvable");
    (xs.iter().map(|v| sol[*v]).collect(), sol.objective())
}

fn random_instance(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (a, x0)
}

#[test]
fn lad_matches_lp_with_outlier() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (a, x0) = random_instance(&mut rng, 10, 3);
        let sigma = 0.01;
        let mut b = &a * &x0;
        for v in b.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let k = rng.random_range(0..10);
        b[k] += 50.0 * sigma;
        let sol = solve_lad(&a, b.as_slice(), &SolverOptions::default()).unwrap();
        let (x_lp, obj_lp) = lad_by_lp(&a, b.as_slice());
        assert!((sol.objective - obj_lp).abs() <= 1e-6, "{} vs {}", sol.objective, obj_lp);
        for (u, v) in sol.x.iter().zip(&x_lp) {
            assert!((u - v).abs() <= 1e-6, "{u} vs {v}");
        }
        assert!(sol.certificate <= 1e-9);
    }
}

#[test]
fn lad_matches_lp_on_larger_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (m, n) in [(60, 8), (120, 20)] {
        let (a, x0) = random_instance(&mut rng, m, n);
        let mut b = &a * &x0;
        for (i, v) in b.iter_mut().enumerate() {
            *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
            if i % 9 == 4 {
                *v += 2.0;
            }
        }
        let sol = solve_lad(&a, b.as_slice(), &SolverOptions::default()).unwrap();
        let (_, obj_lp) = lad_by_lp(&a, b.as_slice());
        assert!((sol.objective - obj_lp).abs() <= 1e-6 * (1.0 + obj_lp));
        assert!(sol.certificate <= 1e-9);
    }
}

/// Coarse-to-fine grid over `(x, e1, e2)` for the 2×1 instance.
fn grid_search_2x1(b: [f64; 2], lambda: f64, form: ResidualForm) -> [f64; 3] {
    let f = |p: [f64; 3]| {
        let r = [b[0] - p[0] - p[1], b[1] - p[0] - p[2]];
        let rr = r[0] * r[0] + r[1] * r[1];
        let fit = match form {
            ResidualForm::L2Squared => rr,
            ResidualForm::L2 => rr.sqrt(),
        };
        fit + lambda * (p[1].abs() + p[2].abs())
    };
    let mut center = [5.0, 0.0, 0.0];
    let mut half: f64 = 12.0;
    let mut step: f64 = 0.25;
    while step >= 1e-3 {
        let k = (half / step).round() as i64;
        let mut best = (f64::INFINITY, center);
        for i in -k..=k {
            for j in -k..=k {
                for l in -k..=k {
                    let p = [
                        center[0] + i as f64 * step,
                        center[1] + j as f64 * step,
                        center[2] + l as f64 * step,
                    ];
                    let v = f(p);
                    if v < best.0 {
                        best = (v, p);
                    }
                }
            }
        }
        center = best.1;
        half = 4.0 * step;
        step /= 4.0;
    }
    center
}

#[test]
fn two_row_instance_matches_grid_search() {
    let a = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
    let b = [0.0, 10.0];
    let c = [1.0, 1.0];
    for form in [ResidualForm::L2Squared, ResidualForm::L2] {
        let sol = solve_weighted_l1ls(&a, &b, 1.0, &c, &opts(form)).unwrap();
        let g = grid_search_2x1(b, 1.0, form);
        let grid_value = l1ls_objective(&a, &b, &g[..1], &g[1..], 1.0, &c, form);
        assert!(sol.objective <= grid_value + 1e-12);
        assert!(grid_value - sol.objective <= 1e-5, "{form:?}: {} vs {}", sol.objective, grid_value);
    }
    // squared form: every x in [0.5, 9.5] with e = (−x + 0.5, 9.5 − x) is optimal
    let sol = solve_weighted_l1ls(&a, &b, 1.0, &c, &opts(ResidualForm::L2Squared)).unwrap();
    let x = sol.x_hat[0];
    assert!((0.5..=9.5).contains(&x));
    assert!((sol.e_hat[0] - (0.5 - x)).abs() < 1e-12 && (sol.e_hat[1] - (9.5 - x)).abs() < 1e-12);
    // unsquared form: the minimizer is unique
    let sol = solve_weighted_l1ls(&a, &b, 1.0, &c, &opts(ResidualForm::L2)).unwrap();
    let g = grid_search_2x1(b, 1.0, ResidualForm::L2);
    for (u, v) in [sol.x_hat[0], sol.e_hat[0], sol.e_hat[1]].iter().zip(g) {
        assert!((u - v).abs() <= 2e-3, "{u} vs {v}");
    }
}

#[test]
fn large_lambda_deactivates_error_term() {
    let a = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
    let b = DVector::from_vec(vec![0.4, 1.1, 0.7]);
    let x_ls = least_squares(&a, &b).unwrap();
    let r_ls = &b - &a * &x_ls;
    let lambda = 2.0 * r_ls.amax();
    let sol = solve_weighted_l1ls(&a, b.as_slice(), lambda, &[1.0; 3], &opts(ResidualForm::L2Squared)).unwrap();
    assert!(sol.e_hat.iter().all(|e| *e == 0.0));
    assert!((sol.x_hat[0] - x_ls[0]).abs() < 1e-12);

    // dense scan over x confirms the least-squares point minimizes with e eliminated
    let huber = |x: f64| {
        (0..3)
            .map(|i| {
                let z: f64 = b[i] - a[(i, 0)] * x;
                let t = lambda / 2.0;
                if z.abs() <= t {
                    z * z
                } else {
                    2.0 * t * z.abs() - t * t
                }
            })
            .sum::<f64>()
    };
    let mut best = (f64::INFINITY, 0.0);
    for k in -20_000..=20_000 {
        let x = k as f64 * 1e-4;
        let v = huber(x);
        if v < best.0 {
            best = (v, x);
        }
    }
    assert!((best.1 - x_ls[0]).abs() <= 1e-4);
}

#[test]
fn unpenalized_row_fits_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, x0) = random_instance(&mut rng, 15, 3);
    let mut b = &a * &x0;
    for v in b.iter_mut() {
        *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
    }
    b[6] += 1.5;
    for form in [ResidualForm::L2Squared, ResidualForm::L2] {
        let mut c = vec![1.0; 15];
        let full = solve_weighted_l1ls(&a, b.as_slice(), 0.05, &c, &opts(form)).unwrap();
        c[6] = 0.0;
        let sol = solve_weighted_l1ls(&a, b.as_slice(), 0.05, &c, &opts(form)).unwrap();
        let ax = &a * DVector::from_column_slice(&sol.x_hat);
        let r6 = b[6] - ax[6] - sol.e_hat[6];
        assert!(r6.abs() <= 1e-8, "{r6}");
        let ax_full = &a * DVector::from_column_slice(&full.x_hat);
        assert!(r6.abs() <= (b[6] - ax_full[6] - full.e_hat[6]).abs());
    }
}

#[test]
fn outlier_support_recovered_on_small_problem() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (a, x0) = random_instance(&mut rng, 12, 4);
    let mut b = &a * &x0;
    for v in b.iter_mut() {
        *v += 1e-4 * rng.sample::<f64, _>(StandardNormal);
    }
    b[9] += 40e-4;
    let oracle = solve_l0_oracle(&a, b.as_slice(), 1).unwrap();
    assert_eq!(oracle.support, vec![9]);
    let sol = solve_weighted_l1ls(&a, b.as_slice(), 0.1, &[1.0; 12], &SolverOptions::default()).unwrap();
    let support: Vec<usize> = (0..12).filter(|&i| sol.e_hat[i].abs() > 1e-3).collect();
    assert_eq!(support, vec![9]);
}

fn instance_strategy() -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>, Vec<f64>, f64)> {
    (6usize..24, 1usize..5, any::<u64>(), 0.01f64..2.0).prop_map(|(m, n, seed, lambda)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b: Vec<f64> = (0..m)
            .map(|_| {
                let base: f64 = rng.sample(StandardNormal);
                if rng.random_bool(0.15) {
                    base + rng.random_range(-20.0..20.0)
                } else {
                    base
                }
            })
            .collect();
        let c: Vec<f64> = (0..m).map(|i| if i > n && rng.random_bool(0.1) { 0.0 } else { 1.0 }).collect();
        (a, b, c, lambda)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l1ls_certificate_and_objective((a, b, c, lambda) in instance_strategy()) {
        for form in [ResidualForm::L2Squared, ResidualForm::L2] {
            let o = opts(form);
            let sol = solve_weighted_l1ls(&a, &b, lambda, &c, &o).unwrap();
            prop_assert!(sol.certified(o.tol));
            let kkt = l1ls_kkt_residual(&a, &b, &sol.x_hat, &sol.e_hat, lambda, &c, form);
            let floor = l1ls_kkt_floor(&a, &b, &sol.x_hat, &sol.e_hat, form);
            prop_assert!(kkt <= o.tol.max(floor));
            let recomputed = l1ls_objective(&a, &b, &sol.x_hat, &sol.e_hat, lambda, &c, form);
            prop_assert!((recomputed - sol.objective).abs() <= 1e-10 * (1.0 + recomputed));
        }
    }

    #[test]
    fn l1ls_no_descent_direction((a, b, c, lambda) in instance_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for form in [ResidualForm::L2Squared, ResidualForm::L2] {
            let o = opts(form);
            let sol = solve_weighted_l1ls(&a, &b, lambda, &c, &o).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = sol
                    .x_hat
                    .iter()
                    .map(|v| v + 1e-4 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let v = l1ls_objective(&a, &b, &x, &sol.e_hat, lambda, &c, form);
                prop_assert!(v >= sol.objective - o.tol);
            }
        }
    }

    #[test]
    fn l0_oracle_dominates_sparse_solutions((a, b, _c, lambda) in instance_strategy()) {
        let m = a.nrows();
        prop_assume!(m <= 20);
        let ones = vec![1.0; m];
        for form in [ResidualForm::L2Squared, ResidualForm::L2] {
            let sol = solve_weighted_l1ls(&a, &b, lambda, &ones, &opts(form)).unwrap();
            let k = sol.e_hat.iter().filter(|e| **e != 0.0).count();
            if k > 3 {
                continue;
            }
            let ax = &a * DVector::from_column_slice(&sol.x_hat);
            let fit = (0..m).map(|i| (b[i] - ax[i] - sol.e_hat[i]).powi(2)).sum::<f64>().sqrt();
            let oracle = solve_l0_oracle(&a, &b, k).unwrap();
            prop_assert!(oracle.objective <= fit + 1e-10);
        }
    }

    #[test]
    fn lad_certificate_holds((a, b, _c, _l) in instance_strategy()) {
        let sol = solve_lad(&a, &b, &SolverOptions::default()).unwrap();
        prop_assert!(sol.certificate <= 1e-9);
        for (s, r) in sol.dual.iter().zip(&sol.residuals) {
            prop_assert!(s.abs() <= 1.0 + 1e-9);
            if r.abs() > 1e-9 {
                prop_assert!((s - r.signum()).abs() <= 1e-12);
            }
        }
        let (_, obj_lp) = lad_by_lp(&a, &b);
        prop_assert!((sol.objective - obj_lp).abs() <= 1e-6 * (1.0 + obj_lp));
    }
}
