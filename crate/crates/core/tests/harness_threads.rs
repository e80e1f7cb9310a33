//! Kept apart from the other harness tests: the worker count is read from a
//! process-wide environment variable.
use gridse::harness::*;
use gridse::meas::Family;
use gridse::scenario::ScenarioConfig;

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut spec = ExperimentSpec::new(format!("{}/../../data/ieee30.json", env!("CARGO_MANIFEST_DIR")), Family::Scada);
    spec.lambda_grid = vec![0.08, 1.0];
    spec.bad_rate_grid = vec![0.06];
    spec.scenario = ScenarioConfig { trials: 6, ..ScenarioConfig::default() };
    let run = |threads: &str| {
        std::env::set_var(THREADS_ENV, threads);
        let rows = run_experiment(&spec).unwrap();
        rows.into_iter()
            .map(|r| (r.model, r.lambda.to_bits(), r.trial, r.converged, r.error_vs_truth.map(f64::to_bits), r.gn_iterations, r.stages))
            .collect::<Vec<_>>()
    };
    let serial = run("1");
    let parallel = run("4");
    assert_eq!(serial, parallel);
    std::env::set_var(THREADS_ENV, "zero");
    assert!(matches!(run_experiment(&spec), Err(HarnessError::Spec(_))));
    std::env::remove_var(THREADS_ENV);
}
