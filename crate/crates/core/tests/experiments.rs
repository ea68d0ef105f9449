use std::sync::Arc;

use nullspace_reg::harness::experiments::{
    check_rate_qualification, run_consistency_check, run_consistency_check_file, run_convergence_experiment,
    run_rate_experiment, run_rate_experiment_with, source_scale, train_on_phantoms, ProjectorChoice,
    RateExperimentConfig,
};
use nullspace_reg::harness::problem::{make_problem, ProblemSpec};
use nullspace_reg::network::NetworkDocument;
use nullspace_reg::regpipeline::approx_projector;
use nullspace_reg::{
    Activation, DenseOperator, Error, FeedForwardNet, FilterSpec, MRegularizer, NullSpaceNetwork, ParamChoice,
    ProjectorMode, TrainConfig, TrainMode,
};

fn small_problem() -> ProblemSpec {
    ProblemSpec::random(12, 20, 8, 3)
}

fn small_trained(op: &DenseOperator) -> FeedForwardNet {
    let config = TrainConfig {
        learning_rate: 0.1,
        epochs: 200,
        reg_weight: 0.0,
        seed: 1,
        mode: TrainMode::ExactProjector,
    };
    train_on_phantoms(op, 8, Some(source_scale(op, 0.5, 1.0)), &config).unwrap().0
}

fn config(filter: FilterSpec, mu: f64) -> RateExperimentConfig {
    let mut c = RateExperimentConfig::new(small_problem(), filter, mu);
    c.trials_per_delta = 6;
    c
}

#[test]
fn tsvd_projector_below_spectrum_reproduces_exact_mode() {
    let op = Arc::new(make_problem(&small_problem()).unwrap());
    let net = small_trained(&op);
    let exact = run_rate_experiment_with(&config(FilterSpec::tsvd(), 0.5), Arc::clone(&op), net.clone()).unwrap();
    let mut c = config(FilterSpec::tsvd(), 0.5);
    // φ(α) = α^5 ≤ 1e-5 < σ_min² = 1e-4 on the default grid
    c.projector_mode = ProjectorChoice::Approximate {
        filter: FilterSpec::tsvd(),
        phi_exponent: 5.0,
    };
    let approx = run_rate_experiment_with(&c, op, net).unwrap();
    assert_eq!(approx.deviation_pass, Some(true));
    for (a, b) in exact.rows.iter().zip(&approx.rows) {
        assert!(b.deviation.unwrap() <= 1e-10);
        assert!((a.worst_error - b.worst_error).abs() <= 1e-10 * a.worst_error);
        assert!((a.mean_error - b.mean_error).abs() <= 1e-10 * a.mean_error);
    }
    assert!((exact.fitted_slope - approx.fitted_slope).abs() <= 1e-8);
    assert_eq!(exact.pass, approx.pass);
}

#[test]
fn source_radius_only_moves_the_constant() {
    let op = Arc::new(make_problem(&small_problem()).unwrap());
    let net = small_trained(&op);
    let base = run_rate_experiment_with(&config(FilterSpec::tikhonov(), 1.0), Arc::clone(&op), net.clone()).unwrap();
    let mut c = config(FilterSpec::tikhonov(), 1.0);
    c.source_radius_rho = 10.0;
    c.delta_grid = c.delta_grid.iter().map(|d| d * 10.0).collect();
    let scaled = run_rate_experiment_with(&c, op, net).unwrap();
    assert!((base.fitted_slope - scaled.fitted_slope).abs() <= 0.1, "{} {}", base.fitted_slope, scaled.fitted_slope);
}

#[test]
fn rate_experiment_is_schedule_invariant() {
    let c = config(FilterSpec::tsvd(), 0.5);
    let parallel = run_rate_experiment(&c).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let serial = pool.install(|| run_rate_experiment(&c).unwrap());
    assert_eq!(parallel, serial);
    assert_eq!(parallel, run_rate_experiment(&c).unwrap());
}

#[test]
fn rate_constant_stays_within_an_order_of_magnitude() {
    let op = Arc::new(make_problem(&small_problem()).unwrap());
    let net = small_trained(&op);
    for (f, mu) in [(FilterSpec::tsvd(), 0.5), (FilterSpec::tikhonov(), 1.0)] {
        let r = run_rate_experiment_with(&config(f, mu), Arc::clone(&op), net.clone()).unwrap();
        assert!(r.rate_constant_spread < 10.0, "{}", r.rate_constant_spread);
    }
}

#[test]
fn invalid_grids_are_config_errors() {
    let mut c = config(FilterSpec::tsvd(), 0.5);
    c.delta_grid = vec![1e-1, 1e-2, 1e-3, 1e-4];
    assert!(matches!(run_rate_experiment(&c), Err(Error::Config(_))));
    c.delta_grid = vec![1e-1, 1e-2, 1e-2, 1e-3, 1e-4];
    assert!(matches!(run_rate_experiment(&c), Err(Error::Config(_))));
    c.delta_grid = vec![1e-1, 5e-2, 2e-2, 1e-2, 5e-3];
    assert!(matches!(run_rate_experiment(&c), Err(Error::Config(_))));
    c.delta_grid = vec![1e-1, 1e-2, 1e-3, 1e-4, -1.0];
    assert!(matches!(run_rate_experiment(&c), Err(Error::Config(_))));
    let mut c = config(FilterSpec::tsvd(), 0.5);
    c.trials_per_delta = 0;
    assert!(matches!(run_rate_experiment(&c), Err(Error::Config(_))));
}

#[test]
fn tikhonov_beyond_qualification_is_rejected_by_name() {
    let err = run_rate_experiment(&config(FilterSpec::tikhonov(), 2.0)).unwrap_err();
    match err {
        Error::Config(m) => assert!(m.contains("c1_bounded") && m.contains("tikhonov"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(check_rate_qualification(&FilterSpec::tsvd(), 2.0, 1.0).is_ok());
}

#[test]
fn convergence_with_zero_network_targets_the_pseudoinverse() {
    let op = Arc::new(make_problem(&small_problem()).unwrap());
    let phi = NullSpaceNetwork::identity(Arc::clone(&op)).unwrap();
    let reg = MRegularizer::new(FilterSpec::tikhonov(), Arc::clone(&op), phi).unwrap();
    let choice = ParamChoice::new(0.5, 1.0, 1.0).unwrap();
    let grid = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
    let table = run_convergence_experiment(&reg, choice, &grid, 1, 9).unwrap();
    assert!(table.pass, "{table:?}");
    assert_eq!(table, run_convergence_experiment(&reg, choice, &grid, 1, 9).unwrap());
    assert!(run_convergence_experiment(&reg, choice, &[1e-2], 1, 9).is_err());
    assert!(run_convergence_experiment(&reg, choice, &[1e-3, 1e-2], 1, 9).is_err());
}

#[test]
fn consistency_of_zero_and_trained_networks() {
    let op = Arc::new(make_problem(&small_problem()).unwrap());
    let zero = run_consistency_check(&NullSpaceNetwork::identity(Arc::clone(&op)).unwrap(), 50, 0).unwrap();
    assert_eq!(zero.max_violation, 0.0);
    let net = small_trained(&op);
    let exact = NullSpaceNetwork::exact(net.clone(), Arc::clone(&op)).unwrap();
    let r = run_consistency_check(&exact, 200, 0).unwrap();
    assert!(r.pass && r.exact_mode, "{r:?}");

    // Tikhonov projector: violation is of the order of the projector deviation
    let phi_alpha = 1e-2;
    let q = approx_projector(Arc::clone(&op), FilterSpec::tikhonov(), phi_alpha).unwrap();
    let mode = ProjectorMode::Approximate {
        filter: FilterSpec::tikhonov(),
        phi_alpha,
    };
    let r = run_consistency_check(&NullSpaceNetwork::new(net, op, mode).unwrap(), 200, 0).unwrap();
    assert!(!r.exact_mode && !r.pass);
    assert!(r.max_violation <= q.deviation().unwrap(), "{} {:?}", r.max_violation, q.deviation());
}

#[test]
fn consistency_file_must_match_the_problem() {
    let op = make_problem(&small_problem()).unwrap();
    let net = small_trained(&op);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    NetworkDocument::from_net(&net, Some(op.content_hash())).save(&path).unwrap();
    let ok = run_consistency_check_file(&small_problem(), &path, ProjectorMode::Exact, 100, 0).unwrap();
    assert!(ok.pass);
    let other = ProblemSpec::random(12, 20, 8, 4);
    let err = run_consistency_check_file(&other, &path, ProjectorMode::Exact, 100, 0).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err:?}");
}

#[test]
fn deconvolution_problem_runs_end_to_end() {
    let spec = ProblemSpec::deconvolution(64, 2.0, 32, 5);
    let op = make_problem(&spec).unwrap();
    assert!(op.numerical_rank() <= 32);
    let zero = FeedForwardNet::zeros(&[64, 64], vec![Activation::Identity]).unwrap();
    let mut c = RateExperimentConfig::new(spec, FilterSpec::tsvd(), 0.5);
    c.trials_per_delta = 4;
    let r = run_rate_experiment_with(&c, Arc::new(op), zero).unwrap();
    assert_eq!(r.rows.len(), 7);
    assert!(r.fitted_slope.is_finite());
}
