//! Test problems and numerical experiments.

pub mod experiments;
pub mod fit;
pub mod problem;
pub mod report;

pub use experiments::{
    check_rate_qualification, run_consistency_check, run_convergence_experiment, run_rate_experiment,
    run_rate_experiment_with, ConsistencyReport, ConvergenceConfig, ConvergenceTable, ProjectorChoice,
    RateExperimentConfig, RateReport,
};
pub use fit::{fit_loglog_slope, SlopeFit};
pub use problem::{add_noise, make_problem, phantoms, ProblemKind, ProblemSpec};
