//! Convergence, rate and data-consistency experiments.

use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{linear_grid, log_grid, verify_rate_conditions, FilterSpec, RateConditionReport};
use crate::harness::fit::fit_loglog_slope;
use crate::harness::problem::{add_noise_with, gaussian_direction, make_problem, phantoms, piecewise_constant, ProblemSpec};
use crate::linop::DenseOperator;
use crate::network::{Activation, FeedForwardNet, NetworkDocument, NullSpaceNetwork, ProjectorMode};
use crate::regpipeline::{approx_projector, source_element, ApproxProjector, MRegularizer, ParamChoice};
use crate::training::{train, LossBreakdown, TrainConfig, TrainingSet};

pub const DEFAULT_DELTA_GRID: [f64; 7] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4];
pub const DEFAULT_CONVERGENCE_GRID: [f64; 9] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5];
pub const DEFAULT_SLOPE_TOLERANCE: f64 = 0.1;
/// Approximate projectors must satisfy `‖Q − P_ker‖ ≤ 10 δ^{2μ/(2μ+1)}`.
pub const DEVIATION_BOUND_FACTOR: f64 = 10.0;
/// Error tables may grow by at most 10% from one noise level to the next.
pub const MONOTONE_SLACK: f64 = 1.1;
/// The last error of a convergence table must be below this fraction of the first.
pub const CONVERGENCE_REDUCTION: f64 = 0.1;
pub const CONSISTENCY_THRESHOLD: f64 = 1e-9;
/// The rate constant is inspected on noise levels at or below this value.
pub const RATE_CONSTANT_DELTA_MAX: f64 = 1e-2;

/// Kernel projector used by the second reconstruction step of an experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectorChoice {
    #[default]
    Exact,
    /// `Q_α = Id − B_{φ(α)} A` with `φ(α) = α^phi_exponent`.
    Approximate { filter: FilterSpec, phi_exponent: f64 },
}

fn default_rho() -> f64 {
    1.0
}

fn default_trials() -> usize {
    20
}

fn default_delta_grid() -> Vec<f64> {
    DEFAULT_DELTA_GRID.to_vec()
}

fn default_convergence_grid() -> Vec<f64> {
    DEFAULT_CONVERGENCE_GRID.to_vec()
}

fn default_slope_tolerance() -> f64 {
    DEFAULT_SLOPE_TOLERANCE
}

fn default_half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateExperimentConfig {
    pub problem: ProblemSpec,
    pub filter: FilterSpec,
    pub smoothness_mu: f64,
    #[serde(default = "default_rho")]
    pub source_radius_rho: f64,
    #[serde(default = "default_rho")]
    pub constant_d: f64,
    #[serde(default = "default_delta_grid")]
    pub delta_grid: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials_per_delta: usize,
    #[serde(default)]
    pub network_path: Option<PathBuf>,
    #[serde(default)]
    pub projector_mode: ProjectorChoice,
    #[serde(default = "default_slope_tolerance")]
    pub slope_tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

impl RateExperimentConfig {
    pub fn new(problem: ProblemSpec, filter: FilterSpec, smoothness_mu: f64) -> Self {
        Self {
            problem,
            filter,
            smoothness_mu,
            source_radius_rho: 1.0,
            constant_d: 1.0,
            delta_grid: default_delta_grid(),
            trials_per_delta: default_trials(),
            network_path: None,
            projector_mode: ProjectorChoice::Exact,
            slope_tolerance: DEFAULT_SLOPE_TOLERANCE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        ParamChoice::new(self.smoothness_mu, self.source_radius_rho, self.constant_d)
            .map_err(|e| Error::Config(e.to_string()))?;
        let g = &self.delta_grid;
        if g.len() < 5 {
            return Err(Error::Config(format!("delta grid needs at least 5 points, got {}", g.len())));
        }
        validate_decreasing(g)?;
        if g[0] / g[g.len() - 1] < 1e3 * (1.0 - 1e-12) {
            return Err(Error::Config("delta grid must span at least three decades".into()));
        }
        if self.trials_per_delta == 0 {
            return Err(Error::Config("trials_per_delta must be positive".into()));
        }
        if !(self.slope_tolerance > 0.0) {
            return Err(Error::Config("slope tolerance must be positive".into()));
        }
        if let ProjectorChoice::Approximate { phi_exponent, .. } = &self.projector_mode {
            if !(*phi_exponent > 0.0) {
                return Err(Error::Config("phi exponent must be positive".into()));
            }
        }
        Ok(())
    }
}

fn validate_decreasing(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::Config("noise levels must be positive".into()));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("noise levels must be strictly decreasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub delta: f64,
    pub alpha: f64,
    pub worst_error: f64,
    pub mean_error: f64,
    /// `‖Q_α − P_ker‖` in approximate mode.
    pub deviation: Option<f64>,
    pub deviation_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub filter: String,
    pub mu: f64,
    pub rho: f64,
    pub rows: Vec<RateRow>,
    pub fitted_slope: f64,
    pub expected_slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub slope_tolerance: f64,
    /// `|fitted − expected| ≤ tolerance`.
    pub pass: bool,
    /// Every measured deviation within its bound (approximate mode only).
    pub deviation_pass: Option<bool>,
    /// `max/min` of `worst_error / δ^{2μ/(2μ+1)}` over `δ ≤ 1e-2`.
    pub rate_constant_spread: f64,
}

impl RateReport {
    pub fn all_passed(&self) -> bool {
        self.pass && self.deviation_pass.unwrap_or(true)
    }
}

/// Rejects filters whose rate constants blow up for the requested smoothness.
pub fn check_rate_qualification(filter: &FilterSpec, mu: f64, lambda_max: f64) -> Result<RateConditionReport> {
    let alphas: Vec<f64> = log_grid(0.0, -8.0, 2).into_iter().map(|a| a * lambda_max).collect();
    let report = verify_rate_conditions(filter, mu, lambda_max, &alphas, &linear_grid(lambda_max, 101))?;
    if report.passed() {
        return Ok(report);
    }
    let failed: Vec<String> = report
        .failed_checks()
        .iter()
        .map(|c| format!("{} (growth {:.3} > {})", c.name, c.value, c.threshold))
        .collect();
    Err(Error::Config(format!(
        "filter {} fails the rate qualification check for mu = {mu}: {}",
        filter.label,
        failed.join(", ")
    )))
}

/// Loads the network named by `path` for `op`, or the zero network.
pub fn load_base_network(path: Option<&PathBuf>, op: &DenseOperator) -> Result<FeedForwardNet> {
    match path {
        Some(p) => {
            let doc = NetworkDocument::load(p)?;
            doc.check_operator(op)?;
            doc.to_net()
        }
        None => {
            let n = op.cols();
            FeedForwardNet::zeros(&[n, n], vec![Activation::Identity])
        }
    }
}

fn trial_rng(seed: u64, level: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((level as u64) << 32) | trial as u64);
    rng
}

pub fn run_rate_experiment(config: &RateExperimentConfig) -> Result<RateReport> {
    config.validate()?;
    let op = Arc::new(make_problem(&config.problem)?);
    let base = load_base_network(config.network_path.as_ref(), &op)?;
    run_rate_experiment_with(config, op, base)
}

/// Runs the rate experiment on a given operator and network.
pub fn run_rate_experiment_with(
    config: &RateExperimentConfig,
    op: Arc<DenseOperator>,
    base: FeedForwardNet,
) -> Result<RateReport> {
    config.validate()?;
    let mu = config.smoothness_mu;
    let rho = config.source_radius_rho;
    check_rate_qualification(&config.filter, mu, op.lambda_max())?;
    let choice = ParamChoice::new(mu, rho, config.constant_d)?;
    let phi = NullSpaceNetwork::exact(base, Arc::clone(&op))?;
    let reg = MRegularizer::new(config.filter.clone(), Arc::clone(&op), phi)?;
    let rate = choice.expected_rate();

    let mut rows = Vec::with_capacity(config.delta_grid.len());
    for (level, &delta) in config.delta_grid.iter().enumerate() {
        let alpha = choice.alpha_star(delta)?;
        let q = match &config.projector_mode {
            ProjectorChoice::Exact => None,
            ProjectorChoice::Approximate { filter, phi_exponent } => Some(approx_projector(
                Arc::clone(&op),
                filter.clone(),
                alpha.powf(*phi_exponent),
            )?),
        };
        let errors = (0..config.trials_per_delta)
            .into_par_iter()
            .map(|t| rate_trial(&reg, mu, rho, delta, alpha, q.as_ref(), trial_rng(config.seed, level, t)))
            .collect::<Result<Vec<f64>>>()?;
        let deviation = q.as_ref().and_then(ApproxProjector::deviation);
        rows.push(RateRow {
            delta,
            alpha,
            worst_error: errors.iter().copied().fold(0.0, f64::max),
            mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
            deviation,
            deviation_bound: deviation.map(|_| DEVIATION_BOUND_FACTOR * delta.powf(rate)),
        });
    }

    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.delta, r.worst_error)).collect();
    let fit = fit_loglog_slope(&points)?;
    let deviation_pass = match config.projector_mode {
        ProjectorChoice::Exact => None,
        ProjectorChoice::Approximate { .. } => Some(
            rows.iter()
                .all(|r| matches!((r.deviation, r.deviation_bound), (Some(d), Some(b)) if d <= b)),
        ),
    };
    let constants: Vec<f64> = rows
        .iter()
        .filter(|r| r.delta <= RATE_CONSTANT_DELTA_MAX)
        .map(|r| r.worst_error / r.delta.powf(rate))
        .collect();
    let rate_constant_spread = if constants.len() >= 2 {
        constants.iter().copied().fold(0.0, f64::max) / constants.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        f64::NAN
    };

    Ok(RateReport {
        filter: config.filter.label.clone(),
        mu,
        rho,
        rows,
        fitted_slope: fit.slope,
        expected_slope: rate,
        intercept: fit.intercept,
        residual: fit.residual,
        slope_tolerance: config.slope_tolerance,
        pass: (fit.slope - rate).abs() <= config.slope_tolerance,
        deviation_pass,
        rate_constant_spread,
    })
}

fn rate_trial(
    reg: &MRegularizer,
    mu: f64,
    rho: f64,
    delta: f64,
    alpha: f64,
    q: Option<&ApproxProjector>,
    mut rng: ChaCha8Rng,
) -> Result<f64> {
    let op = reg.operator();
    let w = gaussian_direction(op.cols(), &mut rng) * rho;
    let x = source_element(op, reg.phi(), mu, &w)?;
    let y = op.apply(&x)?;
    let y_delta = add_noise_with(&y, delta, &mut rng)?;
    let x_hat = match q {
        None => reg.reconstruct_two_step(alpha, &y_delta)?,
        Some(q) => reg.reconstruct_two_step_with(alpha, q, &y_delta)?,
    };
    Ok((x_hat - x).norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub problem: ProblemSpec,
    pub filter: FilterSpec,
    #[serde(default)]
    pub network_path: Option<PathBuf>,
    #[serde(default = "default_convergence_grid")]
    pub delta_grid: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Smoothness used only by the a-priori rule `α*(δ)`.
    #[serde(default = "default_half")]
    pub smoothness_mu: f64,
    #[serde(default = "default_rho")]
    pub source_radius_rho: f64,
    #[serde(default = "default_rho")]
    pub constant_d: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ConvergenceConfig {
    pub fn new(problem: ProblemSpec, filter: FilterSpec) -> Self {
        Self {
            problem,
            filter,
            network_path: None,
            delta_grid: default_convergence_grid(),
            trials: default_trials(),
            smoothness_mu: 0.5,
            source_radius_rho: 1.0,
            constant_d: 1.0,
            seed: 0,
        }
    }

    pub fn param_choice(&self) -> Result<ParamChoice> {
        ParamChoice::new(self.smoothness_mu, self.source_radius_rho, self.constant_d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub delta: f64,
    pub alpha: f64,
    pub sup_error: f64,
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Each error at most 10% above its predecessor.
    pub monotone: bool,
    /// Last sup-error divided by the first.
    pub reduction: f64,
    pub reduction_pass: bool,
    pub pass: bool,
}

pub fn run_convergence_experiment_from(config: &ConvergenceConfig) -> Result<ConvergenceTable> {
    let op = Arc::new(make_problem(&config.problem)?);
    let base = load_base_network(config.network_path.as_ref(), &op)?;
    let phi = NullSpaceNetwork::exact(base, Arc::clone(&op))?;
    let reg = MRegularizer::new(config.filter.clone(), op, phi)?;
    run_convergence_experiment(&reg, config.param_choice()?, &config.delta_grid, config.trials, config.seed)
}

/// Worst-case distance to `A^M y` for a fixed exact datum `y ∈ ran(A)`.
pub fn run_convergence_experiment(
    reg: &MRegularizer,
    choice: ParamChoice,
    delta_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<ConvergenceTable> {
    if delta_grid.len() < 2 {
        return Err(Error::Config("convergence grid needs at least 2 noise levels".into()));
    }
    validate_decreasing(delta_grid)?;
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let op = reg.operator();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = if op.cols() >= 6 {
        piecewise_constant(op.cols(), &mut rng)?
    } else {
        gaussian_direction(op.cols(), &mut rng)
    };
    let y = op.apply(&x0)?;
    let target = reg.m_generalized_inverse(&y)?;

    let mut rows = Vec::with_capacity(delta_grid.len());
    for (level, &delta) in delta_grid.iter().enumerate() {
        let alpha = choice.alpha_star(delta)?;
        let errors = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = trial_rng(seed.wrapping_add(1), level, t);
                let y_delta = add_noise_with(&y, delta, &mut rng)?;
                Ok((reg.reconstruct_two_step(alpha, &y_delta)? - &target).norm())
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(ConvergenceRow {
            delta,
            alpha,
            sup_error: errors.iter().copied().fold(0.0, f64::max),
            mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].sup_error <= MONOTONE_SLACK * w[0].sup_error);
    let reduction = rows[rows.len() - 1].sup_error / rows[0].sup_error;
    let reduction_pass = reduction < CONVERGENCE_REDUCTION;
    Ok(ConvergenceTable {
        rows,
        monotone,
        reduction,
        reduction_pass,
        pass: monotone && reduction_pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub samples: usize,
    /// `max ‖AΦx − Ax‖ / (‖A‖(‖x‖ + ‖N(x)‖))`.
    pub max_violation: f64,
    pub threshold: f64,
    pub exact_mode: bool,
    /// Only meaningful in exact mode; approximate projectors are not data consistent.
    pub pass: bool,
}

/// Measures data consistency of `phi` on Gaussian random inputs.
pub fn run_consistency_check(phi: &NullSpaceNetwork, samples: usize, seed: u64) -> Result<ConsistencyReport> {
    if samples == 0 {
        return Err(Error::Config("consistency check needs at least one sample".into()));
    }
    let op = phi.operator();
    let norm = op.norm();
    let n = op.cols();
    let violations = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = trial_rng(seed, 0, s);
            let x = gaussian_direction(n, &mut rng) * (n as f64).sqrt();
            let nx = phi.base().forward(&x)?;
            let out = &x + phi.project(&nx)?;
            let diff = (op.apply(&out)? - op.apply(&x)?).norm();
            let scale = norm * (x.norm() + nx.norm());
            Ok(if scale > 0.0 { diff / scale } else { 0.0 })
        })
        .collect::<Result<Vec<f64>>>()?;
    let max_violation = violations.iter().copied().fold(0.0, f64::max);
    let exact_mode = matches!(phi.mode(), ProjectorMode::Exact);
    Ok(ConsistencyReport {
        samples,
        max_violation,
        threshold: CONSISTENCY_THRESHOLD,
        exact_mode,
        pass: max_violation <= CONSISTENCY_THRESHOLD,
    })
}

/// Consistency check for a serialized network; the file must match the problem.
pub fn run_consistency_check_file(
    problem: &ProblemSpec,
    network_path: &PathBuf,
    mode: ProjectorMode,
    samples: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    let op = Arc::new(make_problem(problem)?);
    let base = load_base_network(Some(network_path), &op)?;
    run_consistency_check(&NullSpaceNetwork::new(base, op, mode)?, samples, seed)
}

/// Root-mean-square norm of `(A*A)^μ w` for `w` uniform on the `ρ`-sphere.
pub fn source_scale(op: &DenseOperator, mu: f64, rho: f64) -> f64 {
    let sum: f64 = op.svd().singular_values.iter().map(|s| s.powf(4.0 * mu)).sum();
    rho * (sum / op.cols() as f64).sqrt()
}

/// Trains the default architecture on `count` piecewise-constant phantoms,
/// each rescaled to norm `scale` when given.
pub fn train_on_phantoms(
    op: &DenseOperator,
    count: usize,
    scale: Option<f64>,
    config: &TrainConfig,
) -> Result<(FeedForwardNet, Vec<LossBreakdown>, TrainingSet)> {
    let mut xs = phantoms(op.cols(), count, config.seed)?;
    if let Some(s) = scale {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Config(format!("phantom scale must be positive, got {s}")));
        }
        for x in &mut xs {
            *x *= s / x.norm();
        }
    }
    let set = TrainingSet::new(xs)?;
    let net = FeedForwardNet::default_architecture(op.cols(), config.seed)?;
    let (net, history) = train(net, op, &set, config)?;
    Ok((net, history, set))
}
