use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nullspace_reg::filters::{linear_grid, log_grid, verify_filter_axioms, verify_rate_conditions};
use nullspace_reg::harness::experiments::{
    load_base_network, run_consistency_check, run_convergence_experiment_from, run_rate_experiment,
    ConvergenceConfig, ProjectorChoice, RateExperimentConfig,
};
use nullspace_reg::harness::problem::{make_problem, phantoms, ProblemKind, ProblemSpec};
use nullspace_reg::harness::report::{
    write_consistency_report, write_convergence_report, write_loss_history, write_rate_report,
};
use nullspace_reg::network::NetworkDocument;
use nullspace_reg::training::train;
use nullspace_reg::{Error, FeedForwardNet, FilterSpec, NullSpaceNetwork, ProjectorMode, Result, TrainConfig, TrainMode, TrainingSet};

#[derive(Parser)]
#[command(name = "nullspace-reg", version, about = "Null-space networks and M-regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a null-space network on piecewise-constant phantoms.
    Train(TrainArgs),
    /// Measure convergence rates under a source condition.
    Rates(RatesArgs),
    /// Tabulate the worst-case error against the M-generalized inverse.
    Converge(ConvergeArgs),
    /// Check data consistency of a null-space network.
    Consistency(ConsistencyArgs),
    /// Check filter axioms and rate conditions; prints JSON.
    VerifyFilters(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with the full configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

/// Problem flags shared by every problem-based subcommand.
#[derive(Args)]
struct ProblemArgs {
    /// `random:M,N,RANK`, `deconv:N,WIDTH,KEEP` or `csv:PATH`.
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    problem_seed: Option<u64>,
}

impl ProblemArgs {
    fn apply(&self, spec: &mut ProblemSpec) -> Result<()> {
        if let Some(p) = &self.problem {
            spec.kind = p.parse::<ProblemKind>()?;
        }
        if let Some(s) = self.problem_seed {
            spec.seed = s;
        }
        Ok(())
    }
}

fn default_problem() -> ProblemSpec {
    ProblemSpec::random(64, 96, 48, 0)
}

fn load_config<T: DeserializeOwned>(path: Option<&PathBuf>) -> Result<Option<T>> {
    match path {
        Some(p) => Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?)),
        None => Ok(None),
    }
}

/// `landweber` without a step resolves to `1/λ_max` of the problem.
fn parse_filter(s: &str, problem: &ProblemSpec) -> Result<FilterSpec> {
    if s.trim().eq_ignore_ascii_case("landweber") {
        return Ok(FilterSpec::landweber_for(make_problem(problem)?.lambda_max()));
    }
    s.parse()
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("invalid noise level {t:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainCommandConfig {
    problem: ProblemSpec,
    #[serde(default = "default_phantoms")]
    phantoms: usize,
    train: TrainConfig,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn default_phantoms() -> usize {
    20
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    phantoms: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    reg_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `exact` or `regularized:<alpha>`.
    #[arg(long)]
    mode: Option<String>,
    /// Filter for the regularized mode.
    #[arg(long)]
    filter: Option<String>,
    /// Network output file (relative paths resolve against --out-dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str, filter: FilterSpec) -> Result<TrainMode> {
    if s == "exact" {
        return Ok(TrainMode::ExactProjector);
    }
    match s.split_once(':') {
        Some(("regularized", a)) => Ok(TrainMode::Regularized {
            alpha: a
                .parse()
                .map_err(|_| Error::Config(format!("invalid alpha {a:?}")))?,
            filter,
        }),
        _ => Err(Error::Config(format!("unknown mode {s:?}; expected exact or regularized:<alpha>"))),
    }
}

fn run_train(args: TrainArgs) -> Result<bool> {
    let mut cfg = load_config::<TrainCommandConfig>(args.common.config.as_ref())?.unwrap_or_else(|| TrainCommandConfig {
        problem: default_problem(),
        phantoms: default_phantoms(),
        train: TrainConfig {
            learning_rate: 0.1,
            epochs: 500,
            reg_weight: 0.0,
            seed: 0,
            mode: TrainMode::ExactProjector,
        },
        out: None,
    });
    args.problem.apply(&mut cfg.problem)?;
    if let Some(v) = args.phantoms {
        cfg.phantoms = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.reg_weight {
        cfg.train.reg_weight = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(m) = &args.mode {
        let filter = match &args.filter {
            Some(f) => parse_filter(f, &cfg.problem)?,
            None => FilterSpec::tikhonov(),
        };
        cfg.train.mode = parse_mode(m, filter)?;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    cfg.problem.validate()?;

    let op = make_problem(&cfg.problem)?;
    let set = TrainingSet::new(phantoms(op.cols(), cfg.phantoms, cfg.train.seed)?)?;
    let net = FeedForwardNet::default_architecture(op.cols(), cfg.train.seed)?;
    let (net, history) = train(net, &op, &set, &cfg.train)?;

    let dir = &args.common.out_dir;
    fs::create_dir_all(dir)?;
    let out = resolve(dir, cfg.out.unwrap_or_else(|| PathBuf::from("net.json")));
    NetworkDocument::from_net(&net, Some(op.content_hash())).save(&out)?;
    write_loss_history(&dir.join("loss_history.csv"), &history)?;
    let first = history.first().map(|l| l.data_term).unwrap_or(0.0);
    let last = history.last().map(|l| l.data_term).unwrap_or(0.0);
    println!("network: {}", out.display());
    println!("data term: {first:.6e} -> {last:.6e}");
    Ok(true)
}

fn resolve(dir: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        dir.join(p)
    }
}

#[derive(Args)]
struct RatesArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    problem: ProblemArgs,
    /// `tikhonov`, `tsvd`, `landweber` or `landweber:<step>`.
    #[arg(long)]
    filter: Option<String>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    constant_d: Option<f64>,
    /// Comma-separated, strictly decreasing.
    #[arg(long)]
    delta_grid: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    network: Option<PathBuf>,
    /// `exact` or `approximate`.
    #[arg(long)]
    projector: Option<String>,
    /// Filter of the approximate projector.
    #[arg(long, default_value = "tikhonov")]
    q_filter: String,
    /// `φ(α) = α^p`.
    #[arg(long, default_value_t = 2.0)]
    phi_exponent: f64,
    #[arg(long)]
    slope_tolerance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run_rates(args: RatesArgs) -> Result<bool> {
    let mut cfg = load_config::<RateExperimentConfig>(args.common.config.as_ref())?
        .unwrap_or_else(|| RateExperimentConfig::new(default_problem(), FilterSpec::tsvd(), 0.5));
    args.problem.apply(&mut cfg.problem)?;
    if let Some(f) = &args.filter {
        cfg.filter = parse_filter(f, &cfg.problem)?;
    }
    if let Some(v) = args.mu {
        cfg.smoothness_mu = v;
    }
    if let Some(v) = args.rho {
        cfg.source_radius_rho = v;
    }
    if let Some(v) = args.constant_d {
        cfg.constant_d = v;
    }
    if let Some(g) = &args.delta_grid {
        cfg.delta_grid = parse_grid(g)?;
    }
    if let Some(v) = args.trials {
        cfg.trials_per_delta = v;
    }
    if args.network.is_some() {
        cfg.network_path = args.network;
    }
    match args.projector.as_deref() {
        None => {}
        Some("exact") => cfg.projector_mode = ProjectorChoice::Exact,
        Some("approximate") => {
            cfg.projector_mode = ProjectorChoice::Approximate {
                filter: parse_filter(&args.q_filter, &cfg.problem)?,
                phi_exponent: args.phi_exponent,
            }
        }
        Some(other) => return Err(Error::Config(format!("unknown projector {other:?}"))),
    }
    if let Some(v) = args.slope_tolerance {
        cfg.slope_tolerance = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }

    let report = run_rate_experiment(&cfg)?;
    write_rate_report(&args.common.out_dir, &report)?;
    for r in &report.rows {
        println!("delta {:.1e}  worst {:.4e}  mean {:.4e}", r.delta, r.worst_error, r.mean_error);
    }
    println!(
        "slope {:.4} expected {:.4} pass {}",
        report.fitted_slope, report.expected_slope, report.pass
    );
    if let Some(d) = report.deviation_pass {
        println!("deviation within bound: {d}");
    }
    Ok(report.all_passed())
}

#[derive(Args)]
struct ConvergeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    filter: Option<String>,
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    delta_grid: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// Smoothness used by the a-priori parameter choice.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    constant_d: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run_converge(args: ConvergeArgs) -> Result<bool> {
    let mut cfg = load_config::<ConvergenceConfig>(args.common.config.as_ref())?
        .unwrap_or_else(|| ConvergenceConfig::new(default_problem(), FilterSpec::tikhonov()));
    args.problem.apply(&mut cfg.problem)?;
    if let Some(f) = &args.filter {
        cfg.filter = parse_filter(f, &cfg.problem)?;
    }
    if args.network.is_some() {
        cfg.network_path = args.network;
    }
    if let Some(g) = &args.delta_grid {
        cfg.delta_grid = parse_grid(g)?;
    }
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(v) = args.mu {
        cfg.smoothness_mu = v;
    }
    if let Some(v) = args.rho {
        cfg.source_radius_rho = v;
    }
    if let Some(v) = args.constant_d {
        cfg.constant_d = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let table = run_convergence_experiment_from(&cfg)?;
    write_convergence_report(&args.common.out_dir, &table)?;
    for r in &table.rows {
        println!("delta {:.1e}  alpha {:.3e}  sup {:.4e}", r.delta, r.alpha, r.sup_error);
    }
    println!(
        "monotone {} reduction {:.3e} pass {}",
        table.monotone, table.reduction, table.pass
    );
    Ok(table.pass)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConsistencyConfig {
    problem: ProblemSpec,
    #[serde(default)]
    network_path: Option<PathBuf>,
    #[serde(default = "default_samples")]
    samples: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "exact_mode")]
    projector_mode: ProjectorMode,
}

fn default_samples() -> usize {
    1000
}

fn exact_mode() -> ProjectorMode {
    ProjectorMode::Exact
}

#[derive(Args)]
struct ConsistencyArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `exact` or `approximate:<phi_alpha>` (Tikhonov projector).
    #[arg(long)]
    projector: Option<String>,
}

fn run_consistency(args: ConsistencyArgs) -> Result<bool> {
    let mut cfg = load_config::<ConsistencyConfig>(args.common.config.as_ref())?.unwrap_or_else(|| ConsistencyConfig {
        problem: default_problem(),
        network_path: None,
        samples: default_samples(),
        seed: 0,
        projector_mode: ProjectorMode::Exact,
    });
    args.problem.apply(&mut cfg.problem)?;
    if args.network.is_some() {
        cfg.network_path = args.network;
    }
    if let Some(v) = args.samples {
        cfg.samples = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    match args.projector.as_deref().map(|s| (s, s.split_once(':'))) {
        None => {}
        Some(("exact", _)) => cfg.projector_mode = ProjectorMode::Exact,
        Some((_, Some(("approximate", p)))) => {
            cfg.projector_mode = ProjectorMode::Approximate {
                filter: FilterSpec::tikhonov(),
                phi_alpha: p
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid phi_alpha {p:?}")))?,
            }
        }
        Some((other, _)) => return Err(Error::Config(format!("unknown projector {other:?}"))),
    }
    let op = Arc::new(make_problem(&cfg.problem)?);
    let base = load_base_network(cfg.network_path.as_ref(), &op)?;
    let phi = NullSpaceNetwork::new(base, op, cfg.projector_mode.clone())?;
    let report = run_consistency_check(&phi, cfg.samples, cfg.seed)?;
    write_consistency_report(&args.common.out_dir, &report)?;
    println!(
        "max violation {:.3e} (threshold {:.0e}) pass {}",
        report.max_violation, report.threshold, report.pass
    );
    Ok(report.pass)
}

#[derive(Args)]
struct VerifyArgs {
    /// `tikhonov`, `tsvd`, `landweber` or `landweber:<step>`.
    #[arg(long)]
    filter: String,
    #[arg(long)]
    mu: f64,
    /// Upper end of the spectrum the filter is checked on.
    #[arg(long, default_value_t = 1.0)]
    lambda_max: f64,
}

#[derive(Serialize)]
struct FilterVerification {
    axioms: nullspace_reg::filters::AxiomReport,
    rates: nullspace_reg::filters::RateConditionReport,
    pass: bool,
}

fn run_verify(args: VerifyArgs) -> Result<bool> {
    let lmax = args.lambda_max;
    let filter = if args.filter.trim().eq_ignore_ascii_case("landweber") {
        FilterSpec::landweber_for(lmax)
    } else {
        args.filter.parse()?
    };
    let alphas: Vec<f64> = log_grid(0.0, -8.0, 2).into_iter().map(|a| a * lmax).collect();
    let lambdas = linear_grid(lmax, 101);
    let axioms = verify_filter_axioms(&filter, lmax, &alphas, &lambdas)?;
    let rates = verify_rate_conditions(&filter, args.mu, lmax, &alphas, &lambdas)?;
    let pass = axioms.passed() && rates.passed();
    println!("{}", serde_json::to_string_pretty(&FilterVerification { axioms, rates, pass })?);
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Rates(a) => run_rates(a),
        Command::Converge(a) => run_converge(a),
        Command::Consistency(a) => run_consistency(a),
        Command::VerifyFilters(a) => run_verify(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
