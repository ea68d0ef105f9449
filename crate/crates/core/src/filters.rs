//! Spectral regularizing filters `g_α` and the reconstructors
//! `B_α = g_α(A*A) A*` they induce.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::DenseOperator;

/// Bound on `|λ g_α(λ)|` used by the axiom check.
pub const AXIOM_BOUND_C: f64 = 2.0;
/// Relative tolerance of the pointwise-limit check for the smooth filters.
pub const LIMIT_REL_TOL: f64 = 1e-3;
/// Largest admissible step-to-step growth of an empirical rate constant.
pub const QUALIFICATION_GROWTH: f64 = 1.05;
/// Rate constants are judged on `α ≤ ASYMPTOTIC_FRACTION · λ_max`.
pub const ASYMPTOTIC_FRACTION: f64 = 1e-2;

/// Relative slack on the Landweber stability condition `τ λ_max ≤ 1`.
const STEP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterFamily {
    /// `g_α(λ) = 1/(α+λ)`.
    Tikhonov,
    /// `g_α(λ) = 1/λ` for `λ ≥ α`, zero below.
    TruncatedSvd,
    /// `k = ⌈1/α⌉` steps of Landweber iteration with step `τ`:
    /// `g_α(λ) = τ Σ_{j<k} (1 − τλ)^j`.
    Landweber { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub family: FilterFamily,
    pub label: String,
}

impl FilterSpec {
    pub fn tikhonov() -> Self {
        Self {
            family: FilterFamily::Tikhonov,
            label: "tikhonov".into(),
        }
    }

    pub fn tsvd() -> Self {
        Self {
            family: FilterFamily::TruncatedSvd,
            label: "tsvd".into(),
        }
    }

    pub fn landweber(step: f64) -> Self {
        Self {
            family: FilterFamily::Landweber { step },
            label: format!("landweber:{step}"),
        }
    }

    /// Landweber with the largest admissible step `1/λ_max`.
    pub fn landweber_for(lambda_max: f64) -> Self {
        Self::landweber(1.0 / lambda_max)
    }

    /// Evaluates `g_α(λ)`.
    pub fn filter_value(&self, alpha: f64, lambda: f64) -> f64 {
        match self.family {
            FilterFamily::Tikhonov => 1.0 / (alpha + lambda),
            FilterFamily::TruncatedSvd => {
                if lambda < alpha {
                    0.0
                } else {
                    1.0 / lambda
                }
            }
            FilterFamily::Landweber { step } => landweber_value(step, landweber_iterations(alpha), lambda),
        }
    }

    /// `r_α(λ) = 1 − λ g_α(λ)`, evaluated without cancellation.
    pub fn residual_value(&self, alpha: f64, lambda: f64) -> f64 {
        match self.family {
            FilterFamily::Tikhonov => alpha / (alpha + lambda),
            FilterFamily::TruncatedSvd => {
                if lambda < alpha {
                    1.0
                } else {
                    0.0
                }
            }
            FilterFamily::Landweber { step } => landweber_residual(step, landweber_iterations(alpha), lambda),
        }
    }

    /// Checks that the filter is admissible for spectra inside `[0, lambda_max]`.
    pub fn validate_for(&self, lambda_max: f64) -> Result<()> {
        if let FilterFamily::Landweber { step } = self.family {
            if !(step > 0.0) || !step.is_finite() {
                return Err(Error::Parameter(format!("Landweber step must be positive, got {step}")));
            }
            if step * lambda_max > 1.0 + STEP_SLACK {
                return Err(Error::Parameter(format!(
                    "Landweber step {step} exceeds 1/λ_max = {}",
                    1.0 / lambda_max
                )));
            }
        }
        Ok(())
    }

    /// `B_α y = Σ_i g_α(σ_i²) σ_i ⟨u_i, y⟩ v_i`.
    pub fn reconstruct(&self, op: &DenseOperator, alpha: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_alpha(alpha)?;
        self.validate_for(op.lambda_max())?;
        op.spectral_apply(y, |s| self.filter_value(alpha, s * s) * s)
    }

    /// `B_α A x = Σ_i g_α(σ_i²) σ_i² ⟨v_i, x⟩ v_i`, evaluated spectrally.
    pub fn reconstruct_normal(&self, op: &DenseOperator, alpha: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_alpha(alpha)?;
        self.validate_for(op.lambda_max())?;
        op.domain_spectral_apply(x, |s| self.filter_value(alpha, s * s) * s * s)
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl FromStr for FilterSpec {
    type Err = Error;

    /// Accepts `tikhonov`, `tsvd` and `landweber:<step>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.split_once(':') {
            None if lower == "tikhonov" => Ok(Self::tikhonov()),
            None if lower == "tsvd" => Ok(Self::tsvd()),
            Some(("landweber", step)) => {
                let step: f64 = step
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid Landweber step {step:?}")))?;
                Ok(Self::landweber(step))
            }
            _ => Err(Error::Config(format!(
                "unknown filter {s:?}; expected tikhonov, tsvd or landweber:<step>"
            ))),
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("regularization parameter must be positive, got {alpha}")))
    }
}

/// Number of Landweber steps associated with `α`.
pub fn landweber_iterations(alpha: f64) -> f64 {
    (1.0 / alpha).ceil().max(1.0)
}

fn landweber_value(step: f64, k: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return k * step;
    }
    let t = step * lambda;
    // 1 − (1 − t)^k, computed without cancellation for small t
    let one_minus_power = if t < 1.0 {
        -(k * (-t).ln_1p()).exp_m1()
    } else {
        1.0 - landweber_residual(step, k, lambda)
    };
    one_minus_power / lambda
}

/// `(1 − τλ)^k`.
fn landweber_residual(step: f64, k: f64, lambda: f64) -> f64 {
    let q = 1.0 - step * lambda;
    if q == 0.0 {
        return 0.0;
    }
    let mag = (k * q.abs().ln()).exp();
    if q < 0.0 && k % 2.0 == 1.0 {
        -mag
    } else {
        mag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxiomReport {
    pub filter: String,
    pub checks: Vec<Check>,
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateConditionReport {
    pub filter: String,
    pub mu: f64,
    /// `max_α max_λ λ^μ |1 − λ g_α(λ)| / α^μ` over the whole grid.
    pub c1: f64,
    /// `max_α α ‖g_α‖_∞` over the whole grid.
    pub c2: f64,
    /// Decreasing α-grid and the per-α constants behind `c1`, `c2`.
    pub alphas: Vec<f64>,
    pub c1_by_alpha: Vec<f64>,
    pub c2_by_alpha: Vec<f64>,
    pub checks: Vec<Check>,
}

impl RateConditionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

fn check_grids(lambda_max: f64, alpha_grid: &[f64], lambda_grid: &[f64]) -> Result<()> {
    if alpha_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::Contract("alpha and lambda grids must be nonempty".into()));
    }
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::Contract(format!("lambda_max must be positive, got {lambda_max}")));
    }
    for &a in alpha_grid {
        check_alpha(a)?;
    }
    if let Some(l) = lambda_grid.iter().find(|&&l| !(0.0..=lambda_max).contains(&l)) {
        return Err(Error::Contract(format!("lambda {l} outside [0, {lambda_max}]")));
    }
    Ok(())
}

/// Samples the filter axioms: boundedness of `λ g_α(λ)` and `g_α(λ) → 1/λ`.
pub fn verify_filter_axioms(
    spec: &FilterSpec,
    lambda_max: f64,
    alpha_grid: &[f64],
    lambda_grid: &[f64],
) -> Result<AxiomReport> {
    check_grids(lambda_max, alpha_grid, lambda_grid)?;
    spec.validate_for(lambda_max)?;

    let bound = alpha_grid
        .iter()
        .flat_map(|&a| lambda_grid.iter().map(move |&l| (l * spec.filter_value(a, l)).abs()))
        .fold(0.0, f64::max);

    let alpha_min = alpha_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let (eligible, tol): (Vec<f64>, f64) = match spec.family {
        FilterFamily::TruncatedSvd => (lambda_grid.iter().copied().filter(|&l| l > alpha_min).collect(), 0.0),
        _ => (lambda_grid.iter().copied().filter(|&l| l > 0.0).collect(), LIMIT_REL_TOL),
    };
    if eligible.is_empty() {
        return Err(Error::Contract(
            "lambda grid has no point at which the pointwise limit can be checked".into(),
        ));
    }
    let limit = eligible
        .iter()
        .map(|&l| (spec.filter_value(alpha_min, l) - 1.0 / l).abs() * l)
        .fold(0.0, f64::max);

    Ok(AxiomReport {
        filter: spec.label.clone(),
        checks: vec![
            Check::at_most("bounded_lambda_g", bound, AXIOM_BOUND_C),
            Check::at_most("pointwise_limit", limit, tol),
        ],
    })
}

/// `λ`-points used to approximate a supremum over `[0, λ_max]` at scale `α`:
/// the caller's grid, the endpoints and a fine geometric grid around `α`.
fn sup_samples(alpha: f64, lambda_max: f64, lambda_grid: &[f64]) -> Vec<f64> {
    let mut pts: Vec<f64> = lambda_grid.to_vec();
    pts.push(0.0);
    pts.push(lambda_max);
    pts.extend(
        (-600..=600)
            .map(|k| alpha * 10f64.powf(k as f64 / 200.0))
            .filter(|&l| l <= lambda_max),
    );
    pts
}

fn max_growth(seq: &[f64]) -> f64 {
    seq.windows(2)
        .map(|w| match (w[0], w[1]) {
            (_, b) if b == 0.0 => 1.0,
            (a, _) if a == 0.0 => f64::INFINITY,
            (a, b) => b / a,
        })
        .fold(1.0, f64::max)
}

/// Estimates the constants in `λ^μ |1 − λ g_α(λ)| ≤ c1 α^μ` and
/// `‖g_α‖_∞ ≤ c2/α`, and judges whether they stay bounded as `α → 0`.
pub fn verify_rate_conditions(
    spec: &FilterSpec,
    mu: f64,
    lambda_max: f64,
    alpha_grid: &[f64],
    lambda_grid: &[f64],
) -> Result<RateConditionReport> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Contract(format!("smoothness mu must be positive, got {mu}")));
    }
    check_grids(lambda_max, alpha_grid, lambda_grid)?;
    spec.validate_for(lambda_max)?;

    let mut alphas = alpha_grid.to_vec();
    alphas.sort_by(|a, b| b.total_cmp(a));
    alphas.dedup();

    let mut c1_by_alpha = Vec::with_capacity(alphas.len());
    let mut c2_by_alpha = Vec::with_capacity(alphas.len());
    for &a in &alphas {
        let pts = sup_samples(a, lambda_max, lambda_grid);
        let c1 = pts
            .iter()
            .map(|&l| l.powf(mu) * spec.residual_value(a, l).abs() / a.powf(mu))
            .fold(0.0, f64::max);
        let c2 = a * pts.iter().map(|&l| spec.filter_value(a, l).abs()).fold(0.0, f64::max);
        c1_by_alpha.push(c1);
        c2_by_alpha.push(c2);
    }

    let tail: Vec<usize> = (0..alphas.len())
        .filter(|&i| alphas[i] <= ASYMPTOTIC_FRACTION * lambda_max)
        .collect();
    if tail.len() < 2 {
        return Err(Error::Contract(format!(
            "alpha grid needs at least two values ≤ {ASYMPTOTIC_FRACTION}·λ_max to judge rate constants"
        )));
    }
    let pick = |v: &[f64]| tail.iter().map(|&i| v[i]).collect::<Vec<_>>();

    let c1 = c1_by_alpha.iter().copied().fold(0.0, f64::max);
    let c2 = c2_by_alpha.iter().copied().fold(0.0, f64::max);
    let checks = vec![
        Check::at_most("c1_bounded", max_growth(&pick(&c1_by_alpha)), QUALIFICATION_GROWTH),
        Check::at_most("c2_bounded", max_growth(&pick(&c2_by_alpha)), QUALIFICATION_GROWTH),
    ];
    Ok(RateConditionReport {
        filter: spec.label.clone(),
        mu,
        c1,
        c2,
        alphas,
        c1_by_alpha,
        c2_by_alpha,
        checks,
    })
}

/// Log-spaced grid `10^start, …, 10^end` with `per_decade` points per decade.
pub fn log_grid(start_exp: f64, end_exp: f64, per_decade: usize) -> Vec<f64> {
    let steps = ((end_exp - start_exp).abs() * per_decade as f64).round() as usize;
    (0..=steps)
        .map(|i| 10f64.powf(start_exp + (end_exp - start_exp) * i as f64 / steps.max(1) as f64))
        .collect()
}

/// Uniform grid of `count` points on `[0, upper]`.
pub fn linear_grid(upper: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| upper * i as f64 / (count - 1).max(1) as f64).collect()
}
