//! Synthetic forward operators, noise and phantoms.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::DenseOperator;

/// Smallest singular value of the random rank-deficient family (largest is 1).
pub const RANDOM_SIGMA_MIN: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProblemKind {
    /// Circulant Gaussian blur on `R^n`, keeping `keep_rows` random rows.
    Deconvolution { n: usize, kernel_width: f64, keep_rows: usize },
    /// `U_r Σ V_r*` with Haar-like factors and log-spaced `σ ∈ [1e-2, 1]`.
    RandomRankDeficient { m: usize, n: usize, rank: usize },
    /// Operator read from a CSV file.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    #[serde(default)]
    pub seed: u64,
}

impl ProblemSpec {
    pub fn random(m: usize, n: usize, rank: usize, seed: u64) -> Self {
        Self {
            kind: ProblemKind::RandomRankDeficient { m, n, rank },
            seed,
        }
    }

    pub fn deconvolution(n: usize, kernel_width: f64, keep_rows: usize, seed: u64) -> Self {
        Self {
            kind: ProblemKind::Deconvolution {
                n,
                kernel_width,
                keep_rows,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ProblemKind::Deconvolution {
                n,
                kernel_width,
                keep_rows,
            } => {
                if keep_rows == 0 || keep_rows >= n {
                    return Err(Error::Config(format!("keep_rows must lie in 1..{n}, got {keep_rows}")));
                }
                if !(kernel_width > 0.0) || !kernel_width.is_finite() {
                    return Err(Error::Config(format!("kernel width must be positive, got {kernel_width}")));
                }
            }
            ProblemKind::RandomRankDeficient { m, n, rank } => {
                if rank == 0 || rank >= m.min(n) {
                    return Err(Error::Config(format!(
                        "rank must lie in 1..{}, got {rank}",
                        m.min(n)
                    )));
                }
            }
            ProblemKind::Csv { .. } => {}
        }
        Ok(())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    /// `random:M,N,RANK`, `deconv:N,WIDTH,KEEP` or `csv:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("problem {s:?} lacks a `kind:` prefix")))?;
        let nums = || -> Result<Vec<&str>> {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            if parts.len() == 3 {
                Ok(parts)
            } else {
                Err(Error::Config(format!("problem {s:?} needs three comma-separated values")))
            }
        };
        let int = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("invalid integer {v:?}")));
        match kind {
            "random" => {
                let p = nums()?;
                Ok(ProblemKind::RandomRankDeficient {
                    m: int(p[0])?,
                    n: int(p[1])?,
                    rank: int(p[2])?,
                })
            }
            "deconv" => {
                let p = nums()?;
                Ok(ProblemKind::Deconvolution {
                    n: int(p[0])?,
                    kernel_width: p[1]
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid kernel width {:?}", p[1])))?,
                    keep_rows: int(p[2])?,
                })
            }
            "csv" => Ok(ProblemKind::Csv { path: args.into() }),
            other => Err(Error::Config(format!("unknown problem kind {other:?}"))),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemKind::Deconvolution {
                n,
                kernel_width,
                keep_rows,
            } => write!(f, "deconv:{n},{kernel_width},{keep_rows}"),
            ProblemKind::RandomRankDeficient { m, n, rank } => write!(f, "random:{m},{n},{rank}"),
            ProblemKind::Csv { path } => write!(f, "csv:{}", path.display()),
        }
    }
}

pub fn make_problem(spec: &ProblemSpec) -> Result<DenseOperator> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match &spec.kind {
        ProblemKind::Deconvolution {
            n,
            kernel_width,
            keep_rows,
        } => DenseOperator::new(blur_matrix(*n, *kernel_width, *keep_rows, &mut rng)),
        ProblemKind::RandomRankDeficient { m, n, rank } => DenseOperator::new(random_rank_deficient(*m, *n, *rank, &mut rng)),
        ProblemKind::Csv { path } => DenseOperator::from_csv_path(path),
    }
}

fn blur_matrix(n: usize, width: f64, keep_rows: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let kernel: Vec<f64> = (0..n)
        .map(|k| {
            let d = k.min(n - k) as f64;
            (-d * d / (2.0 * width * width)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    let mut rows = index::sample(rng, n, keep_rows).into_vec();
    rows.sort_unstable();
    DMatrix::from_fn(keep_rows, n, |r, j| {
        let i = rows[r];
        kernel[(j + n - i) % n] / total
    })
}

fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q().columns(0, cols).into_owned()
}

fn random_rank_deficient(m: usize, n: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let u = orthonormal_columns(m, rank, rng);
    let v = orthonormal_columns(n, rank, rng);
    let sigma = log_spaced_sigma(rank);
    let mut us = u;
    for (mut col, s) in us.column_iter_mut().zip(sigma.iter()) {
        col *= *s;
    }
    us * v.transpose()
}

/// `σ_i = 10^{log10(σ_min)·i/(r−1)}`, from 1 down to [`RANDOM_SIGMA_MIN`].
pub fn log_spaced_sigma(rank: usize) -> DVector<f64> {
    let lo = RANDOM_SIGMA_MIN.log10();
    DVector::from_fn(rank, |i, _| {
        if rank == 1 {
            1.0
        } else {
            10f64.powf(lo * i as f64 / (rank - 1) as f64)
        }
    })
}

/// Unit-norm Gaussian direction, redrawn in the (measure-zero) event of a zero draw.
pub fn gaussian_direction(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = xi.norm();
        if norm > 0.0 {
            return xi / norm;
        }
    }
}

/// `y + δ ξ/‖ξ‖`, so that `‖y^δ − y‖ = δ` exactly up to rounding.
pub fn add_noise(y: &DVector<f64>, delta: f64, seed: u64) -> Result<DVector<f64>> {
    add_noise_with(y, delta, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn add_noise_with(y: &DVector<f64>, delta: f64, rng: &mut impl Rng) -> Result<DVector<f64>> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Contract(format!("noise level must be positive, got {delta}")));
    }
    if y.is_empty() {
        return Err(Error::Contract("cannot add noise to an empty vector".into()));
    }
    Ok(y + delta * gaussian_direction(y.len(), rng))
}

/// Piecewise-constant signal with 3–6 plateaus and levels in `[−1, 1]`.
pub fn piecewise_constant(n: usize, rng: &mut impl Rng) -> Result<DVector<f64>> {
    if n < 6 {
        return Err(Error::Contract(format!("phantoms need at least 6 samples, got {n}")));
    }
    let plateaus = rng.random_range(3..=6usize);
    let mut cuts = index::sample(rng, n - 1, plateaus - 1).into_vec();
    cuts.iter_mut().for_each(|c| *c += 1);
    cuts.sort_unstable();
    cuts.push(n);
    let mut x = DVector::zeros(n);
    let mut start = 0;
    for end in cuts {
        let level = rng.random_range(-1.0..=1.0);
        x.rows_mut(start, end - start).fill(level);
        start = end;
    }
    Ok(x)
}

pub fn phantoms(n: usize, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| piecewise_constant(n, &mut rng)).collect()
}
