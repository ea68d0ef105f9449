//! Dense linear operators with a cached thin SVD.
//!
//! Every spectral quantity used elsewhere in the crate (pseudoinverse,
//! kernel projector, filtered reconstructions, fractional powers of `A*A`)
//! is evaluated through the retained singular triples of a single
//! factorization computed once per operator.

use std::io::Read;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};

/// Default relative singular-value cutoff.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Thin SVD restricted to the numerically nonzero singular values.
#[derive(Debug, Clone)]
pub struct SvdFactorization {
    /// `rows × r`, orthonormal columns `u_i`.
    pub left_vectors: DMatrix<f64>,
    /// `σ_1 ≥ … ≥ σ_r > rank_tol·σ_1`.
    pub singular_values: DVector<f64>,
    /// `cols × r`, orthonormal columns `v_i`.
    pub right_vectors: DMatrix<f64>,
}

impl SvdFactorization {
    pub fn numerical_rank(&self) -> usize {
        self.singular_values.len()
    }
}

/// A real `rows × cols` matrix `A : R^cols → R^rows`.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    entries: DMatrix<f64>,
    rank_tol: f64,
    svd_cache: OnceLock<SvdFactorization>,
}

impl DenseOperator {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        Self::with_rank_tol(entries, DEFAULT_RANK_TOL)
    }

    pub fn with_rank_tol(entries: DMatrix<f64>, rank_tol: f64) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidInput("operator must have at least one row and one column".into()));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite operator entry {bad}")));
        }
        if !(0.0..1.0).contains(&rank_tol) {
            return Err(Error::Contract(format!("rank_tol must lie in [0, 1), got {rank_tol}")));
        }
        Ok(Self {
            entries,
            rank_tol,
            svd_cache: OnceLock::new(),
        })
    }

    /// Builds an operator from row-major data.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    /// Reads a CSV matrix: one row per line, comma-separated decimals, no header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut data = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for record in rdr.records() {
            let record = record?;
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            match cols {
                None => cols = Some(record.len()),
                Some(c) if c != record.len() => {
                    return Err(Error::InvalidInput(format!(
                        "row {} has {} columns, expected {c}",
                        rows + 1,
                        record.len()
                    )))
                }
                Some(_) => {}
            }
            for field in record.iter() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("cannot parse {field:?} as a number")))?;
                data.push(v);
            }
            rows += 1;
        }
        let cols = cols.ok_or_else(|| Error::InvalidInput("empty matrix file".into()))?;
        Self::from_row_slice(rows, cols, &data)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    /// SHA-256 over the shape and the little-endian bytes of the row-major entries.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.rows() as u64).to_le_bytes());
        hasher.update((self.cols() as u64).to_le_bytes());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                hasher.update(self.entries[(i, j)].to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// The cached factorization, computed on first use.
    pub fn svd(&self) -> &SvdFactorization {
        self.svd_cache.get_or_init(|| compute_svd(&self.entries, self.rank_tol))
    }

    pub fn numerical_rank(&self) -> usize {
        self.svd().numerical_rank()
    }

    /// Operator norm `‖A‖ = σ_1` (zero for the zero matrix).
    pub fn norm(&self) -> f64 {
        self.svd().singular_values.iter().copied().next().unwrap_or(0.0)
    }

    /// Largest eigenvalue of `A*A`.
    pub fn lambda_max(&self) -> f64 {
        self.norm().powi(2)
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.cols(), x.len())?;
        Ok(&self.entries * x)
    }

    pub fn apply_adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.rows(), y.len())?;
        Ok(self.entries.tr_mul(y))
    }

    /// `Σ_i h(σ_i) ⟨u_i, y⟩ v_i` over the retained triples.
    pub fn spectral_apply(&self, y: &DVector<f64>, h: impl Fn(f64) -> f64) -> Result<DVector<f64>> {
        check_dim(self.rows(), y.len())?;
        let svd = self.svd();
        let mut coeffs = svd.left_vectors.tr_mul(y);
        for (c, &s) in coeffs.iter_mut().zip(svd.singular_values.iter()) {
            *c *= h(s);
        }
        Ok(&svd.right_vectors * coeffs)
    }

    /// `Σ_i h(σ_i) ⟨v_i, x⟩ v_i`, a function of `A*A` acting on the domain.
    pub fn domain_spectral_apply(&self, x: &DVector<f64>, h: impl Fn(f64) -> f64) -> Result<DVector<f64>> {
        check_dim(self.cols(), x.len())?;
        let svd = self.svd();
        let mut coeffs = svd.right_vectors.tr_mul(x);
        for (c, &s) in coeffs.iter_mut().zip(svd.singular_values.iter()) {
            *c *= h(s);
        }
        Ok(&svd.right_vectors * coeffs)
    }

    /// Minimal-norm least-squares solution `A⁺ y`.
    pub fn pinv_apply(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.spectral_apply(y, |s| 1.0 / s)
    }

    /// Orthogonal projection onto `ker(A)^⊥ = ran(A⁺)`, i.e. `A⁺A x`.
    pub fn proj_ker_perp(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.domain_spectral_apply(x, |_| 1.0)
    }

    /// Orthogonal projection onto `ker(A)`, i.e. `x − A⁺A x`.
    pub fn proj_ker(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(x - self.proj_ker_perp(x)?)
    }

    /// `(A*A)^μ w`; zero on the numerical kernel.
    pub fn frac_power_apply(&self, mu: f64, w: &DVector<f64>) -> Result<DVector<f64>> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Contract(format!("fractional power exponent must be positive, got {mu}")));
        }
        self.domain_spectral_apply(w, |s| s.powf(2.0 * mu))
    }

    /// Dense `A⁺`, mainly for diagnostics and tests.
    pub fn pinv_matrix(&self) -> DMatrix<f64> {
        let svd = self.svd();
        let mut v_scaled = svd.right_vectors.clone();
        for (mut col, &s) in v_scaled.column_iter_mut().zip(svd.singular_values.iter()) {
            col /= s;
        }
        v_scaled * svd.left_vectors.transpose()
    }
}

fn compute_svd(entries: &DMatrix<f64>, rank_tol: f64) -> SvdFactorization {
    let (m, n) = entries.shape();
    let a = faer::Mat::<f64>::from_fn(m, n, |i, j| entries[(i, j)]);
    // entries are finite by construction, so the iteration converges
    let svd = a.thin_svd().expect("SVD of a finite matrix");
    let (u, v) = (svd.U(), svd.V());
    let sigma: Vec<f64> = svd.S().column_vector().iter().copied().collect();

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let sigma_max = order.first().map(|&i| sigma[i]).unwrap_or(0.0);
    let cutoff = rank_tol * sigma_max;
    let kept: Vec<usize> = order.into_iter().filter(|&i| sigma[i] > cutoff && sigma[i] > 0.0).collect();

    let r = kept.len();
    SvdFactorization {
        left_vectors: DMatrix::from_fn(m, r, |i, k| u[(i, kept[k])]),
        singular_values: DVector::from_fn(r, |k, _| sigma[kept[k]]),
        right_vectors: DMatrix::from_fn(n, r, |j, k| v[(j, kept[k])]),
    }
}
