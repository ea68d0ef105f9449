//! Layered feed-forward networks and the null-space wrapper
//! `Φ = Id + P_ker(A) ∘ N`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::filters::{check_alpha, FilterSpec};
use crate::linop::DenseOperator;

/// Iteration cap for power iteration.
pub const POWER_MAX_ITER: usize = 10_000;
/// Relative residual `‖M*u − σv‖/σ` accepted as converged; it bounds the
/// relative error of the value.
const POWER_RESIDUAL_TOL: f64 = 1e-8;
/// Relative change of the estimate between iterations accepted as stagnation.
const POWER_CHANGE_TOL: f64 = 1e-13;
/// Extrapolated relative error of the value accepted as converged. Clustered
/// top singular values make the vectors converge slowly long after the value
/// has settled.
const POWER_VALUE_TOL: f64 = 1e-12;
/// Below this gain on a unit vector a map is treated as rounding noise.
const POWER_ZERO_TOL: f64 = 1e-14;

/// Componentwise 1-Lipschitz activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Relu => t.max(0.0),
            Activation::Identity => t,
            Activation::LeakyRelu { slope } => {
                if t > 0.0 {
                    t
                } else {
                    slope * t
                }
            }
        }
    }

    /// Derivative, with the subgradient at the kink taken from the left branch.
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::LeakyRelu { slope } => {
                if t > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    /// True for activations with a kink at zero.
    pub fn has_kink(self) -> bool {
        match self {
            Activation::Relu => true,
            Activation::Identity => false,
            Activation::LeakyRelu { slope } => slope != 1.0,
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu { slope } if !(slope > 0.0 && slope <= 1.0) => Err(Error::Contract(format!(
                "leaky ReLU slope must lie in (0, 1], got {slope}"
            ))),
            _ => Ok(()),
        }
    }
}

/// `x ↦ W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl AffineLayer {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        check_dim(weight.nrows(), bias.len())?;
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite layer parameter".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// `σ_L ∘ W_L ∘ ⋯ ∘ σ_1 ∘ W_1` mapping `R^n → R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    layers: Vec<AffineLayer>,
    activations: Vec<Activation>,
    seed: Option<u64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    /// `inputs[ℓ]` is the input of layer `ℓ`; the last entry is the network output.
    pub inputs: Vec<DVector<f64>>,
    pub pre_activations: Vec<DVector<f64>>,
}

impl FeedForwardNet {
    pub fn new(layers: Vec<AffineLayer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("network needs at least one layer".into()));
        }
        check_dim(layers.len(), activations.len())?;
        for pair in layers.windows(2) {
            check_dim(pair[0].out_dim(), pair[1].in_dim())?;
        }
        check_dim(layers[0].in_dim(), layers[layers.len() - 1].out_dim())?;
        for a in &activations {
            a.validate()?;
        }
        Ok(Self {
            layers,
            activations,
            seed: None,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(dims: &[usize], activations: Vec<Activation>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Contract("dims must list at least input and output".into()));
        }
        let layers = dims
            .windows(2)
            .map(|d| AffineLayer::new(DMatrix::zeros(d[1], d[0]), DVector::zeros(d[1])))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, activations)
    }

    /// Weights uniform in `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn glorot(dims: &[usize], activations: Vec<Activation>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims, activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.in_dim() + layer.out_dim()) as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-limit..=limit);
            }
        }
        net.seed = Some(seed);
        Ok(net)
    }

    /// Three layers of width `n`, ReLU on hidden layers, identity on the output.
    pub fn default_architecture(n: usize, seed: u64) -> Result<Self> {
        Self::glorot(&[n, n, n, n], default_activations(3), seed)
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AffineLayer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.dim()).chain(self.layers.iter().map(|l| l.out_dim())).collect()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer: weight (column-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        let mut it = params.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut h = x.clone();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let mut a = &layer.weight * &h + &layer.bias;
            a.apply(|t| *t = act.apply(*t));
            h = a;
        }
        Ok(h)
    }

    pub(crate) fn forward_trace(&self, x: &DVector<f64>) -> Result<ForwardTrace> {
        check_dim(self.dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.depth() + 1);
        let mut pre_activations = Vec::with_capacity(self.depth());
        inputs.push(x.clone());
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let a = &layer.weight * inputs.last().expect("nonempty") + &layer.bias;
            inputs.push(a.map(|t| act.apply(t)));
            pre_activations.push(a);
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations,
        })
    }

    /// Smallest distance of any kinked pre-activation to zero on input `x`.
    pub fn kink_margin(&self, x: &DVector<f64>) -> Result<f64> {
        let trace = self.forward_trace(x)?;
        Ok(trace
            .pre_activations
            .iter()
            .zip(&self.activations)
            .filter(|(_, act)| act.has_kink())
            .flat_map(|(a, _)| a.iter().map(|t| t.abs()))
            .fold(f64::INFINITY, f64::min))
    }

    /// `Π_ℓ ‖W_ℓ‖`, an upper bound on the Lipschitz constant.
    pub fn lipschitz_bound(&self) -> Result<f64> {
        let mut prod = 1.0;
        for l in &self.layers {
            prod *= spectral_norm(&l.weight)?.value;
        }
        Ok(prod)
    }
}

pub fn default_activations(depth: usize) -> Vec<Activation> {
    let mut acts = vec![Activation::Relu; depth];
    if let Some(last) = acts.last_mut() {
        *last = Activation::Identity;
    }
    acts
}

/// Largest singular value with its singular pair `M v = σ u`.
#[derive(Debug, Clone)]
pub struct SpectralNorm {
    pub value: f64,
    pub left: DVector<f64>,
    pub right: DVector<f64>,
    pub iterations: usize,
}

pub fn spectral_norm(m: &DMatrix<f64>) -> Result<SpectralNorm> {
    spectral_norm_from(m, None)
}

/// Power iteration on `M*M`, optionally warm-started from a right vector.
pub fn spectral_norm_from(m: &DMatrix<f64>, start: Option<&DVector<f64>>) -> Result<SpectralNorm> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    power_iteration(m.ncols(), |v| m * v, |u| m.tr_mul(u), start)
}

/// Power iteration for the largest singular value of a linear map given by
/// its action and the action of its adjoint. Maps whose gain stays below
/// `1e-14` are reported as numerically zero.
pub fn power_iteration(
    dim: usize,
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    apply_adjoint: impl Fn(&DVector<f64>) -> DVector<f64>,
    start: Option<&DVector<f64>>,
) -> Result<SpectralNorm> {
    let fallback = || pseudo_random_unit(dim);
    let mut v = match start {
        Some(s) if s.len() == dim && s.norm() > 0.0 => s.normalize(),
        _ => fallback(),
    };
    let mut restarted = false;
    let mut prev = 0.0;
    let mut prev_change = f64::INFINITY;
    for it in 1..=POWER_MAX_ITER {
        let mv = apply(&v);
        let sigma = mv.norm();
        if sigma == 0.0 {
            if restarted || start.is_none() {
                // v is a random direction, so the map vanishes identically
                let mut left = DVector::zeros(mv.len());
                if !left.is_empty() {
                    left[0] = 1.0;
                }
                return Ok(SpectralNorm {
                    value: 0.0,
                    left,
                    right: v,
                    iterations: it,
                });
            }
            v = fallback();
            restarted = true;
            continue;
        }
        let u = mv / sigma;
        let w = apply_adjoint(&u);
        let residual = (&w - sigma * &v).norm() / sigma;
        let change = (sigma - prev).abs() / sigma;
        let noise = sigma <= POWER_ZERO_TOL && prev <= POWER_ZERO_TOL;
        // geometric tail of the remaining increments
        let q = change / prev_change;
        let settled = it > 2 && q < 1.0 && change * q / (1.0 - q) <= POWER_VALUE_TOL;
        if residual <= POWER_RESIDUAL_TOL || (it > 1 && (change <= POWER_CHANGE_TOL || noise)) || settled {
            return Ok(SpectralNorm {
                value: sigma,
                left: u,
                right: v,
                iterations: it,
            });
        }
        prev = sigma;
        prev_change = change;
        let wn = w.norm();
        if wn == 0.0 && sigma <= POWER_ZERO_TOL {
            return Ok(SpectralNorm {
                value: sigma,
                left: u,
                right: v,
                iterations: it,
            });
        }
        if !(wn > 0.0) || !wn.is_finite() {
            return Err(Error::Numerical {
                message: "power iteration lost its direction".into(),
                estimate: sigma,
            });
        }
        v = w / wn;
    }
    Err(Error::Numerical {
        message: format!("power iteration did not converge in {POWER_MAX_ITER} iterations"),
        estimate: prev,
    })
}

fn pseudo_random_unit(dim: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_5ec7);
    let v = DVector::from_fn(dim, |_, _| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 });
    v.normalize()
}

/// How the kernel projector inside a null-space network is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectorMode {
    /// `P_ker(A) = Id − A⁺A`.
    Exact,
    /// `Q = Id − B_{φ(α)} A` for the given filter and `φ(α)`.
    Approximate { filter: FilterSpec, phi_alpha: f64 },
}

/// `Φ(x) = x + P(N(x))` with `P` the (possibly approximate) kernel projector.
#[derive(Debug, Clone)]
pub struct NullSpaceNetwork {
    base: FeedForwardNet,
    operator: Arc<DenseOperator>,
    mode: ProjectorMode,
}

impl NullSpaceNetwork {
    pub fn new(base: FeedForwardNet, operator: Arc<DenseOperator>, mode: ProjectorMode) -> Result<Self> {
        check_dim(operator.cols(), base.dim())?;
        if let ProjectorMode::Approximate { filter, phi_alpha } = &mode {
            check_alpha(*phi_alpha)?;
            filter.validate_for(operator.lambda_max())?;
        }
        Ok(Self { base, operator, mode })
    }

    pub fn exact(base: FeedForwardNet, operator: Arc<DenseOperator>) -> Result<Self> {
        Self::new(base, operator, ProjectorMode::Exact)
    }

    /// The wrapper around an all-zero network, i.e. the identity.
    pub fn identity(operator: Arc<DenseOperator>) -> Result<Self> {
        let n = operator.cols();
        Self::exact(FeedForwardNet::zeros(&[n, n], vec![Activation::Identity])?, operator)
    }

    pub fn base(&self) -> &FeedForwardNet {
        &self.base
    }

    pub fn operator(&self) -> &Arc<DenseOperator> {
        &self.operator
    }

    pub fn mode(&self) -> &ProjectorMode {
        &self.mode
    }

    pub fn with_mode(&self, mode: ProjectorMode) -> Result<Self> {
        Self::new(self.base.clone(), Arc::clone(&self.operator), mode)
    }

    /// Applies the kernel-side projector of this network to `v`.
    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.mode {
            ProjectorMode::Exact => self.operator.proj_ker(v),
            ProjectorMode::Approximate { filter, phi_alpha } => {
                Ok(v - filter.reconstruct_normal(&self.operator, *phi_alpha, v)?)
            }
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.base.forward(x)?;
        Ok(x + self.project(&n)?)
    }
}

/// On-disk form of a [`FeedForwardNet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Row-major weight matrices.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: Option<u64>,
    pub operator_hash: Option<String>,
}

impl NetworkDocument {
    pub fn from_net(net: &FeedForwardNet, operator_hash: Option<String>) -> Self {
        Self {
            dims: net.dims(),
            activations: net.activations.clone(),
            weights: net
                .layers
                .iter()
                .map(|l| l.weight.transpose().iter().copied().collect())
                .collect(),
            biases: net.layers.iter().map(|l| l.bias.iter().copied().collect()).collect(),
            seed: net.seed,
            operator_hash,
        }
    }

    pub fn to_net(&self) -> Result<FeedForwardNet> {
        if self.dims.len() < 2 {
            return Err(Error::InvalidInput("network file lists fewer than two dims".into()));
        }
        let depth = self.dims.len() - 1;
        check_dim(depth, self.weights.len())?;
        check_dim(depth, self.biases.len())?;
        let layers = (0..depth)
            .map(|l| {
                let (rows, cols) = (self.dims[l + 1], self.dims[l]);
                check_dim(rows * cols, self.weights[l].len())?;
                AffineLayer::new(
                    DMatrix::from_row_slice(rows, cols, &self.weights[l]),
                    DVector::from_column_slice(&self.biases[l]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = FeedForwardNet::new(layers, self.activations.clone())?;
        net.seed = self.seed;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Fails unless the document was saved for `op`.
    pub fn check_operator(&self, op: &DenseOperator) -> Result<()> {
        match &self.operator_hash {
            Some(h) if *h == op.content_hash() => Ok(()),
            Some(h) => Err(Error::Integrity(format!(
                "network was trained for operator {h}, problem operator is {}",
                op.content_hash()
            ))),
            None => Err(Error::Integrity("network file carries no operator hash".into())),
        }
    }
}
