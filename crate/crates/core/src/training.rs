//! Training of the network inside a null-space wrapper.
//!
//! The data term compares each phantom `x_n` with the wrapper applied to a
//! reconstruction-side input `z_n`:
//!
//! * exact mode: `z_n = A⁺A x_n`, kernel map `K = Id − A⁺A`;
//! * regularized mode: `z_n = B_α A x_n`, kernel map `K = Id − B_α A`.
//!
//! With `r_n = x_n − z_n − K N(z_n)` the loss is
//! `½ Σ_n ‖r_n‖² + reg_weight · Π_ℓ ‖W_ℓ‖`. Both kernel maps are functions of
//! `A*A` and therefore self-adjoint, so the gradient with respect to the
//! network output is `−K r_n`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::filters::{check_alpha, FilterSpec};
use crate::linop::DenseOperator;
use crate::network::{spectral_norm_from, FeedForwardNet};

/// Halvings allowed per epoch before training is declared stalled.
pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone)]
pub struct TrainingSet {
    phantoms: Vec<DVector<f64>>,
}

impl TrainingSet {
    pub fn new(phantoms: Vec<DVector<f64>>) -> Result<Self> {
        let first = phantoms
            .first()
            .ok_or_else(|| Error::Contract("training set needs at least one phantom".into()))?;
        let n = first.len();
        for p in &phantoms {
            check_dim(n, p.len())?;
        }
        Ok(Self { phantoms })
    }

    pub fn phantoms(&self) -> &[DVector<f64>] {
        &self.phantoms
    }

    pub fn len(&self) -> usize {
        self.phantoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phantoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.phantoms[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    ExactProjector,
    Regularized { alpha: f64, filter: FilterSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Weight of the layer-norm product penalty.
    pub reg_weight: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::Contract(format!("reg_weight must be nonnegative, got {}", self.reg_weight)));
        }
        if let TrainMode::Regularized { alpha, .. } = &self.mode {
            check_alpha(*alpha)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_term: f64,
    pub reg_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(data_term: f64, reg_term: f64) -> Self {
        Self {
            data_term,
            reg_term,
            total: data_term + reg_term,
        }
    }
}

/// Per-layer gradients, aligned with the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradient {
    fn zeros_like(net: &FeedForwardNet) -> Self {
        Self {
            weights: net.layers().iter().map(|l| DMatrix::zeros(l.out_dim(), l.in_dim())).collect(),
            biases: net.layers().iter().map(|l| DVector::zeros(l.out_dim())).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Flattened in the same order as [`FeedForwardNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn norm_squared(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_squared()).sum::<f64>()
            + self.biases.iter().map(|b| b.norm_squared()).sum::<f64>()
    }
}

/// Reconstruction-side input map and kernel-side map of a training mode.
#[derive(Clone, Copy)]
enum Pipeline<'a> {
    Exact(&'a DenseOperator),
    Regularized(&'a DenseOperator, &'a FilterSpec, f64),
}

impl<'a> Pipeline<'a> {
    fn new(op: &'a DenseOperator, mode: &'a TrainMode) -> Result<Self> {
        Ok(match mode {
            TrainMode::ExactProjector => Pipeline::Exact(op),
            TrainMode::Regularized { alpha, filter } => {
                check_alpha(*alpha)?;
                filter.validate_for(op.lambda_max())?;
                Pipeline::Regularized(op, filter, *alpha)
            }
        })
    }

    fn op(&self) -> &DenseOperator {
        match self {
            Pipeline::Exact(op) | Pipeline::Regularized(op, _, _) => op,
        }
    }

    fn input(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Pipeline::Exact(op) => op.proj_ker_perp(x),
            Pipeline::Regularized(op, f, a) => f.reconstruct_normal(op, *a, x),
        }
    }

    fn kernel(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Pipeline::Exact(op) => op.proj_ker(v),
            Pipeline::Regularized(op, f, a) => Ok(v - f.reconstruct_normal(op, *a, v)?),
        }
    }
}

/// Spectral norms of all layers plus their singular pairs.
struct LayerNorms {
    values: Vec<f64>,
    pairs: Vec<(DVector<f64>, DVector<f64>)>,
}

fn layer_norms(net: &FeedForwardNet, warm: &mut [Option<DVector<f64>>]) -> Result<LayerNorms> {
    let mut values = Vec::with_capacity(net.depth());
    let mut pairs = Vec::with_capacity(net.depth());
    for (layer, start) in net.layers().iter().zip(warm.iter_mut()) {
        let s = spectral_norm_from(&layer.weight, start.as_ref())?;
        *start = Some(s.right.clone());
        values.push(s.value);
        pairs.push((s.left, s.right));
    }
    Ok(LayerNorms { values, pairs })
}

fn reg_term(net: &FeedForwardNet, reg_weight: f64, warm: &mut [Option<DVector<f64>>]) -> Result<f64> {
    if reg_weight == 0.0 {
        return Ok(0.0);
    }
    Ok(reg_weight * layer_norms(net, warm)?.values.iter().product::<f64>())
}

fn sample_residual(net: &FeedForwardNet, pipe: Pipeline<'_>, x: &DVector<f64>) -> Result<DVector<f64>> {
    let z = pipe.input(x)?;
    let n = net.forward(&z)?;
    Ok(x - z - pipe.kernel(&n)?)
}

fn data_term(net: &FeedForwardNet, pipe: Pipeline<'_>, set: &TrainingSet) -> Result<f64> {
    check_dim(pipe.op().cols(), set.dim())?;
    check_dim(pipe.op().cols(), net.dim())?;
    let parts = set
        .phantoms()
        .par_iter()
        .map(|x| sample_residual(net, pipe, x).map(|r| r.norm_squared()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(0.5 * parts.iter().sum::<f64>())
}

fn loss_with(
    net: &FeedForwardNet,
    pipe: Pipeline<'_>,
    set: &TrainingSet,
    reg_weight: f64,
    warm: &mut [Option<DVector<f64>>],
) -> Result<LossBreakdown> {
    let data = data_term(net, pipe, set)?;
    Ok(LossBreakdown::new(data, reg_term(net, reg_weight, warm)?))
}

/// `½ Σ ‖x_n − Φ(A⁺A x_n)‖² + reg_weight · Π ‖W_ℓ‖` with the exact projector.
pub fn loss_exact(net: &FeedForwardNet, op: &DenseOperator, set: &TrainingSet, reg_weight: f64) -> Result<LossBreakdown> {
    let mut warm = vec![None; net.depth()];
    loss_with(net, Pipeline::Exact(op), set, reg_weight, &mut warm)
}

/// Same as [`loss_exact`] with `A⁺A` replaced by `B_α A`.
pub fn loss_regularized(
    net: &FeedForwardNet,
    op: &DenseOperator,
    filter: &FilterSpec,
    alpha: f64,
    set: &TrainingSet,
    reg_weight: f64,
) -> Result<LossBreakdown> {
    let mode = TrainMode::Regularized {
        alpha,
        filter: filter.clone(),
    };
    let mut warm = vec![None; net.depth()];
    loss_with(net, Pipeline::new(op, &mode)?, set, reg_weight, &mut warm)
}

/// Loss for the mode selected by `config`.
pub fn loss(net: &FeedForwardNet, op: &DenseOperator, set: &TrainingSet, config: &TrainConfig) -> Result<LossBreakdown> {
    let mut warm = vec![None; net.depth()];
    loss_with(net, Pipeline::new(op, &config.mode)?, set, config.reg_weight, &mut warm)
}

fn sample_gradient(net: &FeedForwardNet, pipe: Pipeline<'_>, x: &DVector<f64>) -> Result<(f64, Gradient)> {
    let z = pipe.input(x)?;
    let trace = net.forward_trace(&z)?;
    let out = trace.inputs.last().expect("trace has output");
    let r = x - &z - pipe.kernel(out)?;
    // d(½‖r‖²)/dN = −K* r = −K r
    let mut upstream = -pipe.kernel(&r)?;

    let mut grad = Gradient::zeros_like(net);
    for l in (0..net.depth()).rev() {
        let act = net.activations()[l];
        let delta = upstream.zip_map(&trace.pre_activations[l], |g, a| g * act.derivative(a));
        grad.weights[l] = &delta * trace.inputs[l].transpose();
        if l > 0 {
            upstream = net.layers()[l].weight.tr_mul(&delta);
        }
        grad.biases[l] = delta;
    }
    Ok((0.5 * r.norm_squared(), grad))
}

fn loss_and_grad(
    net: &FeedForwardNet,
    pipe: Pipeline<'_>,
    set: &TrainingSet,
    reg_weight: f64,
    warm: &mut [Option<DVector<f64>>],
) -> Result<(LossBreakdown, Gradient)> {
    check_dim(pipe.op().cols(), set.dim())?;
    check_dim(pipe.op().cols(), net.dim())?;
    let per_sample = set
        .phantoms()
        .par_iter()
        .map(|x| sample_gradient(net, pipe, x))
        .collect::<Result<Vec<_>>>()?;

    // fixed-order reduction keeps results independent of scheduling
    let mut grad = Gradient::zeros_like(net);
    let mut data = 0.0;
    for (d, g) in &per_sample {
        data += d;
        grad.add_assign(g);
    }

    let mut reg = 0.0;
    if reg_weight != 0.0 {
        let norms = layer_norms(net, warm)?;
        reg = reg_weight * norms.values.iter().product::<f64>();
        for (l, (u, v)) in norms.pairs.iter().enumerate() {
            let others: f64 = norms
                .values
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != l)
                .map(|(_, s)| s)
                .product();
            grad.weights[l] += (reg_weight * others) * u * v.transpose();
        }
    }
    Ok((LossBreakdown::new(data, reg), grad))
}

/// Gradient of the loss selected by `config` with respect to every weight and bias.
pub fn grad(net: &FeedForwardNet, op: &DenseOperator, set: &TrainingSet, config: &TrainConfig) -> Result<Gradient> {
    let mut warm = vec![None; net.depth()];
    Ok(loss_and_grad(net, Pipeline::new(op, &config.mode)?, set, config.reg_weight, &mut warm)?.1)
}

fn step(net: &FeedForwardNet, g: &Gradient, size: f64) -> FeedForwardNet {
    let mut next = net.clone();
    for ((layer, gw), gb) in next.layers_mut().iter_mut().zip(&g.weights).zip(&g.biases) {
        layer.weight -= size * gw;
        layer.bias -= size * gb;
    }
    next
}

/// Full-batch gradient descent with step halving on loss increase.
///
/// Returns the trained network and `epochs + 1` loss values, the first one
/// for the initial network. Each epoch starts from at most twice the last
/// accepted step, capped at the configured learning rate.
pub fn train(
    net: FeedForwardNet,
    op: &DenseOperator,
    set: &TrainingSet,
    config: &TrainConfig,
) -> Result<(FeedForwardNet, Vec<LossBreakdown>)> {
    config.validate()?;
    let pipe = Pipeline::new(op, &config.mode)?;
    let mut warm = vec![None; net.depth()];
    let mut net = net;
    let (mut current, mut g) = loss_and_grad(&net, pipe, set, config.reg_weight, &mut warm)?;
    let mut history = Vec::with_capacity(config.epochs + 1);
    history.push(current);
    let mut step_size = config.learning_rate;

    for epoch in 1..=config.epochs {
        let mut size = step_size;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = step(&net, &g, size);
            let trial_loss = loss_with(&candidate, pipe, set, config.reg_weight, &mut warm)?;
            if trial_loss.total <= current.total {
                accepted = Some(candidate);
                break;
            }
            size *= 0.5;
        }
        let Some(next) = accepted else {
            return Err(Error::TrainingStalled {
                epoch,
                halvings: MAX_HALVINGS,
                history,
            });
        };
        net = next;
        step_size = (2.0 * size).min(config.learning_rate);
        let (l, ng) = loss_and_grad(&net, pipe, set, config.reg_weight, &mut warm)?;
        current = l;
        g = ng;
        history.push(current);
    }
    Ok((net, history))
}
