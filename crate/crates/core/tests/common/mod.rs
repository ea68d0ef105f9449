#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use nullspace_reg::training::loss;
use nullspace_reg::{Activation, DenseOperator, FeedForwardNet, TrainConfig, TrainingSet};

pub fn gaussian_matrix(m: usize, n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Product of Gaussian `m×r` and `r×n` factors; rank `r` almost surely.
pub fn rank_deficient(m: usize, n: usize, r: usize, rng: &mut impl Rng) -> DenseOperator {
    DenseOperator::new(gaussian_matrix(m, r, rng) * gaussian_matrix(r, n, rng)).unwrap()
}

/// Frobenius defects of the four Moore–Penrose conditions, in order
/// `AA⁺A − A`, `A⁺AA⁺ − A⁺`, `AA⁺ − (AA⁺)*`, `A⁺A − (A⁺A)*`.
pub fn moore_penrose_defects(op: &DenseOperator) -> [f64; 4] {
    let a = op.entries();
    let p = op.pinv_matrix();
    let ap = a * &p;
    let pa = &p * a;
    [
        (&ap * a - a).norm(),
        (&pa * &p - &p).norm(),
        (&ap - ap.transpose()).norm(),
        (&pa - pa.transpose()).norm(),
    ]
}

/// Signs of every pre-activation feeding a kinked activation.
pub fn kink_pattern(net: &FeedForwardNet, x: &DVector<f64>) -> Vec<bool> {
    let mut a = x.clone();
    let mut pattern = Vec::new();
    for (layer, act) in net.layers().iter().zip(net.activations()) {
        let z = &layer.weight * &a + &layer.bias;
        if act.has_kink() {
            pattern.extend(z.iter().map(|v| *v > 0.0));
        }
        a = z.map(|v| act.apply(v));
    }
    pattern
}

pub struct GradCheck {
    /// `max_i |g_i − fd_i| / ‖g‖_∞`.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central finite differences with step `h`, skipping parameters whose
/// perturbation flips an activation pattern on any training sample.
pub fn finite_difference_check(
    net: &FeedForwardNet,
    op: &DenseOperator,
    set: &TrainingSet,
    config: &TrainConfig,
    h: f64,
) -> GradCheck {
    let analytic = nullspace_reg::training::grad(net, op, set, config).unwrap().flatten();
    let theta = net.params();
    assert_eq!(analytic.len(), theta.len());
    let base_patterns: Vec<Vec<bool>> = set.phantoms().iter().map(|x| inputs_pattern(net, op, x, config)).collect();

    let mut probe = net.clone();
    let mut eval = |t: &[f64]| -> (f64, bool) {
        probe.set_params(t).unwrap();
        let same = set
            .phantoms()
            .iter()
            .zip(&base_patterns)
            .all(|(x, p)| inputs_pattern(&probe, op, x, config) == *p);
        (loss(&probe, op, set, config).unwrap().total, same)
    };

    let scale = analytic.iter().fold(0.0_f64, |m, g| m.max(g.abs())).max(f64::MIN_POSITIVE);
    let (mut worst, mut checked, mut skipped) = (0.0_f64, 0, 0);
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] = theta[i] + h;
        let (fp, same_p) = eval(&t);
        t[i] = theta[i] - h;
        let (fm, same_m) = eval(&t);
        if !(same_p && same_m) {
            skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / scale);
        checked += 1;
    }
    GradCheck {
        max_rel_error: worst,
        checked,
        skipped,
    }
}

fn inputs_pattern(net: &FeedForwardNet, op: &DenseOperator, x: &DVector<f64>, config: &TrainConfig) -> Vec<bool> {
    use nullspace_reg::TrainMode;
    let z = match &config.mode {
        TrainMode::ExactProjector => op.proj_ker_perp(x).unwrap(),
        TrainMode::Regularized { alpha, filter } => filter.reconstruct_normal(op, *alpha, x).unwrap(),
    };
    kink_pattern(net, &z)
}

/// Random network `n → h₁ → … → n` with Glorot weights and random biases.
pub fn random_net(n: usize, hidden: &[usize], rng: &mut impl Rng) -> FeedForwardNet {
    let mut dims = vec![n];
    dims.extend_from_slice(hidden);
    dims.push(n);
    let depth = dims.len() - 1;
    let mut acts = vec![Activation::Relu; depth - 1];
    acts.push(Activation::Identity);
    let mut net = FeedForwardNet::glorot(&dims, acts, rng.random()).unwrap();
    for layer in net.layers_mut() {
        let len = layer.bias.len();
        layer.bias = DVector::from_fn(len, |_, _| rng.random_range(-0.5..0.5));
    }
    net
}
