mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nullspace_reg::harness::problem::{add_noise, make_problem, ProblemSpec};
use nullspace_reg::regpipeline::approx_projector;
use nullspace_reg::training::{loss_exact, loss_regularized};
use nullspace_reg::{DenseOperator, FilterSpec, MRegularizer, NullSpaceNetwork, TrainingSet};

/// `U diag(σ) V*` with orthonormal factors and `σ` drawn from `[lo, 1]`.
fn conditioned(m: usize, n: usize, r: usize, lo: f64, rng: &mut impl Rng) -> DenseOperator {
    let u = common::gaussian_matrix(m, m, rng).qr().q().columns(0, r).into_owned();
    let v = common::gaussian_matrix(n, n, rng).qr().q().columns(0, r).into_owned();
    let s = DVector::from_fn(r, |_, _| rng.random_range(lo..=1.0));
    DenseOperator::new(u * DMatrix::from_diagonal(&s) * v.transpose()).unwrap()
}

fn filters(lambda_max: f64) -> [FilterSpec; 3] {
    [FilterSpec::tikhonov(), FilterSpec::tsvd(), FilterSpec::landweber_for(lambda_max)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moore_penrose_axioms(seed in any::<u64>(), wide in any::<bool>(), r in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = if wide { (5, 8) } else { (8, 5) };
        let op = common::rank_deficient(m, n, r, &mut rng);
        let d = common::moore_penrose_defects(&op);
        prop_assert!(d[0] <= 1e-9 && d[1] <= 1e-9, "{d:?}");
        prop_assert!(d[2] <= 1e-10 && d[3] <= 1e-10, "{d:?}");
        prop_assert_eq!(op.numerical_rank(), r);
    }

    #[test]
    fn svd_factors_are_orthonormal(seed in any::<u64>(), m in 2usize..9, n in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.random_range(1..=m.min(n));
        let op = common::rank_deficient(m, n, r, &mut rng);
        let svd = op.svd();
        let k = svd.singular_values.len();
        let id = DMatrix::<f64>::identity(k, k);
        prop_assert!((svd.left_vectors.tr_mul(&svd.left_vectors) - &id).amax() <= 1e-10);
        prop_assert!((svd.right_vectors.tr_mul(&svd.right_vectors) - &id).amax() <= 1e-10);
        let rebuilt = &svd.left_vectors * DMatrix::from_diagonal(&svd.singular_values) * svd.right_vectors.transpose();
        prop_assert!((rebuilt - op.entries()).norm() <= 1e-10 * op.entries().norm());
    }

    #[test]
    fn kernel_projector_invariants(seed in any::<u64>(), wide in any::<bool>(), r in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = if wide { (5, 8) } else { (8, 5) };
        let op = common::rank_deficient(m, n, r, &mut rng);
        let x = common::gaussian_vector(n, &mut rng);
        let x2 = common::gaussian_vector(n, &mut rng);
        let px = op.proj_ker(&x).unwrap();
        prop_assert!((op.proj_ker(&px).unwrap() - &px).norm() <= 1e-10);
        prop_assert!(px.dot(&op.pinv_apply(&op.apply(&x2).unwrap()).unwrap()).abs() <= 1e-9);
        prop_assert!(op.apply(&px).unwrap().norm() <= 1e-9 * op.norm() * x.norm());
        prop_assert!((op.proj_ker_perp(&x).unwrap() + &px - &x).norm() <= 1e-12 * x.norm().max(1.0));
    }

    #[test]
    fn frac_power_one_is_normal_operator(seed in any::<u64>(), r in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = common::rank_deficient(5, 8, r, &mut rng);
        let x = op.apply_adjoint(&common::gaussian_vector(5, &mut rng)).unwrap();
        let lhs = op.frac_power_apply(1.0, &x).unwrap();
        let rhs = op.apply_adjoint(&op.apply(&x).unwrap()).unwrap();
        prop_assert!((lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
    }

    #[test]
    fn reconstruction_is_linear_and_kernel_free(seed in any::<u64>(), alpha in 1e-6f64..1.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = common::rank_deficient(5, 8, 3, &mut rng);
        let y1 = common::gaussian_vector(5, &mut rng);
        let y2 = common::gaussian_vector(5, &mut rng);
        for f in filters(op.lambda_max()) {
            let r1 = f.reconstruct(&op, alpha, &y1).unwrap();
            let r2 = f.reconstruct(&op, alpha, &y2).unwrap();
            let mix = f.reconstruct(&op, alpha, &(&y1 * a + &y2 * b)).unwrap();
            let scale = (r1.norm() * a.abs() + r2.norm() * b.abs()).max(1.0);
            prop_assert!((mix - (r1.clone() * a + r2 * b)).norm() <= 1e-10 * scale, "{}", f.label);
            prop_assert!(op.proj_ker(&r1).unwrap().norm() <= 1e-10 * r1.norm().max(1.0), "{}", f.label);
        }
    }

    #[test]
    fn filters_converge_pointwise_on_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = conditioned(5, 8, 3, 0.1, &mut rng);
        let y = op.apply(&common::gaussian_vector(8, &mut rng)).unwrap();
        let target = op.pinv_apply(&y).unwrap();
        let smin2 = op.svd().singular_values.min().powi(2);
        for f in [FilterSpec::tikhonov(), FilterSpec::landweber_for(op.lambda_max())] {
            let errs: Vec<f64> = (1..=10)
                .map(|k| (f.reconstruct(&op, 10f64.powi(-k), &y).unwrap() - &target).norm())
                .collect();
            prop_assert!(errs.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-14), "{} {errs:?}", f.label);
            prop_assert!(errs[9] <= 1e-6, "{} {errs:?}", f.label);
        }
        let tsvd = FilterSpec::tsvd().reconstruct(&op, 0.5 * smin2, &y).unwrap();
        prop_assert!((tsvd - &target).norm() <= 1e-12 * target.norm().max(1.0));
    }

    #[test]
    fn null_space_network_is_data_consistent(seed in any::<u64>(), r in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = Arc::new(common::rank_deficient(5, 8, r, &mut rng));
        let net = common::random_net(8, &[6, 7], &mut rng);
        let phi = NullSpaceNetwork::exact(net.clone(), Arc::clone(&op)).unwrap();
        let x = common::gaussian_vector(8, &mut rng) * 3.0;
        let out = phi.apply(&x).unwrap();
        let nx = net.forward(&x).unwrap();
        let bound = 1e-9 * op.norm() * (x.norm() + nx.norm());
        prop_assert!((op.apply(&out).unwrap() - op.apply(&x).unwrap()).norm() <= bound);
        prop_assert!((op.proj_ker_perp(&out).unwrap() - op.proj_ker_perp(&x).unwrap()).norm() <= 1e-9 * (x.norm() + nx.norm()));
    }

    #[test]
    fn lipschitz_bound_dominates(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = common::random_net(6, &[9, 4], &mut rng);
        let l = net.lipschitz_bound().unwrap();
        let x = common::gaussian_vector(6, &mut rng);
        let x2 = common::gaussian_vector(6, &mut rng);
        let gap = (net.forward(&x).unwrap() - net.forward(&x2).unwrap()).norm();
        prop_assert!(gap <= l * (x - x2).norm() + 1e-9);
    }

    #[test]
    fn regularized_loss_tends_to_exact_loss(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = conditioned(4, 7, 3, 0.2, &mut rng);
        let net = common::random_net(7, &[5], &mut rng);
        let set = TrainingSet::new((0..4).map(|_| common::gaussian_vector(7, &mut rng)).collect()).unwrap();
        let exact = loss_exact(&net, &op, &set, 0.1).unwrap();
        let smin2 = op.svd().singular_values.min().powi(2);
        let tsvd = loss_regularized(&net, &op, &FilterSpec::tsvd(), 0.5 * smin2, &set, 0.1).unwrap();
        prop_assert!((tsvd.total - exact.total).abs() <= 1e-9 * exact.total.max(1.0));
        let gaps: Vec<f64> = [1e-2, 1e-4, 1e-6, 1e-8]
            .iter()
            .map(|&a| (loss_regularized(&net, &op, &FilterSpec::tikhonov(), a, &set, 0.1).unwrap().total - exact.total).abs())
            .collect();
        prop_assert!(gaps[3] <= 1e-5 * exact.total.max(1.0), "{gaps:?}");
    }

    #[test]
    fn two_step_bounds(seed in any::<u64>(), alpha in 1e-4f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = Arc::new(common::rank_deficient(5, 8, 3, &mut rng));
        let net = common::random_net(8, &[6], &mut rng);
        let phi = NullSpaceNetwork::exact(net.clone(), Arc::clone(&op)).unwrap();
        let reg = MRegularizer::new(FilterSpec::tikhonov(), Arc::clone(&op), phi).unwrap();
        let x = common::gaussian_vector(8, &mut rng);
        let y = op.apply(&x).unwrap();
        let y_delta = add_noise(&y, 0.05, seed).unwrap();

        // range part of the two-step output is the classical reconstruction
        let two = reg.reconstruct_two_step(alpha, &y_delta).unwrap();
        let classical = FilterSpec::tikhonov().reconstruct(&op, alpha, &y_delta).unwrap();
        prop_assert!((op.proj_ker_perp(&two).unwrap() - &classical).norm() <= 1e-10 * two.norm().max(1.0));

        // Lipschitz composition bound against the M-generalized inverse
        let lip = net.lipschitz_bound().unwrap();
        let dist = (&two - reg.m_generalized_inverse(&y).unwrap()).norm();
        let inner = (&classical - op.pinv_apply(&y).unwrap()).norm();
        prop_assert!(dist <= (1.0 + lip) * inner + 1e-9);

        // approximate projector stays within its measured deviation
        let q = approx_projector(Arc::clone(&op), FilterSpec::tikhonov(), alpha * alpha).unwrap();
        let approx = reg.reconstruct_two_step_with(alpha, &q, &y_delta).unwrap();
        let n_out = net.forward(&classical).unwrap().norm();
        prop_assert!((approx - &two).norm() <= q.deviation().unwrap() * n_out + 1e-9);
    }

    #[test]
    fn noise_has_exact_norm(seed in any::<u64>(), delta in 1e-8f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = common::gaussian_vector(7, &mut rng);
        let noisy = add_noise(&y, delta, seed).unwrap();
        prop_assert!(((noisy - &y).norm() - delta).abs() <= 1e-12 * delta.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_problems_have_the_requested_kernel(seed in any::<u64>(), m in 3usize..12, extra in 1usize..6) {
        let n = m + extra;
        let rank = m - 1;
        let spec = ProblemSpec::random(m, n, rank, seed);
        let op = make_problem(&spec).unwrap();
        prop_assert_eq!(op.numerical_rank(), rank);
        let again = make_problem(&spec).unwrap();
        prop_assert_eq!(op.entries(), again.entries());
    }
}
