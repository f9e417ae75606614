use covae_core::covae::pseudo_diagonal_prior;
use covae_core::gaussian::{
    condition, fuse_poe, kl_full, participation_ratio, standard_normal_matrix, BlockGaussian, ConditioningQuery,
    DiagonalGaussian, LatentLayout,
};
use covae_core::linalg::{cholesky, Matrix};
use covae_core::nets::{Activation, JointEncoder, Mlp, MlpSpec};
use covae_core::synthdata::build_sigma;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spd(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = standard_normal_matrix(d, d, &mut rng);
    a.matmul_t(&a).unwrap().scale(1.0 / d as f64).add_diag(0.2)
}

fn gaussian(dims: Vec<usize>, seed: u64) -> BlockGaussian {
    let layout = LatentLayout::new(dims).unwrap();
    let d = layout.total();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mean = standard_normal_matrix(1, d, &mut rng).into_vec();
    BlockGaussian::from_covariance(layout, mean, &spd(d, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prior_blocks_are_standard_normal(d1 in 1usize..6, d2 in 1usize..6, rho in proptest::collection::vec(0.0f64..0.99, 5)) {
        let layout = LatentLayout::new(vec![d1, d2]).unwrap();
        let s = pseudo_diagonal_prior(&layout, &rho);
        for k in 0..2 {
            let r = layout.range(k);
            let idx: Vec<usize> = r.collect();
            prop_assert_eq!(s.select(&idx, &idx), Matrix::identity(layout.dim(k)));
        }
    }

    #[test]
    fn sigma_is_pd_without_jitter(d1 in 1usize..8, d2 in 1usize..8, rho in 0.0f64..0.999) {
        let s = build_sigma(d1, d2, rho).unwrap();
        prop_assert!(cholesky(&s).is_ok());
    }

    #[test]
    fn independent_blocks_condition_to_marginal(d1 in 1usize..4, d2 in 1usize..4, seed in any::<u64>()) {
        let (a, b) = (spd(d1, seed), spd(d2, seed.wrapping_add(1)));
        let cov = Matrix::from_fn(d1 + d2, d1 + d2, |i, j| match (i < d1, j < d1) {
            (true, true) => a[(i, j)],
            (false, false) => b[(i - d1, j - d1)],
            _ => 0.0,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = standard_normal_matrix(1, d1 + d2, &mut rng).into_vec();
        let layout = LatentLayout::new(vec![d1, d2]).unwrap();
        let g = BlockGaussian::from_covariance(layout.clone(), mean.clone(), &cov).unwrap();
        let obs = standard_normal_matrix(1, d1, &mut rng).into_vec();
        let c = condition(&g, &ConditioningQuery::new(&layout, vec![0], obs).unwrap()).unwrap();
        for (x, y) in c.mean().iter().zip(&mean[d1..]) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!(c.covariance().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn bivariate_conditional_variance(rho in -0.99f64..0.99, z in -3.0f64..3.0, step in 0.001f64..0.5) {
        let var = |r: f64| {
            let layout = LatentLayout::new(vec![1, 1]).unwrap();
            let cov = Matrix::from_rows(&[[1.0, r], [r, 1.0]]);
            let g = BlockGaussian::zero_mean(layout.clone(), &cov).unwrap();
            let c = condition(&g, &ConditioningQuery::new(&layout, vec![0], vec![z]).unwrap()).unwrap();
            (c.covariance()[(0, 0)], c.mean()[0])
        };
        let (v, m) = var(rho);
        prop_assert!((v - (1.0 - rho * rho)).abs() < 1e-12);
        prop_assert!((m - rho * z).abs() < 1e-12);
        let further = (rho.abs() + step).min(0.995);
        if further > rho.abs() {
            prop_assert!(var(further).0 < v);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(d1 in 1usize..4, d2 in 1usize..4, s1 in any::<u64>(), s2 in any::<u64>()) {
        let q = gaussian(vec![d1, d2], s1);
        let p = gaussian(vec![d1, d2], s2);
        prop_assert!(kl_full(&q, &p).unwrap() >= -1e-12);
        prop_assert!(kl_full(&q, &q).unwrap().abs() < 1e-10);
    }

    #[test]
    fn poe_precisions_add(
        means in proptest::collection::vec(-3.0f64..3.0, 9),
        log_vars in proptest::collection::vec(-4.0f64..4.0, 9),
        prior in any::<bool>(),
    ) {
        let experts: Vec<DiagonalGaussian> = (0..3)
            .map(|k| DiagonalGaussian::new(means[3 * k..3 * k + 3].to_vec(), log_vars[3 * k..3 * k + 3].to_vec()).unwrap())
            .collect();
        let fused = fuse_poe(&experts, prior).unwrap();
        for j in 0..3 {
            let want: f64 = experts.iter().map(|e| 1.0 / e.var()[j]).sum::<f64>() + if prior { 1.0 } else { 0.0 };
            prop_assert!((1.0 / fused.var()[j] - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn participation_ratio_is_bounded(d in 1usize..10, seed in any::<u64>()) {
        let pr = participation_ratio(&spd(d, seed)).unwrap();
        prop_assert!(pr >= 1.0 - 1e-12 && pr <= d as f64 + 1e-12);
    }

    #[test]
    fn joint_head_is_pd_for_any_finite_weights(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut enc = JointEncoder::new(3, &[4], 4, Activation::Tanh, seed).unwrap();
        for p in enc.net.params_mut() {
            *p = p.scale(scale);
        }
        let layout = LatentLayout::new(vec![2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal_matrix(1, 3, &mut rng).scale(scale).into_vec();
        let g = enc.encode_one(&x, &layout).unwrap();
        prop_assert!(g.chol().logdet().is_finite());
        prop_assert!(g.chol().lower().diag().iter().all(|&v| v >= 1e-4));
    }

    #[test]
    fn forward_pass_is_deterministic(seed in any::<u64>(), relu in any::<bool>()) {
        let act = if relu { Activation::Relu } else { Activation::Tanh };
        let net = Mlp::init(MlpSpec::new(vec![3, 5, 2], act, seed).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal_matrix(7, 3, &mut rng);
        let a = net.forward(&x).unwrap();
        let b = net.clone().forward(&x).unwrap();
        prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
