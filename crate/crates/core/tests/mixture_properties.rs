use cholvi::gauss_vi::{draw_standard_normal, gaussian_kl, sample_reparam, GaussianApprox};
use cholvi::mixture_vi::*;
use cholvi::model::*;
use cholvi::optim::{run_mixture, RunConfig, StepSchedule};
use cholvi::EstimatorKind;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mixture(rng: &mut ChaCha8Rng, d: usize, k: usize) -> MixtureApprox {
    let comps = (0..k)
        .map(|_| {
            let chol = DMatrix::from_fn(d, d, |i, j| {
                if i == j {
                    rng.random_range(0.3..1.5)
                } else if i > j {
                    rng.random_range(-0.4..0.4)
                } else {
                    0.0
                }
            });
            GaussianApprox::new(draw_standard_normal(d, rng) * 2.0, chol).unwrap()
        })
        .collect();
    let logits = DVector::from_fn(k - 1, |_, _| rng.random_range(-2.0..2.0));
    MixtureApprox::new(comps, logits).unwrap()
}

fn bimodal() -> GaussianMixtureTarget {
    make_bimodal_target(vec![dvector![-2.0], dvector![2.0]], vec![0.5, 0.5], vec![0.3, 0.7]).unwrap()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn responsibilities_weight_to_one(d in 1usize..=3, k in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = random_mixture(&mut rng, d, k);
        let w = mix.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for _ in 0..10 {
            let theta = draw_standard_normal(d, &mut rng) * 5.0;
            let p = mixture_density_parts(&mix, &theta).unwrap();
            prop_assert!(p.responsibilities.values.iter().all(|&v| v >= 0.0));
            prop_assert!((p.responsibilities.posterior(&w).sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn logit_updates_stay_on_simplex(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mix = random_mixture(&mut rng, 1, 3);
        for _ in 0..1000 {
            let g = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            mix = apply_logit_update(&mix, &g, 0.05).unwrap();
            let w = mix.weights();
            prop_assert!(w.iter().all(|&p| p > 0.0 && p < 1.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn component_frequencies_match_weights() {
    let mix = MixtureApprox::new(
        vec![
            GaussianApprox::isotropic(1, 1.0).unwrap(),
            GaussianApprox::isotropic(1, 1.0).unwrap(),
            GaussianApprox::isotropic(1, 1.0).unwrap(),
        ],
        dvector![0.4, -0.8],
    )
    .unwrap();
    let w = mix.weights();
    let n = 100_000;
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..n {
        counts[sample_mixture(&mix, &mut rng).unwrap().component] += 1;
    }
    for c in 0..3 {
        let p = w[c];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = counts[c] as f64 / n as f64;
        assert!((freq - p).abs() < 3.0 * se, "component {c}: {freq} vs {p}");
    }
}

/// Stratified ELBO `Σ_c π_c mean_s h(C_c z_cs + μ_c)` with common draws.
fn stratified_elbo(mix: &MixtureApprox, model: &dyn TargetModel, zs: &[[f64; 2]]) -> Vec<f64> {
    let w = mix.weights();
    zs.iter()
        .map(|z| {
            (0..2)
                .map(|c| {
                    let theta = sample_reparam(&mix.components()[c], &dvector![z[c]]).unwrap();
                    w[c] * (model.log_joint(&theta) - mix.log_density(&theta).unwrap())
                })
                .sum()
        })
        .collect()
}

#[test]
fn logit_natural_gradient_matches_elbo_finite_differences() {
    // Euclidean logit gradient = π₁(1 − π₁) × natural gradient for K = 2
    let model = bimodal();
    let mix = MixtureApprox::new(
        vec![
            GaussianApprox::new(dvector![-1.5], dmatrix![0.6]).unwrap(),
            GaussianApprox::new(dvector![1.0], dmatrix![0.8]).unwrap(),
        ],
        dvector![0.4],
    )
    .unwrap();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ng: Vec<f64> = (0..n)
        .map(|_| {
            let draw = sample_mixture(&mix, &mut rng).unwrap();
            logit_natural_grad_at(&mix, &model, &draw.theta).unwrap()[0]
        })
        .collect();
    let pi = mix.weights()[0];
    let fisher = pi * (1.0 - pi);
    let (ng_mean, ng_se) = mean_se(&ng);

    let zs: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let z = draw_standard_normal(2, &mut rng);
            [z[0], z[1]]
        })
        .collect();
    let eps = 1e-5;
    let plus = stratified_elbo(&apply_logit_update(&mix, &dvector![1.0], eps).unwrap(), &model, &zs);
    let minus = stratified_elbo(&apply_logit_update(&mix, &dvector![-1.0], eps).unwrap(), &model, &zs);
    let fd: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
    let (fd_mean, fd_se) = mean_se(&fd);

    let diff = fisher * ng_mean - fd_mean;
    let se = ((fisher * ng_se).powi(2) + fd_se.powi(2)).sqrt();
    assert!(diff.abs() < 3.0 * se, "ng·F {} fd {fd_mean} se {se}", fisher * ng_mean);
}

#[test]
fn joint_fisher_is_block_diagonal_and_weight_block_is_bernoulli() {
    let mix = MixtureApprox::new(
        vec![
            GaussianApprox::new(dvector![-1.0], dmatrix![0.7]).unwrap(),
            GaussianApprox::new(dvector![1.5], dmatrix![0.4]).unwrap(),
        ],
        dvector![-0.3],
    )
    .unwrap();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cross: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(n)).collect();
    let mut ww = Vec::with_capacity(n);
    for _ in 0..n {
        let draw = sample_mixture(&mix, &mut rng).unwrap();
        let s = joint_score(&mix, &draw.theta, draw.component).unwrap();
        let sw = s.logits[0];
        let theta_scores = [
            s.components[0].0[0],
            s.components[0].1.as_vector()[0],
            s.components[1].0[0],
            s.components[1].1.as_vector()[0],
        ];
        for (k, v) in theta_scores.iter().enumerate() {
            cross[k].push(v * sw);
        }
        ww.push(sw * sw);
    }
    for (k, xs) in cross.iter().enumerate() {
        let (m, se) = mean_se(xs);
        assert!(m.abs() < 3.0 * se, "cross term {k}: {m} (se {se})");
    }
    let pi = mix.weights()[0];
    let (m, se) = mean_se(&ww);
    assert!((m - pi * (1.0 - pi)).abs() < 3.0 * se);
}

#[test]
fn single_component_natural_path_reaches_posterior() {
    let (x, y) = synthetic_regression(&dvector![1.0, -0.5], 20, 1.0, 17);
    let (model, post) = make_conjugate_gaussian(DVector::zeros(2), DMatrix::identity(2, 2), x, 1.0, y).unwrap();
    let cfg = RunConfig {
        estimator: EstimatorKind::NatgradNatural,
        schedule: StepSchedule::Constant { base: 0.5 },
        iterations: 30,
        samples_per_iter: 10_000,
        eval_every: 10,
        eval_samples: 50,
        ..RunConfig::default()
    };
    let init = MixtureApprox::from_gaussian(GaussianApprox::isotropic(2, 0.1).unwrap());
    let out = run_mixture(&cfg, &model, init).unwrap();
    let kl = gaussian_kl(&out.approx.components()[0], &post).unwrap();
    assert!(kl < 1e-3, "kl {kl}");
}

#[test]
fn bimodal_elbo_trends_upward() {
    let model = bimodal();
    let cfg = RunConfig {
        iterations: 3000,
        ..RunConfig::for_estimator(EstimatorKind::NatgradCholesky)
    };
    let init = MixtureApprox::new(
        vec![
            GaussianApprox::new(dvector![-0.5], dmatrix![0.1]).unwrap(),
            GaussianApprox::new(dvector![0.5], dmatrix![0.1]).unwrap(),
        ],
        dvector![0.0],
    )
    .unwrap();
    let out = run_mixture(&cfg, &model, init).unwrap();
    // 200-iteration windows are four consecutive records at eval_every = 50
    let blocks: Vec<(f64, f64)> = out.trace[1..]
        .chunks(4)
        .map(|c| {
            let m = c.iter().map(|r| r.elbo).sum::<f64>() / c.len() as f64;
            let se = c.iter().map(|r| r.elbo_se.powi(2)).sum::<f64>().sqrt() / c.len() as f64;
            (m, se)
        })
        .collect();
    for w in blocks.windows(2) {
        let tol = 3.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt() + 1e-9;
        assert!(w[1].0 >= w[0].0 - tol, "{:?} -> {:?}", w[0], w[1]);
    }
    let means: Vec<f64> = out.approx.components().iter().map(|c| c.mean()[0]).collect();
    assert!(
        (means[0] + 2.0).abs() < 0.1 && (means[1] - 2.0).abs() < 0.1,
        "{means:?}"
    );
}

#[test]
fn overspecified_mixture_runs() {
    let model = bimodal();
    let cfg = RunConfig {
        iterations: 500,
        ..RunConfig::for_estimator(EstimatorKind::NatgradCholesky)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = MixtureApprox::jittered(1, 3, 0.1, &mut rng).unwrap();
    let out = run_mixture(&cfg, &model, init).unwrap();
    let w = out.approx.weights();
    assert_eq!(w.len(), 3);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn mixture_runs_are_thread_count_independent() {
    let model = bimodal();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let init = MixtureApprox::jittered(1, 2, 0.1, &mut rng).unwrap();
    let mut cfg = RunConfig {
        iterations: 300,
        samples_per_iter: 4,
        threads: 1,
        ..RunConfig::for_estimator(EstimatorKind::NatgradCholesky)
    };
    let a = run_mixture(&cfg, &model, init.clone()).unwrap();
    cfg.threads = 3;
    let b = run_mixture(&cfg, &model, init).unwrap();
    assert_eq!(a, b);
}
