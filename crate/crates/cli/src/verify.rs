//! Self-checks runnable from the command line.
//!
//! The `fast` level covers algebraic identities and per-sample oracle
//! comparisons. `full` adds Monte-Carlo consistency checks and short
//! optimisation runs against known answers.

use std::fmt;
use std::time::Instant;

use cholvi::gauss_vi::{
    self, draw_standard_normal, gaussian_kl, natural_grad_natural_params, sample_reparam, score_function_grad,
    GaussianApprox, GradientEstimate,
};
use cholvi::matcalc::{
    commutation_matrix, duplication_matrix, elimination_matrix, half_len, kron, mp_duplication, n_matrix, HalfVec,
};
use cholvi::mixture_vi::{apply_logit_update, joint_score, mixture_density_parts, sample_mixture, MixtureApprox};
use cholvi::model::{
    fd_gradient, fd_jacobian_symmetric, make_bimodal_target, make_conjugate_gaussian, make_logistic_regression,
    relative_error, synthetic_logistic, synthetic_regression, ConjugateGaussian, FD_REL_STEP,
};
use cholvi::optim::{derive_rng, run_gaussian, run_mixture, RunConfig};
use cholvi::{ExactGaussianPosterior, Result, TargetModel};
use nalgebra::{dvector, DMatrix, DVector};
use rand::Rng;

use crate::experiment::{build, Init};
use crate::presets;

/// Stream tag for verification draws, distinct from the run tags.
const VERIFY_TAG: u64 = 0x5645_5249;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Fast,
    Full,
}

/// The Fisher and gradient formulas under test. The defaults call the
/// library; a test can override one method to check that the suite notices.
pub trait VerifyKernel: Sync {
    fn fisher_matrix(&self, q: &GaussianApprox) -> Result<DMatrix<f64>> {
        gauss_vi::fisher_matrix(q)
    }

    fn fisher_inverse(&self, q: &GaussianApprox) -> Result<DMatrix<f64>> {
        gauss_vi::fisher_inverse(q)
    }

    fn score(&self, q: &GaussianApprox, theta: &DVector<f64>) -> Result<(DVector<f64>, HalfVec)> {
        q.score(theta)
    }

    fn euclidean_grad(
        &self,
        q: &GaussianApprox,
        model: &dyn TargetModel,
        z: &DVector<f64>,
    ) -> Result<GradientEstimate> {
        gauss_vi::euclidean_grad(q, model, z)
    }

    fn natural_grad_cholesky(
        &self,
        q: &GaussianApprox,
        model: &dyn TargetModel,
        z: &DVector<f64>,
    ) -> Result<GradientEstimate> {
        gauss_vi::natural_grad_cholesky(q, model, z)
    }
}

pub struct LibraryKernel;

impl VerifyKernel for LibraryKernel {}

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub residual: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} residual {:>10.3e}  threshold {:>8.1e}  ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.residual,
            self.threshold,
            self.seconds
        )?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub results: Vec<PropertyResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

/// Residual against threshold; `residual <= threshold` passes.
struct Check {
    residual: f64,
    threshold: f64,
    detail: String,
}

impl Check {
    fn new(residual: f64, threshold: f64) -> Self {
        Self {
            residual,
            threshold,
            detail: String::new(),
        }
    }

    fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

type Property = fn(&dyn VerifyKernel) -> Result<Check>;

fn fast_properties() -> Vec<(&'static str, Property)> {
    vec![
        ("matrix-identities", matrix_identities),
        ("fisher-inverse-product", fisher_inverse_product),
        ("natgrad-oracle-equivalence", natgrad_oracle_equivalence),
        ("model-derivatives", model_derivatives),
        ("simplex-invariant", simplex_invariant),
        ("responsibility-identity", responsibility_identity),
        ("single-component-reduction", single_component_reduction),
    ]
}

fn full_properties() -> Vec<(&'static str, Property)> {
    vec![
        ("fisher-score-covariance", fisher_score_covariance),
        ("euclidean-grad-unbiased", euclidean_grad_unbiased),
        ("stationarity-at-posterior", stationarity_at_posterior),
        ("mixture-block-fisher", mixture_block_fisher),
        ("conjugate-convergence", conjugate_convergence),
        ("bimodal-recovery", bimodal_recovery),
    ]
}

pub fn verify_suite(level: Level, kernel: &dyn VerifyKernel) -> Report {
    verify_with_progress(level, kernel, |_| {})
}

/// As [`verify_suite`], calling `progress` as each property finishes.
pub fn verify_with_progress(
    level: Level,
    kernel: &dyn VerifyKernel,
    mut progress: impl FnMut(&PropertyResult),
) -> Report {
    let mut props = fast_properties();
    if level == Level::Full {
        props.extend(full_properties());
    }
    let mut results = Vec::new();
    for (name, prop) in props {
        let start = Instant::now();
        let r = match prop(kernel) {
            Ok(c) => PropertyResult {
                name,
                passed: c.residual <= c.threshold,
                residual: c.residual,
                threshold: c.threshold,
                detail: c.detail,
                seconds: 0.0,
            },
            Err(e) => PropertyResult {
                name,
                passed: false,
                residual: f64::NAN,
                threshold: f64::NAN,
                detail: format!("error: {e}"),
                seconds: 0.0,
            },
        };
        let r = PropertyResult {
            seconds: start.elapsed().as_secs_f64(),
            ..r
        };
        progress(&r);
        results.push(r);
    }
    Report { results }
}

// ---------------------------------------------------------------------------
// Fixtures

fn rng(stream: u64) -> impl Rng {
    derive_rng(0, VERIFY_TAG, stream, 0)
}

fn random_lower(rng: &mut impl Rng, d: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            rng.random_range(lo..hi)
        } else if i > j {
            rng.random_range(-0.5..0.5)
        } else {
            0.0
        }
    })
}

fn random_q(rng: &mut impl Rng, d: usize) -> Result<GaussianApprox> {
    let chol = random_lower(rng, d, 0.3, 1.5);
    GaussianApprox::new(draw_standard_normal(d, rng), chol)
}

fn conjugate(d: usize, seed: u64) -> Result<(ConjugateGaussian, ExactGaussianPosterior)> {
    let theta = DVector::from_fn(d, |i, _| (i as f64) * 0.5 - 0.5);
    let (x, y) = synthetic_regression(&theta, 2 * d + 5, 1.0, seed);
    make_conjugate_gaussian(DVector::zeros(d), DMatrix::identity(d, d), x, 1.0, y)
}

/// Mean and standard error.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Largest `|mean − target| / (3·SE + slack)` over coordinates; at most 1
/// means every coordinate is within three standard errors.
fn worst_z(samples: &[Vec<f64>], target: &[f64], slack: f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (k, &t) in target.iter().enumerate() {
        let col: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        let (m, se) = mean_se(&col);
        let r = (m - t).abs() / (3.0 * se + slack);
        if r > worst.0 || r.is_nan() {
            worst = (r, k);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Fast properties

fn matrix_identities(_: &dyn VerifyKernel) -> Result<Check> {
    let mut rng = rng(1);
    let mut worst: f64 = 0.0;
    for d in 1..=6 {
        let n = half_len(d);
        let l = elimination_matrix(d);
        let k = commutation_matrix(d);
        let dup = duplication_matrix(d);
        let dplus = mp_duplication(d);
        let nm = n_matrix(d);
        let eye_n = DMatrix::identity(n, n);
        let eye_dd = DMatrix::identity(d * d, d * d);
        worst = worst
            .max((&k * &k - &eye_dd).amax())
            .max((&dplus * &dup - &eye_n).amax())
            .max((&eye_dd + &k - &dup * &dplus * 2.0).amax());
        let lnl_inv = (&l * &nm * l.transpose())
            .try_inverse()
            .ok_or_else(|| cholvi::Error::InvalidArgument("L N Lᵀ singular".into()))?;
        for _ in 0..20 {
            let p = random_lower(&mut rng, d, -2.0, 2.0);
            let q = random_lower(&mut rng, d, -2.0, 2.0);
            let pq = kron(&p.transpose(), &q);
            worst = worst
                .max((&l * l.transpose() - &eye_n).amax())
                .max((&lnl_inv - (&eye_n * 2.0 - &l * &k * l.transpose())).amax())
                .max((&nm - &dup * &l * &nm).amax())
                .max((l.transpose() * &l * &pq * l.transpose() - &pq * l.transpose()).amax())
                .max((&l * &pq * l.transpose() - dup.transpose() * &pq * l.transpose()).amax());
        }
    }
    Ok(Check::new(worst, 1e-10).detail("d = 1..6, 20 instances each"))
}

fn fisher_inverse_product(kernel: &dyn VerifyKernel) -> Result<Check> {
    let mut rng = rng(2);
    let mut worst: f64 = 0.0;
    for d in 2..=8 {
        for _ in 0..50 {
            let q = random_q(&mut rng, d)?;
            let f = kernel.fisher_matrix(&q)?;
            let fi = kernel.fisher_inverse(&q)?;
            let n = f.nrows();
            worst = worst.max((f * fi - DMatrix::identity(n, n)).amax());
        }
    }
    Ok(Check::new(worst, 1e-9).detail("d = 2..8, 50 factors each"))
}

fn natgrad_oracle_equivalence(kernel: &dyn VerifyKernel) -> Result<Check> {
    let mut rng = rng(3);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let d = 1 + i % 8;
        let (model, _) = conjugate(d, i as u64)?;
        let q = random_q(&mut rng, d)?;
        let z = draw_standard_normal(d, &mut rng);
        let closed = kernel.natural_grad_cholesky(&q, &model, &z)?.stacked();
        let explicit = kernel.fisher_inverse(&q)? * kernel.euclidean_grad(&q, &model, &z)?.stacked();
        worst = worst.max((closed - explicit).amax());
    }
    Ok(Check::new(worst, 1e-10).detail("100 triples, d = 1..8"))
}

fn model_derivatives(_: &dyn VerifyKernel) -> Result<Check> {
    let (x, y) = synthetic_regression(&dvector![0.5, -1.0, 2.0], 25, 0.5, 1);
    let (conj, _) = make_conjugate_gaussian(DVector::zeros(3), DMatrix::identity(3, 3), x, 0.5, y)?;
    let (xl, yl) = synthetic_logistic(&dvector![1.0, -1.0, 0.5], 30, 2);
    let logistic = make_logistic_regression(xl, yl, 1.0)?;
    let bimodal = make_bimodal_target(vec![dvector![-2.0], dvector![2.0]], vec![0.5, 0.5], vec![0.3, 0.7])?;
    let models: [&dyn TargetModel; 3] = [&conj, &logistic, &bimodal];
    let mut rng = rng(4);
    let mut worst: f64 = 0.0;
    for model in models {
        let d = model.dim();
        for _ in 0..20 {
            let theta = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let fd = fd_gradient(|t| model.log_joint(t), &theta, FD_REL_STEP)
                .map_err(|e| cholvi::Error::InvalidArgument(e.to_string()))?;
            worst = worst.max(relative_error(&model.grad_log_joint(&theta), &fd));
            if let Some(h) = model.hessian_log_joint(&theta) {
                let fdh = fd_jacobian_symmetric(|t| model.grad_log_joint(t), &theta, FD_REL_STEP)
                    .map_err(|e| cholvi::Error::InvalidArgument(e.to_string()))?;
                worst = worst.max((h - &fdh).amax() / (1.0 + fdh.amax()));
            }
        }
    }
    Ok(Check::new(worst, 1e-5).detail("conjugate, logistic, bimodal; 20 points each"))
}

fn simplex_invariant(_: &dyn VerifyKernel) -> Result<Check> {
    let mut rng = rng(5);
    let comps = (0..3)
        .map(|_| GaussianApprox::isotropic(2, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let mut mix = MixtureApprox::uniform(comps)?;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let g = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        mix = apply_logit_update(&mix, &g, 0.05)?;
        let w = mix.weights();
        if w.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Ok(Check::new(f64::INFINITY, 1e-12).detail("weight left (0, 1)"));
        }
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(Check::new(worst, 1e-12).detail("1000 logit updates, K = 3"))
}

fn responsibility_identity(_: &dyn VerifyKernel) -> Result<Check> {
    let mut rng = rng(6);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let comps = (0..3).map(|_| random_q(&mut rng, 2)).collect::<Result<Vec<_>>>()?;
        let logits = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let mix = MixtureApprox::new(comps, logits)?;
        let w = mix.weights();
        for _ in 0..20 {
            let theta = draw_standard_normal(2, &mut rng) * 5.0;
            let parts = mixture_density_parts(&mix, &theta)?;
            worst = worst.max((parts.responsibilities.posterior(&w).sum() - 1.0).abs());
        }
    }
    Ok(Check::new(worst, 1e-10).detail("Σ π_c δ_c(θ) = 1 at 1000 points"))
}

fn single_component_reduction(_: &dyn VerifyKernel) -> Result<Check> {
    let (model, _) = conjugate(2, 17)?;
    let init = GaussianApprox::isotropic(2, 0.1)?;
    let cfg = RunConfig {
        iterations: 300,
        samples_per_iter: 2,
        ..RunConfig::default()
    };
    let g = run_gaussian(&cfg, &model, init.clone()).map_err(|e| e.error)?;
    let m = run_mixture(&cfg, &model, MixtureApprox::from_gaussian(init)).map_err(|e| e.error)?;
    let c = &m.approx.components()[0];
    let identical = c.mean() == g.approx.mean()
        && c.chol() == g.approx.chol()
        && g.trace.len() == m.trace.len()
        && g.trace
            .iter()
            .zip(&m.trace)
            .all(|(a, b)| (a.elbo, a.elbo_se) == (b.elbo, b.elbo_se));
    let diff = (c.mean() - g.approx.mean())
        .amax()
        .max((c.chol() - g.approx.chol()).amax());
    let residual = if identical { 0.0 } else { diff.max(f64::MIN_POSITIVE) };
    Ok(Check::new(residual, 0.0).detail("K = 1 mixture vs Gaussian, 300 iterations"))
}

// ---------------------------------------------------------------------------
// Monte-Carlo properties

fn fisher_score_covariance(kernel: &dyn VerifyKernel) -> Result<Check> {
    let n = 100_000;
    let mut worst = (0.0, String::new());
    for d in 1..=3 {
        let mut rng = rng(10 + d as u64);
        let q = random_q(&mut rng, d)?;
        let f = kernel.fisher_matrix(&q)?;
        let p = f.nrows();
        let scores: Vec<DVector<f64>> = (0..n)
            .map(|_| {
                let theta = sample_reparam(&q, &draw_standard_normal(d, &mut rng))?;
                let (m, c) = kernel.score(&q, &theta)?;
                let mut s = DVector::zeros(p);
                s.rows_mut(0, d).copy_from(&m);
                s.rows_mut(d, p - d).copy_from(c.as_vector());
                Ok(s)
            })
            .collect::<Result<_>>()?;
        for i in 0..p {
            for j in i..p {
                let prod: Vec<f64> = scores.iter().map(|s| s[i] * s[j]).collect();
                let (m, se) = mean_se(&prod);
                let r = (m - f[(i, j)]).abs() / (3.0 * se + 1e-12);
                if r > worst.0 {
                    worst = (r, format!("d = {d}, entry ({i}, {j})"));
                }
            }
        }
    }
    Ok(Check::new(worst.0, 1.0).detail(format!("max |MC − analytic| / 3 SE at {}", worst.1)))
}

fn euclidean_grad_unbiased(kernel: &dyn VerifyKernel) -> Result<Check> {
    let (model, _) = conjugate(2, 1)?;
    let q = GaussianApprox::new(
        dvector![0.3, -0.2],
        DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.2, 0.4]),
    )?;
    let mut rng = rng(20);
    let eps = 1e-5;
    let h_at = |q: &GaussianApprox, z: &DVector<f64>| -> Result<f64> {
        let theta = sample_reparam(q, z)?;
        Ok(model.log_joint(&theta) - q.log_density(&theta)?)
    };
    let shifted = |k: usize, delta: f64| -> Result<GaussianApprox> {
        let (mut mean, mut chol) = (q.mean().clone(), q.chol().clone());
        if k < 2 {
            mean[k] += delta;
        } else {
            chol[[(0, 0), (1, 0), (1, 1)][k - 2]] += delta;
        }
        GaussianApprox::new(mean, chol)
    };
    let plus = (0..5).map(|k| shifted(k, eps)).collect::<Result<Vec<_>>>()?;
    let minus = (0..5).map(|k| shifted(k, -eps)).collect::<Result<Vec<_>>>()?;
    let diffs = (0..100_000)
        .map(|_| {
            let z = draw_standard_normal(2, &mut rng);
            let g = kernel.euclidean_grad(&q, &model, &z)?.stacked();
            (0..5)
                .map(|k| Ok((h_at(&plus[k], &z)? - h_at(&minus[k], &z)?) / (2.0 * eps) - g[k]))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (r, k) = worst_z(&diffs, &[0.0; 5], 1e-8);
    Ok(Check::new(r, 1.0).detail(format!("max |FD − gradient| / 3 SE at coordinate {k}")))
}

fn stationarity_at_posterior(kernel: &dyn VerifyKernel) -> Result<Check> {
    let (model, post) = conjugate(2, 9)?;
    let q = GaussianApprox::from_posterior(&post)?;
    let mut rng = rng(30);
    let n = 10_000;
    let mut worst = (0.0, "");
    let mut record = |name: &'static str, samples: Vec<Vec<f64>>| {
        let len = samples[0].len();
        let (r, _) = worst_z(&samples, &vec![0.0; len], 1e-12);
        if r > worst.0 {
            worst = (r, name);
        }
    };
    let mut draws = |f: &mut dyn FnMut(&DVector<f64>) -> Result<Vec<f64>>| -> Result<Vec<Vec<f64>>> {
        (0..n).map(|_| f(&draw_standard_normal(2, &mut rng))).collect()
    };
    let to_vec = |e: GradientEstimate| e.stacked().iter().copied().collect::<Vec<f64>>();
    record(
        "score",
        draws(&mut |z| Ok(to_vec(score_function_grad(&q, &model, &sample_reparam(&q, z)?)?)))?,
    );
    record(
        "euclid-reparam",
        draws(&mut |z| Ok(to_vec(kernel.euclidean_grad(&q, &model, z)?)))?,
    );
    record(
        "natgrad-cholesky",
        draws(&mut |z| Ok(to_vec(kernel.natural_grad_cholesky(&q, &model, z)?)))?,
    );
    record(
        "natgrad-natural",
        draws(&mut |z| {
            let g = natural_grad_natural_params(&q, &model, &sample_reparam(&q, z)?)?;
            Ok(g.linear.iter().chain(g.quadratic.as_vector().iter()).copied().collect())
        })?,
    );
    Ok(Check::new(worst.0, 1.0).detail(format!("max |mean| / (3 SE + 1e-12), worst estimator {}", worst.1)))
}

fn mixture_block_fisher(_: &dyn VerifyKernel) -> Result<Check> {
    let mix = MixtureApprox::new(
        vec![
            GaussianApprox::new(dvector![-1.0], DMatrix::from_element(1, 1, 0.7))?,
            GaussianApprox::new(dvector![1.5], DMatrix::from_element(1, 1, 0.4))?,
        ],
        dvector![-0.3],
    )?;
    let pi = mix.weights()[0];
    let mut rng = rng(40);
    let rows = (0..100_000)
        .map(|_| {
            let draw = sample_mixture(&mix, &mut rng)?;
            let s = joint_score(&mix, &draw.theta, draw.component)?;
            let sw = s.logits[0];
            Ok(vec![
                s.components[0].0[0] * sw,
                s.components[0].1.as_vector()[0] * sw,
                s.components[1].0[0] * sw,
                s.components[1].1.as_vector()[0] * sw,
                sw * sw,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let (r, k) = worst_z(&rows, &[0.0, 0.0, 0.0, 0.0, pi * (1.0 - pi)], 1e-12);
    Ok(Check::new(r, 1.0).detail(format!("cross terms and π(1−π) weight block; worst entry {k}")))
}

fn conjugate_convergence(_: &dyn VerifyKernel) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for name in ["conjugate-d2-ng", "conjugate-d2-natural"] {
        let spec = presets::find(name)
            .expect("preset exists")
            .spec()
            .map_err(|e| cholvi::Error::InvalidArgument(e.to_string()))?;
        let exp = build(&spec).map_err(|e| cholvi::Error::InvalidArgument(format!("{e:?}")))?;
        let Init::Gaussian(init) = exp.init else {
            unreachable!("conjugate presets are Gaussian")
        };
        let out = run_gaussian(&exp.config, exp.model.as_ref(), init).map_err(|e| e.error)?;
        let post = exp.posterior.expect("conjugate posterior");
        worst = worst.max(gaussian_kl(&out.approx, &post)?);
    }
    Ok(Check::new(worst, 1e-2).detail("final KL, Cholesky and natural-parameter presets"))
}

fn bimodal_recovery(_: &dyn VerifyKernel) -> Result<Check> {
    let spec = presets::find("bimodal-k2")
        .expect("preset exists")
        .spec()
        .map_err(|e| cholvi::Error::InvalidArgument(e.to_string()))?;
    let exp = build(&spec).map_err(|e| cholvi::Error::InvalidArgument(format!("{e:?}")))?;
    let Init::Mixture(init) = exp.init else {
        unreachable!("bimodal preset is a mixture")
    };
    let out = run_mixture(&exp.config, exp.model.as_ref(), init).map_err(|e| e.error)?;
    let mut fitted: Vec<(f64, f64)> = out
        .approx
        .components()
        .iter()
        .zip(out.approx.weights())
        .map(|(c, w)| (c.mean()[0], w))
        .collect();
    fitted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let truth = [(-2.0, 0.3), (2.0, 0.7)];
    // Scaled so that 1.0 is the tolerance: 0.1 on means, 0.05 on weights.
    let residual = fitted
        .iter()
        .zip(truth)
        .map(|(f, t)| ((f.0 - t.0).abs() / 0.1).max((f.1 - t.1).abs() / 0.05))
        .fold(0.0, f64::max);
    Ok(Check::new(residual, 1.0).detail(format!("fitted (mean, weight) {fitted:.3?}")))
}
