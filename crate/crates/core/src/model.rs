//! Target densities `log p(y, θ)` with analytic derivatives, plus central
//! finite-difference oracles used to check them.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// User-facing contract for an unnormalised posterior `log p(y, θ)`.
///
/// The Hessian is optional. Estimators that need second derivatives check
/// [`TargetModel::has_hessian`] up front and refuse to run without it.
pub trait TargetModel: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn log_joint(&self, theta: &DVector<f64>) -> f64;

    fn grad_log_joint(&self, theta: &DVector<f64>) -> DVector<f64>;

    fn hessian_log_joint(&self, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn has_hessian(&self) -> bool {
        false
    }
}

fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let symmetric = (m - m.transpose()).amax() <= 1e-10 * (1.0 + m.amax());
    if !symmetric || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { what: what.into() });
    }
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite { what: what.into() })
}

/// Exact Gaussian posterior `N(mean, covariance)`, the ground truth for
/// conjugate targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactGaussianPosterior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl ExactGaussianPosterior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim("ExactGaussianPosterior", mean.len(), covariance.nrows())?;
        check_dim("ExactGaussianPosterior", mean.len(), covariance.ncols())?;
        let chol = spd_cholesky(&covariance, "posterior covariance")?.l();
        Ok(Self { mean, covariance, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower Cholesky factor of the covariance.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn precision(&self) -> DMatrix<f64> {
        let n = self.dim();
        let linv = self
            .chol
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("validated SPD");
        linv.transpose() * linv
    }
}

// ---------------------------------------------------------------------------
// Gaussian density target

/// A normalised Gaussian density used as a target. With `q` equal to this
/// density, `h(θ) = log p − log q` vanishes identically.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianTarget {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let exact = ExactGaussianPosterior::new(mean, covariance)?;
        Ok(Self::from_posterior(&exact))
    }

    pub fn from_posterior(post: &ExactGaussianPosterior) -> Self {
        let d = post.dim() as f64;
        let log_det = 2.0 * post.chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Self {
            mean: post.mean.clone(),
            chol: post.chol.clone(),
            precision: post.precision(),
            log_norm: -0.5 * (d * LN_2PI + log_det),
        }
    }
}

impl TargetModel for GaussianTarget {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_joint(&self, theta: &DVector<f64>) -> f64 {
        let r = theta - &self.mean;
        let w = self.chol.solve_lower_triangular(&r).expect("validated SPD");
        self.log_norm - 0.5 * w.norm_squared()
    }

    fn grad_log_joint(&self, theta: &DVector<f64>) -> DVector<f64> {
        -(&self.precision * (theta - &self.mean))
    }

    fn hessian_log_joint(&self, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(-self.precision.clone())
    }

    fn has_hessian(&self) -> bool {
        true
    }
}

/// `log p(y, θ) ≡ value`: contributes nothing to `∇θ h`.
#[derive(Debug, Clone)]
pub struct FlatModel {
    dim: usize,
    value: f64,
}

impl FlatModel {
    pub fn new(dim: usize, value: f64) -> Self {
        Self { dim, value }
    }
}

impl TargetModel for FlatModel {
    fn name(&self) -> &str {
        "flat"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn log_joint(&self, _theta: &DVector<f64>) -> f64 {
        self.value
    }

    fn grad_log_joint(&self, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn hessian_log_joint(&self, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.dim, self.dim))
    }

    fn has_hessian(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Conjugate Bayesian linear regression

/// `θ ~ N(μ₀, Σ₀)`, `y | θ ~ N(Xθ, σ² I)`. `log_joint` includes every
/// normalising constant, so `∫ exp(log_joint) dθ = p(y)`.
#[derive(Debug, Clone)]
pub struct ConjugateGaussian {
    prior_mean: DVector<f64>,
    prior_precision: DMatrix<f64>,
    prior_log_det: f64,
    design: DMatrix<f64>,
    observations: DVector<f64>,
    noise_var: f64,
    posterior_precision: DMatrix<f64>,
    log_evidence: f64,
}

impl ConjugateGaussian {
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn observations(&self) -> &DVector<f64> {
        &self.observations
    }

    /// `log p(y)`, computed from `y ~ N(Xμ₀, XΣ₀Xᵀ + σ²I)`.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }
}

impl TargetModel for ConjugateGaussian {
    fn name(&self) -> &str {
        "conjugate"
    }

    fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    fn log_joint(&self, theta: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        let n = self.observations.len() as f64;
        let dp = theta - &self.prior_mean;
        let prior = -0.5 * (d * LN_2PI + self.prior_log_det) - 0.5 * dp.dot(&(&self.prior_precision * &dp));
        let resid = &self.observations - &self.design * theta;
        let lik = -0.5 * n * (LN_2PI + self.noise_var.ln()) - 0.5 * resid.norm_squared() / self.noise_var;
        prior + lik
    }

    fn grad_log_joint(&self, theta: &DVector<f64>) -> DVector<f64> {
        let resid = &self.observations - &self.design * theta;
        -(&self.prior_precision * (theta - &self.prior_mean)) + self.design.transpose() * resid / self.noise_var
    }

    fn hessian_log_joint(&self, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(-self.posterior_precision.clone())
    }

    fn has_hessian(&self) -> bool {
        true
    }
}

/// Bayesian linear regression with a Gaussian prior, together with its
/// closed-form posterior `S = (Σ₀⁻¹ + XᵀX/σ²)⁻¹`, `m = S(Σ₀⁻¹μ₀ + Xᵀy/σ²)`.
///
/// `design` may have zero rows (prior only).
pub fn make_conjugate_gaussian(
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    design: DMatrix<f64>,
    noise_var: f64,
    observations: DVector<f64>,
) -> Result<(ConjugateGaussian, ExactGaussianPosterior)> {
    let d = prior_mean.len();
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    check_dim("prior covariance", d, prior_cov.nrows())?;
    check_dim("prior covariance", d, prior_cov.ncols())?;
    check_dim("design columns", d, design.ncols())?;
    check_dim("observations", design.nrows(), observations.len())?;
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    if design
        .iter()
        .chain(observations.iter())
        .chain(prior_mean.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::non_finite("conjugate model data"));
    }
    let prior_chol = spd_cholesky(&prior_cov, "prior covariance")?;
    let prior_precision = prior_chol.inverse();
    let prior_log_det = 2.0 * prior_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    let xt = design.transpose();
    let posterior_precision = &prior_precision + &xt * &design / noise_var;
    let post_chol = spd_cholesky(&posterior_precision, "posterior precision")?;
    let post_cov = post_chol.inverse();
    let post_cov = (&post_cov + post_cov.transpose()) * 0.5;
    let post_mean = &post_cov * (&prior_precision * &prior_mean + &xt * &observations / noise_var);

    let n = observations.len();
    let log_evidence = if n == 0 {
        0.0
    } else {
        let marginal_cov = &design * &prior_cov * &xt + DMatrix::identity(n, n) * noise_var;
        let chol = spd_cholesky(&marginal_cov, "marginal covariance")?;
        let r = &observations - &design * &prior_mean;
        let w = chol.l().solve_lower_triangular(&r).expect("SPD");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (n as f64 * LN_2PI + log_det + w.norm_squared())
    };

    let exact = ExactGaussianPosterior::new(post_mean, post_cov)?;
    let model = ConjugateGaussian {
        prior_mean,
        prior_precision,
        prior_log_det,
        design,
        observations,
        noise_var,
        posterior_precision,
        log_evidence,
    };
    Ok((model, exact))
}

/// Seeded synthetic regression data: standard-normal design rows and
/// `y = Xθ* + ε`, `ε ~ N(0, σ²)`.
pub fn synthetic_regression(
    true_theta: &DVector<f64>,
    n_obs: usize,
    noise_var: f64,
    seed: u64,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = true_theta.len();
    let mut design = DMatrix::zeros(n_obs, d);
    let mut y = DVector::zeros(n_obs);
    for i in 0..n_obs {
        for j in 0..d {
            design[(i, j)] = rng.sample(StandardNormal);
        }
        let noise: f64 = rng.sample(StandardNormal);
        y[i] = design.row(i).transpose().dot(true_theta) + noise_var.sqrt() * noise;
    }
    (design, y)
}

// ---------------------------------------------------------------------------
// Logistic regression

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression with an isotropic `N(0, τ⁻¹ I)` prior.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    design: DMatrix<f64>,
    labels: DVector<f64>,
    prior_precision: f64,
}

pub fn make_logistic_regression(
    design: DMatrix<f64>,
    labels: DVector<f64>,
    prior_precision: f64,
) -> Result<LogisticRegression> {
    if design.nrows() == 0 || design.ncols() == 0 {
        return Err(Error::InvalidArgument(
            "logistic regression needs at least one observation and one covariate".into(),
        ));
    }
    check_dim("labels", design.nrows(), labels.len())?;
    if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label {i} is {}, expected 0 or 1",
            labels[i]
        )));
    }
    if !(prior_precision > 0.0 && prior_precision.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "prior precision must be positive, got {prior_precision}"
        )));
    }
    if design.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("logistic design matrix"));
    }
    Ok(LogisticRegression {
        design,
        labels,
        prior_precision,
    })
}

/// Seeded synthetic classification data: standard-normal design rows and
/// `y ~ Bernoulli(sigmoid(xᵀθ*))`.
pub fn synthetic_logistic(true_theta: &DVector<f64>, n_obs: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = true_theta.len();
    let mut design = DMatrix::zeros(n_obs, d);
    let mut labels = DVector::zeros(n_obs);
    for i in 0..n_obs {
        for j in 0..d {
            design[(i, j)] = rng.sample(StandardNormal);
        }
        let p = sigmoid(design.row(i).transpose().dot(true_theta));
        labels[i] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    }
    (design, labels)
}

impl TargetModel for LogisticRegression {
    fn name(&self) -> &str {
        "logistic"
    }

    fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn log_joint(&self, theta: &DVector<f64>) -> f64 {
        let eta = &self.design * theta;
        let lik: f64 = eta
            .iter()
            .zip(self.labels.iter())
            .map(|(&e, &y)| y * e - softplus(e))
            .sum();
        let d = self.dim() as f64;
        let tau = self.prior_precision;
        lik - 0.5 * tau * theta.norm_squared() + 0.5 * d * (tau / (2.0 * PI)).ln()
    }

    fn grad_log_joint(&self, theta: &DVector<f64>) -> DVector<f64> {
        let eta = &self.design * theta;
        let resid = DVector::from_iterator(
            eta.len(),
            eta.iter().zip(self.labels.iter()).map(|(&e, &y)| y - sigmoid(e)),
        );
        self.design.transpose() * resid - theta * self.prior_precision
    }

    fn hessian_log_joint(&self, theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        let eta = &self.design * theta;
        let d = self.dim();
        let mut h = DMatrix::identity(d, d) * -self.prior_precision;
        for (i, &e) in eta.iter().enumerate() {
            let s = sigmoid(e);
            let w = s * (1.0 - s);
            let x = self.design.row(i).transpose();
            h -= &x * x.transpose() * w;
        }
        Some(h)
    }

    fn has_hessian(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Multimodal target

/// Normalised mixture of isotropic Gaussians `Σ_k w_k N(c_k, s_k² I)`.
/// Exposes an analytic gradient only.
#[derive(Debug, Clone)]
pub struct GaussianMixtureTarget {
    centers: Vec<DVector<f64>>,
    scales: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussianMixtureTarget {
    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|v| v.exp()).collect()
    }

    fn component_terms(&self, theta: &DVector<f64>) -> Vec<f64> {
        let d = theta.len() as f64;
        self.centers
            .iter()
            .zip(&self.scales)
            .zip(&self.log_weights)
            .map(|((c, &s), &lw)| lw - 0.5 * d * (LN_2PI + 2.0 * s.ln()) - 0.5 * (theta - c).norm_squared() / (s * s))
            .collect()
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Multimodal demo target: a weighted mixture of isotropic Gaussians (two
/// components for the bimodal case, one for the degenerate case).
pub fn make_bimodal_target(
    centers: Vec<DVector<f64>>,
    scales: Vec<f64>,
    weights: Vec<f64>,
) -> Result<GaussianMixtureTarget> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("at least one component required".into()));
    }
    check_dim("mixture scales", centers.len(), scales.len())?;
    check_dim("mixture weights", centers.len(), weights.len())?;
    let d = centers[0].len();
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    for c in &centers {
        check_dim("mixture centers", d, c.len())?;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("mixture center"));
        }
    }
    if let Some(k) = scales.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "component {k} has degenerate scale {}",
            scales[k]
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "weights must be positive and sum to 1, got {weights:?}"
        )));
    }
    Ok(GaussianMixtureTarget {
        centers,
        scales,
        log_weights: weights.iter().map(|w| w.ln()).collect(),
    })
}

impl TargetModel for GaussianMixtureTarget {
    fn name(&self) -> &str {
        "bimodal"
    }

    fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn log_joint(&self, theta: &DVector<f64>) -> f64 {
        log_sum_exp(&self.component_terms(theta))
    }

    fn grad_log_joint(&self, theta: &DVector<f64>) -> DVector<f64> {
        let terms = self.component_terms(theta);
        let total = log_sum_exp(&terms);
        let mut grad = DVector::zeros(theta.len());
        for ((c, &s), t) in self.centers.iter().zip(&self.scales).zip(&terms) {
            let r = (t - total).exp();
            grad -= (theta - c) * (r / (s * s));
        }
        grad
    }
}

// ---------------------------------------------------------------------------
// Finite differences

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FdError {
    #[error("non-finite function value {value} while perturbing coordinate {coordinate}")]
    NonFinite { coordinate: usize, value: f64 },
}

/// Default relative step: `h_i = 1e-5 (1 + |θ_i|)`.
pub const FD_REL_STEP: f64 = 1e-5;

fn fd_step(theta_i: f64, rel_step: f64) -> f64 {
    rel_step * (1.0 + theta_i.abs())
}

fn finite_or(coordinate: usize, value: f64) -> Result<f64, FdError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(FdError::NonFinite { coordinate, value })
    }
}

/// Central-difference gradient with step `rel_step (1 + |θ_i|)`.
pub fn fd_gradient<F>(f: F, theta: &DVector<f64>, rel_step: f64) -> Result<DVector<f64>, FdError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut grad = DVector::zeros(theta.len());
    let mut x = theta.clone();
    for i in 0..theta.len() {
        let h = fd_step(theta[i], rel_step);
        x[i] = theta[i] + h;
        let up = finite_or(i, f(&x))?;
        x[i] = theta[i] - h;
        let down = finite_or(i, f(&x))?;
        x[i] = theta[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Central second differences of a scalar function, symmetrised.
pub fn fd_hessian<F>(f: F, theta: &DVector<f64>, rel_step: f64) -> Result<DMatrix<f64>, FdError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let d = theta.len();
    let mut hess = DMatrix::zeros(d, d);
    let mut x = theta.clone();
    for i in 0..d {
        let hi = fd_step(theta[i], rel_step);
        for j in 0..d {
            let hj = fd_step(theta[j], rel_step);
            let mut eval = |si: f64, sj: f64| {
                x.copy_from(theta);
                x[i] += si * hi;
                x[j] += sj * hj;
                finite_or(i, f(&x))
            };
            let pp = eval(1.0, 1.0)?;
            let pm = eval(1.0, -1.0)?;
            let mp = eval(-1.0, 1.0)?;
            let mm = eval(-1.0, -1.0)?;
            hess[(i, j)] = (pp - pm - mp + mm) / (4.0 * hi * hj);
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Central-difference Jacobian of a vector field, symmetrised. Applied to a
/// gradient this checks an analytic Hessian.
pub fn fd_jacobian_symmetric<F>(g: F, theta: &DVector<f64>, rel_step: f64) -> Result<DMatrix<f64>, FdError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = theta.len();
    let mut jac = DMatrix::zeros(d, d);
    let mut x = theta.clone();
    for i in 0..d {
        let h = fd_step(theta[i], rel_step);
        x[i] = theta[i] + h;
        let up = g(&x);
        x[i] = theta[i] - h;
        let down = g(&x);
        x[i] = theta[i];
        for r in 0..d {
            let v = (up[r] - down[r]) / (2.0 * h);
            jac[(r, i)] = finite_or(i, v)?;
        }
    }
    Ok((&jac + jac.transpose()) * 0.5)
}

/// `max_i |a_i − b_i| / max(1, max_i |b_i|)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

// ---------------------------------------------------------------------------
// CSV ingestion

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    Parse { row: usize, column: usize, value: String },
    #[error("row {row}: expected {expected} columns, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("data file has no observations")]
    Empty,
    #[error("need at least two columns (covariates then response), found {0}")]
    TooFewColumns(usize),
}

/// Design matrix and response read from delimited text.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
}

/// Reads comma-separated rows, one observation per row, last column is the
/// response. A first row that does not parse as numbers is treated as a
/// header. Row and column numbers in errors are 1-based.
pub fn load_regression_csv(path: &Path) -> Result<RegressionData, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_regression_csv(&text)
}

pub fn parse_regression_csv(text: &str) -> Result<RegressionData, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 1;
        let record = record.map_err(|e| DataError::Csv {
            row: row_no,
            message: e.to_string(),
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if rows.is_empty() && width.is_none() && parsed.iter().all(|p| p.is_err()) {
            // header line
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(DataError::Ragged {
                row: row_no,
                expected,
                found: record.len(),
            });
        }
        let mut values = Vec::with_capacity(record.len());
        for (col, (p, raw)) in parsed.into_iter().zip(record.iter()).enumerate() {
            match p {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(DataError::Parse {
                        row: row_no,
                        column: col + 1,
                        value: raw.to_string(),
                    })
                }
            }
        }
        rows.push(values);
    }
    let width = width.unwrap_or(0);
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    if width < 2 {
        return Err(DataError::TooFewColumns(width));
    }
    let n = rows.len();
    let design = DMatrix::from_fn(n, width - 1, |i, j| rows[i][j]);
    let response = DVector::from_fn(n, |i, _| rows[i][width - 1]);
    Ok(RegressionData { design, response })
}
