//! Gaussian variational approximation `q = N(μ, CCᵀ)` parametrised by the mean
//! and the lower-triangular Cholesky factor `C`.
//!
//! Four gradient estimators of the ELBO are provided:
//!
//! * score function: `∇λ log q(θ) · h(θ)`;
//! * Euclidean reparametrisation: `(∇θh, vech(bar(∇θh zᵀ)))` with `θ = Cz + μ`;
//! * closed-form natural gradient in `(μ, vech C)`: `(CCᵀ∇θh, vech[C(Ḡ₂ − dg(Ḡ₂)/2)])`
//!   where `Ḡ₂ = bar(Cᵀ bar(∇θh zᵀ))`, first derivatives only;
//! * natural gradient in the natural parameters `(Σ⁻¹μ, −½Dᵀvec Σ⁻¹)`, which
//!   needs the Hessian of `h`.
//!
//! `h(θ) = log p(y, θ) − log q(θ)` is assembled here: the model supplies the
//! `log p` part and the approximation adds the `−log q` part.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcalc::{self, elimination_matrix, half_len, kron, n_matrix, vech_index, HalfVec};
use crate::model::{ExactGaussianPosterior, TargetModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Default initial scale of `C = scale · I`.
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianApprox {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl GaussianApprox {
    pub fn new(mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        if chol.nrows() != chol.ncols() {
            return Err(Error::NotSquare {
                context: "GaussianApprox",
                rows: chol.nrows(),
                cols: chol.ncols(),
            });
        }
        if chol.nrows() != d {
            return Err(Error::DimensionMismatch {
                context: "GaussianApprox",
                expected: d,
                found: chol.nrows(),
            });
        }
        for j in 1..d {
            for i in 0..j {
                if chol[(i, j)] != 0.0 {
                    return Err(Error::NotLowerTriangular {
                        context: "GaussianApprox",
                        row: i,
                        col: j,
                    });
                }
            }
        }
        if mean.iter().chain(chol.iter()).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("GaussianApprox parameters"));
        }
        Ok(Self { mean, chol })
    }

    /// `N(0, scale² I)`.
    pub fn isotropic(d: usize, scale: f64) -> Result<Self> {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d) * scale)
    }

    pub fn with_mean(mean: DVector<f64>, scale: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * scale)
    }

    pub fn from_covariance(mean: DVector<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        let sym = (covariance + covariance.transpose()) * 0.5;
        let chol = sym.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            what: "covariance".into(),
        })?;
        Self::new(mean, chol.l())
    }

    pub fn from_posterior(post: &ExactGaussianPosterior) -> Result<Self> {
        Self::new(post.mean().clone(), post.chol().clone())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn chol_vech(&self) -> HalfVec {
        matcalc::vech(&self.chol).expect("square by construction")
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn has_positive_diagonal(&self) -> bool {
        self.chol.diagonal().iter().all(|&v| v > 0.0)
    }

    fn require_nonsingular(&self, context: &'static str) -> Result<()> {
        if self.chol.diagonal().iter().any(|&v| v == 0.0) {
            return Err(Error::SingularCholesky { context });
        }
        Ok(())
    }

    /// `C⁻¹ b` by forward substitution.
    pub fn solve_chol(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.require_nonsingular("C⁻¹ solve")?;
        self.chol.solve_lower_triangular(b).ok_or(Error::SingularCholesky {
            context: "C⁻¹ solve"
        })
    }

    /// `C⁻ᵀ b` by back substitution.
    pub fn solve_chol_transpose(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.require_nonsingular("C⁻ᵀ solve")?;
        self.chol.tr_solve_lower_triangular(b).ok_or(Error::SingularCholesky {
            context: "C⁻ᵀ solve"
        })
    }

    fn chol_inverse(&self) -> Result<DMatrix<f64>> {
        self.require_nonsingular("C⁻¹")?;
        let d = self.dim();
        self.chol
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or(Error::SingularCholesky { context: "C⁻¹" })
    }

    /// `Σ⁻¹ = C⁻ᵀC⁻¹`.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        let cinv = self.chol_inverse()?;
        Ok(cinv.transpose() * cinv)
    }

    /// `z = C⁻¹(θ − μ)`.
    pub fn standardize(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(theta.len(), "standardize")?;
        self.solve_chol(&(theta - &self.mean))
    }

    fn check_len(&self, found: usize, context: &'static str) -> Result<()> {
        if found != self.dim() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }

    pub fn log_abs_det_chol(&self) -> f64 {
        self.chol.diagonal().iter().map(|v| v.abs().ln()).sum()
    }

    pub fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        let z = self.standardize(theta)?;
        Ok(-0.5 * self.dim() as f64 * LN_2PI - self.log_abs_det_chol() - 0.5 * z.norm_squared())
    }

    /// `∇θ log q(θ) = −C⁻ᵀC⁻¹(θ − μ)`, two triangular solves.
    pub fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.standardize(theta)?;
        Ok(-self.solve_chol_transpose(&z)?)
    }

    /// Score `∇λ log q(θ)` for `λ = (μ, vech C)`:
    /// `(C⁻ᵀz, vech[C⁻ᵀ(zzᵀ − I)])`.
    pub fn score(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, HalfVec)> {
        let z = self.standardize(theta)?;
        let d = self.dim();
        let mean_score = self.solve_chol_transpose(&z)?;
        let inner = &z * z.transpose() - DMatrix::identity(d, d);
        let m = self
            .chol
            .tr_solve_lower_triangular(&inner)
            .ok_or(Error::SingularCholesky { context: "score" })?;
        Ok((mean_score, matcalc::vech(&m)?))
    }

    /// `(Σ⁻¹μ, −½Dᵀvec(Σ⁻¹))`.
    pub fn natural_params(&self) -> Result<(DVector<f64>, HalfVec)> {
        let prec = self.precision()?;
        let lin = &prec * &self.mean;
        let quad = matcalc::apply_duplication_transpose(&matcalc::vec(&prec))?.scale(-0.5);
        Ok((lin, quad))
    }

    /// Inverse of [`GaussianApprox::natural_params`].
    pub fn from_natural_params(lin: &DVector<f64>, quad: &HalfVec) -> Result<Self> {
        let d = quad.dim();
        let mut prec = DMatrix::zeros(d, d);
        for j in 0..d {
            for i in j..d {
                let v = quad.get(i, j);
                if i == j {
                    prec[(i, i)] = -2.0 * v;
                } else {
                    prec[(i, j)] = -v;
                    prec[(j, i)] = -v;
                }
            }
        }
        let chol = prec.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            what: "precision from natural parameters".into(),
        })?;
        let cov = chol.inverse();
        let mean = &cov * lin;
        Self::from_covariance(mean, &cov)
    }
}

/// `θ = Cz + μ`.
pub fn sample_reparam(q: &GaussianApprox, z: &DVector<f64>) -> Result<DVector<f64>> {
    q.check_len(z.len(), "sample_reparam")?;
    Ok(&q.chol * z + &q.mean)
}

/// `d` independent standard normal draws.
pub fn draw_standard_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn check_model(q: &GaussianApprox, model: &dyn TargetModel) -> Result<()> {
    if model.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            context: "model dimension",
            expected: q.dim(),
            found: model.dim(),
        });
    }
    Ok(())
}

/// `h(θ) = log p(y, θ) − log q(θ)`.
pub fn h_value(q: &GaussianApprox, model: &dyn TargetModel, theta: &DVector<f64>) -> Result<f64> {
    check_model(q, model)?;
    Ok(model.log_joint(theta) - q.log_density(theta)?)
}

/// `∇θh(θ) = ∇θ log p(y, θ) + C⁻ᵀC⁻¹(θ − μ)`.
pub fn grad_h(q: &GaussianApprox, model: &dyn TargetModel, theta: &DVector<f64>) -> Result<DVector<f64>> {
    check_model(q, model)?;
    q.check_len(theta.len(), "grad_h")?;
    let glq = q.grad_log_density(theta)?;
    Ok(model.grad_log_joint(theta) - glq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Score,
    EuclidReparam,
    NatgradCholesky,
    NatgradNatural,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Score,
        EstimatorKind::EuclidReparam,
        EstimatorKind::NatgradCholesky,
        EstimatorKind::NatgradNatural,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Score => "score",
            EstimatorKind::EuclidReparam => "euclid-reparam",
            EstimatorKind::NatgradCholesky => "natgrad-cholesky",
            EstimatorKind::NatgradNatural => "natgrad-natural",
        }
    }

    pub fn is_natural(self) -> bool {
        matches!(self, EstimatorKind::NatgradCholesky | EstimatorKind::NatgradNatural)
    }

    pub fn needs_hessian(self) -> bool {
        self == EstimatorKind::NatgradNatural
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}`")))
    }
}

/// Stochastic gradient split into the mean block and the `vech C` block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean_block: DVector<f64>,
    pub cholvech_block: HalfVec,
    pub kind: EstimatorKind,
    pub sample_count: usize,
}

impl GradientEstimate {
    fn single(mean_block: DVector<f64>, cholvech_block: HalfVec, kind: EstimatorKind) -> Result<Self> {
        if mean_block.iter().any(|v| !v.is_finite()) || !cholvech_block.is_finite() {
            return Err(Error::non_finite(format!("{kind} gradient estimate")));
        }
        Ok(Self {
            mean_block,
            cholvech_block,
            kind,
            sample_count: 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean_block.len()
    }

    /// `(mean_block, cholvech_block)` stacked into one vector.
    pub fn stacked(&self) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(d + self.cholvech_block.len());
        out.rows_mut(0, d).copy_from(&self.mean_block);
        out.rows_mut(d, self.cholvech_block.len())
            .copy_from(self.cholvech_block.as_vector());
        out
    }

    pub fn from_stacked(stacked: &DVector<f64>, d: usize, kind: EstimatorKind, sample_count: usize) -> Result<Self> {
        if stacked.len() != d + half_len(d) {
            return Err(Error::DimensionMismatch {
                context: "GradientEstimate::from_stacked",
                expected: d + half_len(d),
                found: stacked.len(),
            });
        }
        Ok(Self {
            mean_block: stacked.rows(0, d).into_owned(),
            cholvech_block: HalfVec::new(d, stacked.rows(d, half_len(d)).into_owned())?,
            kind,
            sample_count,
        })
    }

    /// Plain average of independent single-sample estimates, summed in order.
    pub fn average(estimates: &[GradientEstimate]) -> Result<Self> {
        let first = estimates
            .first()
            .ok_or_else(|| Error::InvalidArgument("no estimates to average".into()))?;
        let n: usize = estimates.iter().map(|e| e.sample_count).sum();
        let mut mean = first.mean_block.clone();
        let mut chol = first.cholvech_block.as_vector().clone();
        for e in &estimates[1..] {
            if e.dim() != first.dim() || e.kind != first.kind {
                return Err(Error::InvalidArgument(
                    "cannot average estimates of different shape or kind".into(),
                ));
            }
            mean += &e.mean_block;
            chol += e.cholvech_block.as_vector();
        }
        let count = estimates.len() as f64;
        Ok(Self {
            mean_block: mean / count,
            cholvech_block: HalfVec::new(first.dim(), chol / count)?,
            kind: first.kind,
            sample_count: n,
        })
    }
}

/// `vech(bar(g zᵀ))`.
fn lower_outer_vech(g: &DVector<f64>, z: &DVector<f64>) -> HalfVec {
    let d = g.len();
    let mut data = DVector::zeros(half_len(d));
    for j in 0..d {
        for i in j..d {
            data[vech_index(d, i, j)] = g[i] * z[j];
        }
    }
    HalfVec::new(d, data).expect("length by construction")
}

/// Euclidean reparametrisation gradient: mean block `∇θh(θ)`, Cholesky block
/// `vech(Ḡ₁)` with `G₁ = ∇θh(θ) zᵀ`, `θ = Cz + μ`.
pub fn euclidean_grad(q: &GaussianApprox, model: &dyn TargetModel, z: &DVector<f64>) -> Result<GradientEstimate> {
    let theta = sample_reparam(q, z)?;
    let g = grad_h(q, model, &theta)?;
    let block = lower_outer_vech(&g, z);
    GradientEstimate::single(g, block, EstimatorKind::EuclidReparam)
}

/// Score-function gradient `∇λ log q(θ) · h(θ)`, no derivatives of the model.
pub fn score_function_grad(
    q: &GaussianApprox,
    model: &dyn TargetModel,
    theta: &DVector<f64>,
) -> Result<GradientEstimate> {
    let h = h_value(q, model, theta)?;
    let (sm, sc) = q.score(theta)?;
    GradientEstimate::single(sm * h, sc.scale(h), EstimatorKind::Score)
}

/// Closed-form natural gradient in `(μ, vech C)` from a given `∇θh(θ)` and the
/// draw `z` that produced `θ`.
pub fn cholesky_natgrad_from_grad(
    q: &GaussianApprox,
    grad: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<GradientEstimate> {
    let d = q.dim();
    let c = &q.chol;
    let u = c.transpose() * grad;
    // With C lower triangular, bar(Cᵀ bar(g zᵀ)) = bar((Cᵀg) zᵀ).
    let mut g2 = DMatrix::zeros(d, d);
    for j in 0..d {
        for i in j..d {
            g2[(i, j)] = u[i] * z[j];
        }
        g2[(j, j)] *= 0.5;
    }
    // C times a lower-triangular matrix stays lower triangular.
    let mut data = DVector::zeros(half_len(d));
    for j in 0..d {
        for i in j..d {
            let mut acc = 0.0;
            for k in j..=i {
                acc += c[(i, k)] * g2[(k, j)];
            }
            data[vech_index(d, i, j)] = acc;
        }
    }
    let mean_block = c * &u;
    GradientEstimate::single(mean_block, HalfVec::new(d, data)?, EstimatorKind::NatgradCholesky)
}

/// Natural gradient in `(μ, vech C)`: `(CCᵀ∇θh, vech[C(Ḡ₂ − dg(Ḡ₂)/2)])`,
/// `Ḡ₂ = bar(Cᵀ Ḡ₁)`, `Ḡ₁ = bar(∇θh zᵀ)`, `θ = Cz + μ`.
pub fn natural_grad_cholesky(
    q: &GaussianApprox,
    model: &dyn TargetModel,
    z: &DVector<f64>,
) -> Result<GradientEstimate> {
    let theta = sample_reparam(q, z)?;
    let g = grad_h(q, model, &theta)?;
    cholesky_natgrad_from_grad(q, &g, z)
}

/// Fisher information of `(μ, vech C)`:
/// `diag(Σ⁻¹, 2L(I⊗C⁻ᵀ)N(I⊗C⁻¹)Lᵀ)`. Dense, for diagnostics.
pub fn fisher_matrix(q: &GaussianApprox) -> Result<DMatrix<f64>> {
    let d = q.dim();
    let cinv = q.chol_inverse()?;
    let prec = cinv.transpose() * &cinv;
    let eye = DMatrix::identity(d, d);
    let l = elimination_matrix(d);
    let lower = (&l * kron(&eye, &cinv.transpose()) * n_matrix(d) * kron(&eye, &cinv) * l.transpose()) * 2.0;
    Ok(block_diag(&prec, &lower))
}

/// Closed-form inverse Fisher:
/// `diag(Σ, ½L(I⊗C)Lᵀ(LNLᵀ)⁻¹L(I⊗Cᵀ)Lᵀ)`.
pub fn fisher_inverse(q: &GaussianApprox) -> Result<DMatrix<f64>> {
    q.require_nonsingular("fisher_inverse")?;
    let d = q.dim();
    let c = &q.chol;
    let eye = DMatrix::identity(d, d);
    let l = elimination_matrix(d);
    let lnl = &l * n_matrix(d) * l.transpose();
    let lnl_inv = lnl
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("L N Lᵀ is singular".into()))?;
    let lower =
        (&l * kron(&eye, c) * l.transpose()) * lnl_inv * (&l * kron(&eye, &c.transpose()) * l.transpose()) * 0.5;
    Ok(block_diag(&q.covariance(), &lower))
}

pub(crate) fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(na + nb, na + nb);
    out.view_mut((0, 0), (na, na)).copy_from(a);
    out.view_mut((na, na), (nb, nb)).copy_from(b);
    out
}

/// Per-sample natural gradient with respect to the natural parameters, along
/// with the first and second derivatives of `h` it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParamGradient {
    pub grad_h: DVector<f64>,
    pub hess_h: DMatrix<f64>,
    /// `∇θh − ∇²θh μ`, the block for `Σ⁻¹μ`.
    pub linear: DVector<f64>,
    /// `½Dᵀvec(∇²θh)`, the block for `−½Dᵀvec(Σ⁻¹)`.
    pub quadratic: HalfVec,
}

pub(crate) fn require_hessian(model: &dyn TargetModel, estimator: EstimatorKind) -> Result<()> {
    if !model.has_hessian() {
        return Err(Error::MissingHessian {
            estimator: estimator.to_string(),
            model: model.name().to_string(),
        });
    }
    Ok(())
}

pub(crate) fn natural_param_blocks(
    mean: &DVector<f64>,
    grad_h: DVector<f64>,
    hess_h: DMatrix<f64>,
) -> Result<NaturalParamGradient> {
    let linear = &grad_h - &hess_h * mean;
    let quadratic = matcalc::apply_duplication_transpose(&matcalc::vec(&hess_h))?.scale(0.5);
    if linear.iter().chain(hess_h.iter()).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("natural-parameter gradient"));
    }
    Ok(NaturalParamGradient {
        grad_h,
        hess_h,
        linear,
        quadratic,
    })
}

/// Natural gradient for `(Σ⁻¹μ, −½Dᵀvec Σ⁻¹)` at one draw `θ`, with
/// `∇²θh = ∇²θ log p + C⁻ᵀC⁻¹`.
pub fn natural_grad_natural_params(
    q: &GaussianApprox,
    model: &dyn TargetModel,
    theta: &DVector<f64>,
) -> Result<NaturalParamGradient> {
    require_hessian(model, EstimatorKind::NatgradNatural)?;
    let g = grad_h(q, model, theta)?;
    let hess_p = model.hessian_log_joint(theta).expect("has_hessian checked above");
    let hess_h = hess_p + q.precision()?;
    natural_param_blocks(&q.mean, g, hess_h)
}

/// `Σ⁻¹ ← Σ⁻¹ − ρ∇²θh`, then `μ ← μ + ρ Σ_new ∇θh`. Fails if the new precision
/// is not positive definite.
pub fn apply_natural_param_update(
    q: &GaussianApprox,
    grad_h: &DVector<f64>,
    hess_h: &DMatrix<f64>,
    rho: f64,
) -> Result<GaussianApprox> {
    let prec = q.precision()? - hess_h * rho;
    let prec = (&prec + prec.transpose()) * 0.5;
    let chol = prec.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        what: "updated precision".into(),
    })?;
    let cov = chol.inverse();
    let mean = &q.mean + &cov * grad_h * rho;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("natural-parameter mean update"));
    }
    GaussianApprox::from_covariance(mean, &cov)
}

/// How the Cholesky factor is stored while it is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CholeskyMode {
    /// Update `C` directly; no sign constraint on the diagonal.
    #[default]
    Plain,
    /// Update `C'` with `C'ᵢᵢ = log Cᵢᵢ`; the diagonal stays positive.
    LogDiagonal,
}

/// `J(C) ⊙ block`: diagonal entries scaled by `Cᵢᵢ`, the rest unchanged.
pub fn mask_log_diagonal(q: &GaussianApprox, block: &HalfVec) -> HalfVec {
    let d = q.dim();
    let mut data = block.as_vector().clone();
    for i in 0..d {
        data[vech_index(d, i, i)] *= q.chol[(i, i)];
    }
    HalfVec::new(d, data).expect("same shape")
}

/// Adds an increment to `(μ, C)` (plain mode) or to `(μ, C')` (log-diagonal
/// mode), keeping `C` lower triangular.
pub fn apply_increment(
    q: &GaussianApprox,
    mean_inc: &DVector<f64>,
    chol_inc: &HalfVec,
    mode: CholeskyMode,
) -> Result<GaussianApprox> {
    let d = q.dim();
    if mean_inc.len() != d || chol_inc.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "apply_increment",
            expected: d,
            found: mean_inc.len(),
        });
    }
    let mean = &q.mean + mean_inc;
    let mut chol = q.chol.clone();
    for j in 0..d {
        for i in j..d {
            let inc = chol_inc.get(i, j);
            if inc == 0.0 {
                continue;
            }
            if i == j && mode == CholeskyMode::LogDiagonal {
                let c = chol[(i, i)];
                if c <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "log-diagonal mode needs a positive diagonal, C[{i},{i}] = {c}"
                    )));
                }
                chol[(i, i)] = (c.ln() + inc).exp();
            } else {
                chol[(i, j)] += inc;
            }
        }
    }
    if mean.iter().chain(chol.iter()).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("parameter update"));
    }
    Ok(GaussianApprox { mean, chol })
}

/// One natural-gradient step on `(μ, C)`:
/// `μ ← μ + ρCCᵀ∇θh`, `C ← C + ρC(Ḡ₂ − dg(Ḡ₂)/2)`.
pub fn step_algorithm1(
    q: &GaussianApprox,
    model: &dyn TargetModel,
    z: &DVector<f64>,
    rho: f64,
) -> Result<GaussianApprox> {
    check_rate(rho)?;
    let ng = natural_grad_cholesky(q, model, z)?;
    apply_increment(
        q,
        &(&ng.mean_block * rho),
        &ng.cholvech_block.scale(rho),
        CholeskyMode::Plain,
    )
}

/// As [`step_algorithm1`] but on the log-diagonal factor `C'`:
/// `C' ← C' + ρ J(C) ⊙ [C(Ḡ₂ − dg(Ḡ₂)/2)]`.
pub fn step_logdiag(q: &GaussianApprox, model: &dyn TargetModel, z: &DVector<f64>, rho: f64) -> Result<GaussianApprox> {
    check_rate(rho)?;
    if !q.has_positive_diagonal() {
        return Err(Error::InvalidArgument(
            "log-diagonal step needs a positive diagonal".into(),
        ));
    }
    let ng = natural_grad_cholesky(q, model, z)?;
    let masked = mask_log_diagonal(q, &ng.cholvech_block);
    apply_increment(
        q,
        &(&ng.mean_block * rho),
        &masked.scale(rho),
        CholeskyMode::LogDiagonal,
    )
}

fn check_rate(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {rho}")));
    }
    Ok(())
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    /// Sample mean and `s/√n` (`s` with an `n − 1` denominator; zero when
    /// `n = 1`).
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        McEstimate {
            mean,
            std_error,
            samples: n,
        }
    }
}

/// `E_q[h(θ)]` over `n_samples` reparametrised draws.
pub fn elbo_estimate<R: Rng + ?Sized>(
    q: &GaussianApprox,
    model: &dyn TargetModel,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut values = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = draw_standard_normal(q.dim(), rng);
        let theta = sample_reparam(q, &z)?;
        values.push(h_value(q, model, &theta)?);
    }
    Ok(McEstimate::from_samples(&values))
}

/// `KL(N(μ, CCᵀ) ‖ N(m, S))` in closed form.
pub fn gaussian_kl(q: &GaussianApprox, reference: &ExactGaussianPosterior) -> Result<f64> {
    let d = q.dim();
    if reference.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "gaussian_kl",
            expected: d,
            found: reference.dim(),
        });
    }
    q.require_nonsingular("gaussian_kl")?;
    let ls = reference.chol();
    // tr(S⁻¹Σ) = ‖L_S⁻¹ C‖²_F
    let a = ls
        .solve_lower_triangular(q.chol())
        .ok_or_else(|| Error::NotPositiveDefinite {
            what: "reference covariance".into(),
        })?;
    let diff = reference.mean() - q.mean();
    let w = ls.solve_lower_triangular(&diff).expect("checked above");
    let log_det_s = 2.0 * ls.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_q = 2.0 * q.log_abs_det_chol();
    let kl = 0.5 * (a.norm_squared() + w.norm_squared() - d as f64 + log_det_s - log_det_q);
    Ok(kl.max(0.0))
}
