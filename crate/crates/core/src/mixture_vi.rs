//! Finite mixture of Gaussians `q(θ) = Σ_c π_c N(μ_c, C_c C_cᵀ)`.
//!
//! Weights are held as logits relative to the last component,
//! `λ_wc = log(π_c / π_K)` for `c < K`. Per-component updates are weighted by
//! the responsibilities `δ_c(θ) = q_c(θ) / q(θ)`, computed in log space.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss_vi::{
    self, apply_natural_param_update, cholesky_natgrad_from_grad, draw_standard_normal, sample_reparam, EstimatorKind,
    GaussianApprox, GradientEstimate, McEstimate,
};
use crate::matcalc::HalfVec;
use crate::model::{log_sum_exp, TargetModel};

/// Maximum number of step halvings tried when a precision update is not
/// positive definite.
pub const MAX_HALVINGS: u32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureApprox {
    components: Vec<GaussianApprox>,
    logits: DVector<f64>,
}

impl MixtureApprox {
    pub fn new(components: Vec<GaussianApprox>, logits: DVector<f64>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("a mixture needs at least one component".into()))?;
        let d = first.dim();
        for c in &components {
            if c.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: "mixture components",
                    expected: d,
                    found: c.dim(),
                });
            }
        }
        if logits.len() + 1 != components.len() {
            return Err(Error::DimensionMismatch {
                context: "mixture logits",
                expected: components.len() - 1,
                found: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("mixture logits"));
        }
        Ok(Self { components, logits })
    }

    /// Equal weights.
    pub fn uniform(components: Vec<GaussianApprox>) -> Result<Self> {
        let k = components.len().max(1);
        Self::new(components, DVector::zeros(k - 1))
    }

    /// `K` components with means drawn from `N(0, I)`, `C = scale · I` and
    /// equal weights.
    pub fn jittered<R: Rng + ?Sized>(d: usize, k: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("a mixture needs at least one component".into()));
        }
        let comps = (0..k)
            .map(|_| GaussianApprox::with_mean(draw_standard_normal(d, rng), scale))
            .collect::<Result<Vec<_>>>()?;
        Self::uniform(comps)
    }

    pub fn from_gaussian(q: GaussianApprox) -> Self {
        Self {
            components: vec![q],
            logits: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[GaussianApprox] {
        &self.components
    }

    pub fn logits(&self) -> &DVector<f64> {
        &self.logits
    }

    /// `log π` with the reference logit fixed at 0.
    pub fn log_weights(&self) -> Vec<f64> {
        let mut full: Vec<f64> = self.logits.iter().copied().collect();
        full.push(0.0);
        let lse = log_sum_exp(&full);
        full.iter().map(|v| v - lse).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights().into_iter().map(f64::exp).collect()
    }

    pub(crate) fn with_components(&self, components: Vec<GaussianApprox>) -> Self {
        Self {
            components,
            logits: self.logits.clone(),
        }
    }

    pub fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(mixture_density_parts(self, theta)?.log_q)
    }
}

/// `δ_c(θ) = q_c(θ) / q(θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub values: DVector<f64>,
}

impl Responsibilities {
    /// Posterior component probabilities `π_c δ_c(θ)`.
    pub fn posterior(&self, weights: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.values.len(), self.values.iter().zip(weights).map(|(d, w)| d * w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityParts {
    pub log_q: f64,
    pub responsibilities: Responsibilities,
    pub component_log_q: Vec<f64>,
}

pub fn mixture_density_parts(mix: &MixtureApprox, theta: &DVector<f64>) -> Result<DensityParts> {
    let log_w = mix.log_weights();
    let component_log_q = mix
        .components
        .iter()
        .map(|c| c.log_density(theta))
        .collect::<Result<Vec<_>>>()?;
    let joint: Vec<f64> = log_w.iter().zip(&component_log_q).map(|(a, b)| a + b).collect();
    // Shift by the largest term before exponentiating: far in the tails
    // log q is large in magnitude and `l_c − log q` would lose digits.
    let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::non_finite("mixture log-density"));
    }
    let log_norm = joint.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let log_q = max + log_norm;
    let values = DVector::from_iterator(
        joint.len(),
        joint
            .iter()
            .zip(&log_w)
            .map(|(j, lw)| ((j - max) - log_norm).exp() / lw.exp()),
    );
    Ok(DensityParts {
        log_q,
        responsibilities: Responsibilities { values },
        component_log_q,
    })
}

/// A draw from the mixture together with its latent component and the
/// standard-normal vector that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDraw {
    pub theta: DVector<f64>,
    pub component: usize,
    pub z: DVector<f64>,
}

/// `w ~ Categorical(π)`, `θ = C_w z + μ_w`. With one component no categorical
/// draw is consumed, so the stream matches [`gauss_vi::sample_reparam`].
pub fn sample_mixture<R: Rng + ?Sized>(mix: &MixtureApprox, rng: &mut R) -> Result<MixtureDraw> {
    let component = if mix.n_components() == 1 {
        0
    } else {
        let u: f64 = rng.random();
        let weights = mix.weights();
        let mut acc = 0.0;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    let z = draw_standard_normal(mix.dim(), rng);
    let theta = sample_reparam(&mix.components[component], &z)?;
    Ok(MixtureDraw { theta, component, z })
}

/// Everything the mixture updates need at one point `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEval {
    pub theta: DVector<f64>,
    pub h: f64,
    pub parts: DensityParts,
    pub grad_h: DVector<f64>,
    /// `∇²θh(θ)`, present only when requested.
    pub hess_h: Option<DMatrix<f64>>,
}

/// `∇θ log q(θ)` and optionally `∇²θ log q(θ)` of the full mixture:
/// `Σ r_c g_c` and `Σ r_c(−Σ_c⁻¹) + Σ r_c (g_c − ḡ)(g_c − ḡ)ᵀ`, where
/// `r_c = π_c δ_c` and `g_c = ∇ log q_c`.
fn mixture_log_q_derivs(
    mix: &MixtureApprox,
    theta: &DVector<f64>,
    parts: &DensityParts,
    with_hessian: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let r = parts.responsibilities.posterior(&mix.weights());
    let grads = mix
        .components
        .iter()
        .map(|c| c.grad_log_density(theta))
        .collect::<Result<Vec<_>>>()?;
    let mut g_bar = &grads[0] * r[0];
    for (g, rc) in grads.iter().zip(r.iter()).skip(1) {
        g_bar += g * *rc;
    }
    if !with_hessian {
        return Ok((g_bar, None));
    }
    let mut hess = -mix.components[0].precision()? * r[0];
    for (c, rc) in mix.components.iter().zip(r.iter()).skip(1) {
        hess -= c.precision()? * *rc;
    }
    for (g, rc) in grads.iter().zip(r.iter()) {
        let dev = g - &g_bar;
        hess += &dev * dev.transpose() * *rc;
    }
    Ok((g_bar, Some(hess)))
}

/// `h`, `∇θh` and optionally `∇²θh` for `h = log p(y, θ) − log q(θ)` with the
/// full mixture density.
pub fn evaluate_point(
    mix: &MixtureApprox,
    model: &dyn TargetModel,
    theta: &DVector<f64>,
    with_hessian: bool,
) -> Result<PointEval> {
    if model.dim() != mix.dim() {
        return Err(Error::DimensionMismatch {
            context: "model dimension",
            expected: mix.dim(),
            found: model.dim(),
        });
    }
    if with_hessian {
        gauss_vi::require_hessian(model, EstimatorKind::NatgradNatural)?;
    }
    let parts = mixture_density_parts(mix, theta)?;
    let (glq, hlq) = mixture_log_q_derivs(mix, theta, &parts, with_hessian)?;
    let h = model.log_joint(theta) - parts.log_q;
    let grad_h = model.grad_log_joint(theta) - glq;
    let hess_h = hlq.map(|hlq| model.hessian_log_joint(theta).expect("has_hessian checked above") - hlq);
    if !h.is_finite() || grad_h.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("mixture h(θ)"));
    }
    Ok(PointEval {
        theta: theta.clone(),
        h,
        parts,
        grad_h,
        hess_h,
    })
}

/// `∇θh(θ)` against the full mixture.
pub fn mixture_grad_h(mix: &MixtureApprox, model: &dyn TargetModel, theta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(evaluate_point(mix, model, theta, false)?.grad_h)
}

/// Per-sample natural gradient for the logits:
/// `(δ_c(θ) − δ_K(θ)) · (h(θ) − baseline)` for `c < K`.
pub fn logit_natural_grad(eval: &PointEval, baseline: f64) -> DVector<f64> {
    let delta = &eval.parts.responsibilities.values;
    let k = delta.len();
    let centred = eval.h - baseline;
    DVector::from_iterator(k - 1, (0..k - 1).map(|c| (delta[c] - delta[k - 1]) * centred))
}

/// Same as [`logit_natural_grad`] with the model evaluated at `θ`.
pub fn logit_natural_grad_at(
    mix: &MixtureApprox,
    model: &dyn TargetModel,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(logit_natural_grad(&evaluate_point(mix, model, theta, false)?, 0.0))
}

/// `λ_w ← λ_w + ρ · grad`.
pub fn apply_logit_update(mix: &MixtureApprox, grad: &DVector<f64>, rho: f64) -> Result<MixtureApprox> {
    if grad.len() != mix.logits.len() {
        return Err(Error::DimensionMismatch {
            context: "logit gradient",
            expected: mix.logits.len(),
            found: grad.len(),
        });
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be nonnegative, got {rho}"
        )));
    }
    let logits = &mix.logits + grad * rho;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("logit update"));
    }
    Ok(MixtureApprox {
        components: mix.components.clone(),
        logits,
    })
}

/// What happened to one component in a natural-parameter step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ComponentStep {
    Applied { rate: f64, halvings: u32 },
    Skipped,
}

/// Natural-parameter update of every component from evaluations at draws
/// `θ_s`, each carrying `∇θh` and `∇²θh`:
///
/// `Σ_c⁻¹ ← Σ_c⁻¹ − ρ avg_s[δ_c(θ_s)∇²θh(θ_s)]`,
/// `μ_c ← μ_c + ρ Σ_c^new avg_s[δ_c(θ_s)∇θh(θ_s)]`.
///
/// A component whose new precision is not positive definite retries with
/// `ρ/2`, up to [`MAX_HALVINGS`] times, and is left unchanged after that.
pub fn component_natparam_step(
    mix: &MixtureApprox,
    evals: &[PointEval],
    rho: f64,
) -> Result<(MixtureApprox, Vec<ComponentStep>)> {
    if evals.is_empty() {
        return Err(Error::InvalidArgument("no evaluations supplied".into()));
    }
    let n = evals.len() as f64;
    let mut next = Vec::with_capacity(mix.n_components());
    let mut outcomes = Vec::with_capacity(mix.n_components());
    for (c, comp) in mix.components.iter().enumerate() {
        let (mut g, mut hm) = weighted_stats(&evals[0], c)?;
        for e in &evals[1..] {
            let (ge, he) = weighted_stats(e, c)?;
            g += ge;
            hm += he;
        }
        let g = g / n;
        let hm = hm / n;
        let mut rate = rho;
        let mut outcome = ComponentStep::Skipped;
        let mut updated = comp.clone();
        for halvings in 0..=MAX_HALVINGS {
            match apply_natural_param_update(comp, &g, &hm, rate) {
                Ok(q) => {
                    updated = q;
                    outcome = ComponentStep::Applied { rate, halvings };
                    break;
                }
                Err(Error::NotPositiveDefinite { .. }) => rate *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if outcome == ComponentStep::Skipped {
            log::warn!("component {c}: precision update not positive definite after {MAX_HALVINGS} halvings, skipped");
        }
        next.push(updated);
        outcomes.push(outcome);
    }
    Ok((mix.with_components(next), outcomes))
}

fn weighted_stats(e: &PointEval, c: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let hess = e
        .hess_h
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("natural-parameter step needs Hessian evaluations".into()))?;
    let delta = e.parts.responsibilities.values[c];
    Ok((&e.grad_h * delta, hess * delta))
}

/// Single-draw natural-parameter update of all components at `θ`.
pub fn component_natparam_update(
    mix: &MixtureApprox,
    model: &dyn TargetModel,
    theta: &DVector<f64>,
    rho: f64,
) -> Result<MixtureApprox> {
    let eval = evaluate_point(mix, model, theta, true)?;
    Ok(component_natparam_step(mix, &[eval], rho)?.0)
}

/// Closed-form natural gradient in `(μ_c, vech C_c)` at
/// `θ_c = C_c z_c + μ_c`, with `∇θh` taken against the full mixture.
pub fn component_cholesky_natgrad(
    mix: &MixtureApprox,
    model: &dyn TargetModel,
    component: usize,
    z: &DVector<f64>,
) -> Result<GradientEstimate> {
    let comp = mix.components.get(component).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "component {component} out of range for K = {}",
            mix.n_components()
        ))
    })?;
    let theta = sample_reparam(comp, z)?;
    let g = mixture_grad_h(mix, model, &theta)?;
    cholesky_natgrad_from_grad(comp, &g, z)
}

/// `E_q[log p(y, θ) − log q(θ)]` over `n_samples` mixture draws.
pub fn mixture_elbo_estimate<R: Rng + ?Sized>(
    mix: &MixtureApprox,
    model: &dyn TargetModel,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut values = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let draw = sample_mixture(mix, rng)?;
        let log_q = mixture_density_parts(mix, &draw.theta)?.log_q;
        values.push(model.log_joint(&draw.theta) - log_q);
    }
    Ok(McEstimate::from_samples(&values))
}

/// Score of `log q(θ, w) = log π_w + log q_w(θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointScore {
    /// Per component `(mean, vech C)` score; zero for components other than `w`.
    pub components: Vec<(DVector<f64>, HalfVec)>,
    /// `e_w − π` restricted to the first `K − 1` entries.
    pub logits: DVector<f64>,
}

pub fn joint_score(mix: &MixtureApprox, theta: &DVector<f64>, w: usize) -> Result<JointScore> {
    let k = mix.n_components();
    if w >= k {
        return Err(Error::InvalidArgument(format!(
            "component {w} out of range for K = {k}"
        )));
    }
    let d = mix.dim();
    let components = (0..k)
        .map(|c| {
            if c == w {
                mix.components[c].score(theta)
            } else {
                Ok((DVector::zeros(d), HalfVec::zeros(d)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = mix.weights();
    let logits = DVector::from_iterator(k - 1, (0..k - 1).map(|c| if c == w { 1.0 } else { 0.0 } - weights[c]));
    Ok(JointScore { components, logits })
}

/// The mixture's own log-density as a target.
#[derive(Debug, Clone)]
pub struct MixtureDensityModel {
    mix: MixtureApprox,
}

impl MixtureDensityModel {
    pub fn new(mix: MixtureApprox) -> Self {
        Self { mix }
    }
}

impl TargetModel for MixtureDensityModel {
    fn name(&self) -> &str {
        "mixture-density"
    }

    fn dim(&self) -> usize {
        self.mix.dim()
    }

    fn log_joint(&self, theta: &DVector<f64>) -> f64 {
        self.mix.log_density(theta).unwrap_or(f64::NAN)
    }

    fn grad_log_joint(&self, theta: &DVector<f64>) -> DVector<f64> {
        mixture_density_parts(&self.mix, theta)
            .and_then(|p| mixture_log_q_derivs(&self.mix, theta, &p, false))
            .map(|(g, _)| g)
            .unwrap_or_else(|_| DVector::from_element(theta.len(), f64::NAN))
    }

    fn hessian_log_joint(&self, theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        mixture_density_parts(&self.mix, theta)
            .and_then(|p| mixture_log_q_derivs(&self.mix, theta, &p, true))
            .ok()
            .and_then(|(_, h)| h)
    }

    fn has_hessian(&self) -> bool {
        true
    }
}
