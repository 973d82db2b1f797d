//! Building and running an experiment from a validated spec.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cholvi::gauss_vi::{gaussian_kl, GaussianApprox};
use cholvi::mixture_vi::MixtureApprox;
use cholvi::model::{
    load_regression_csv, make_bimodal_target, make_conjugate_gaussian, make_logistic_regression, synthetic_logistic,
    synthetic_regression,
};
use cholvi::optim::{derive_rng, run_gaussian, run_mixture, tag, RunConfig, TraceRecord};
use cholvi::{Error as CoreError, ExactGaussianPosterior, TargetModel};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::output::{atomic_write, trace_csv};
use crate::spec::{self, ExperimentSpec, Family, ModelKind, SpecError, SpecIssue};

/// Environment variable that sets the directory relative output paths are
/// resolved against. Defaults to the working directory.
pub const OUTPUT_ROOT_ENV: &str = "CHOLVI_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, Clone)]
pub enum Init {
    Gaussian(GaussianApprox),
    Mixture(MixtureApprox),
}

pub struct Experiment {
    pub model: Box<dyn TargetModel>,
    /// Exact posterior, for targets where it is known.
    pub posterior: Option<ExactGaussianPosterior>,
    pub init: Init,
    pub config: RunConfig,
}

fn issue(key: &str, err: impl std::fmt::Display) -> Vec<SpecIssue> {
    vec![SpecIssue::new(key, err.to_string())]
}

fn matrix_from_rows(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<f64>, Vec<SpecIssue>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(issue(key, format!("expected a square {n}x{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Builds the model, initial approximation and run configuration. Expects a
/// spec that has been through [`spec::parse_spec`] or [`spec::validate`].
pub fn build(spec: &ExperimentSpec) -> Result<Experiment, Vec<SpecIssue>> {
    let m = &spec.model;
    let data = || -> Result<(DMatrix<f64>, DVector<f64>), Vec<SpecIssue>> {
        if let Some(path) = &m.data_file {
            let data = load_regression_csv(path).map_err(|e| issue("model.data_file", e))?;
            return Ok((data.design, data.response));
        }
        let syn = m.synthetic.as_ref().ok_or_else(|| issue("model", "missing data"))?;
        let theta = DVector::from_vec(syn.true_theta.clone());
        Ok(match m.kind {
            ModelKind::Logistic => synthetic_logistic(&theta, syn.n_obs, syn.seed),
            _ => synthetic_regression(&theta, syn.n_obs, m.noise_var.unwrap_or(1.0), syn.seed),
        })
    };

    let (model, posterior): (Box<dyn TargetModel>, Option<ExactGaussianPosterior>) = match m.kind {
        ModelKind::Conjugate => {
            let (x, y) = data()?;
            let mean = m
                .prior_mean
                .clone()
                .ok_or_else(|| issue("model.prior_mean", "missing"))?;
            let cov = matrix_from_rows(m.prior_cov.as_deref().unwrap_or_default(), "model.prior_cov")?;
            if mean.len() != x.ncols() || cov.nrows() != x.ncols() {
                return Err(issue(
                    "model.prior_mean",
                    format!("prior dimensions must match the {} covariates", x.ncols()),
                ));
            }
            let noise = m.noise_var.unwrap_or(1.0);
            let key = if noise > 0.0 {
                "model.prior_cov"
            } else {
                "model.noise_var"
            };
            let (model, post) =
                make_conjugate_gaussian(DVector::from_vec(mean), cov, x, noise, y).map_err(|e| issue(key, e))?;
            (Box::new(model), Some(post))
        }
        ModelKind::Logistic => {
            let (x, y) = data()?;
            let model =
                make_logistic_regression(x, y, m.prior_precision.unwrap_or(1.0)).map_err(|e| issue("model", e))?;
            (Box::new(model), None)
        }
        ModelKind::Bimodal => {
            let centers = m
                .centers
                .as_ref()
                .ok_or_else(|| issue("model.centers", "missing"))?
                .iter()
                .map(|c| DVector::from_vec(c.clone()))
                .collect();
            let target = make_bimodal_target(
                centers,
                m.scales.clone().unwrap_or_default(),
                m.weights.clone().unwrap_or_default(),
            )
            .map_err(|e| issue("model", e))?;
            (Box::new(target), None)
        }
    };

    let d = model.dim();
    let a = &spec.approx;
    let scale = a.init_scale;
    let init = match a.family {
        Family::Gaussian => {
            let mean = a
                .init_mean
                .clone()
                .map(DVector::from_vec)
                .unwrap_or_else(|| DVector::zeros(d));
            Init::Gaussian(GaussianApprox::with_mean(mean, scale).map_err(|e| issue("approx", e))?)
        }
        Family::Mixture => {
            let k = a.components.unwrap_or(2);
            let mix = match &a.init_means {
                Some(means) => {
                    let comps = means
                        .iter()
                        .map(|mu| GaussianApprox::with_mean(DVector::from_vec(mu.clone()), scale))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| issue("approx.init_means", e))?;
                    MixtureApprox::uniform(comps)
                }
                None => {
                    let mut rng = derive_rng(spec.run.seed, tag::INIT, 0, 0);
                    MixtureApprox::jittered(d, k, scale, &mut rng)
                }
            }
            .map_err(|e| issue("approx", e))?;
            Init::Mixture(mix)
        }
    };

    let config = spec.run.to_config(spec.output.timing);
    config.validate(model.as_ref()).map_err(|e| {
        let key = match &e {
            CoreError::MissingHessian { .. } => "run.estimator",
            CoreError::InvalidArgument(msg) if msg.contains("schedule") => "run.schedule",
            _ => "run",
        };
        issue(key, e)
    })?;

    Ok(Experiment {
        model,
        posterior,
        init,
        config,
    })
}

// ---------------------------------------------------------------------------
// Summary

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Cholesky factor of the covariance, row by row.
    pub chol: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub model: String,
    pub family: Family,
    pub estimator: String,
    pub seed: u64,
    pub iterations_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped_early_at: Option<usize>,
    /// `null` in the JSON when the run ended on a non-finite estimate.
    #[serde(with = "nullable_f64")]
    pub final_elbo: f64,
    #[serde(with = "nullable_f64")]
    pub final_elbo_se: f64,
    /// KL(q ‖ posterior), present when the exact posterior is known and q
    /// is a single Gaussian.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_final: Option<f64>,
    pub skipped_steps: usize,
    pub components: Vec<ComponentSummary>,
    pub config: ExperimentSpec,
}

/// JSON has no NaN or infinity; write them as `null` and read `null` back
/// as NaN.
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

fn component_summary(q: &GaussianApprox, weight: f64) -> ComponentSummary {
    let c = q.chol();
    ComponentSummary {
        weight,
        mean: q.mean().iter().copied().collect(),
        chol: (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect(),
    }
}

enum Fitted {
    Gaussian(GaussianApprox),
    Mixture(MixtureApprox),
}

impl Fitted {
    fn components(&self) -> Vec<ComponentSummary> {
        match self {
            Fitted::Gaussian(q) => vec![component_summary(q, 1.0)],
            Fitted::Mixture(m) => m
                .components()
                .iter()
                .zip(m.weights())
                .map(|(q, w)| component_summary(q, w))
                .collect(),
        }
    }

    fn kl(&self, post: Option<&ExactGaussianPosterior>) -> Option<f64> {
        let q = match self {
            Fitted::Gaussian(q) => q,
            Fitted::Mixture(m) if m.n_components() == 1 => &m.components()[0],
            Fitted::Mixture(_) => return None,
        };
        post.and_then(|p| gaussian_kl(q, p).ok())
    }
}

// ---------------------------------------------------------------------------
// Running

#[derive(Debug)]
pub struct RunReport {
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Summary,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run aborted: {message} (partial results in {})", summary_path.display())]
    Aborted { message: String, summary_path: PathBuf },
}

/// Runs a spec and writes its trace and summary under
/// `output_root / spec.output.dir`.
pub fn run_experiment(spec: &ExperimentSpec, output_root: &Path) -> Result<RunReport, ExperimentError> {
    spec::validate(spec)?;
    let exp = build(spec).map_err(|issues| ExperimentError::Spec(SpecError::Invalid(issues)))?;
    let dir = output_root.join(&spec.output.dir);
    std::fs::create_dir_all(&dir).map_err(|source| ExperimentError::Output {
        path: dir.clone(),
        source,
    })?;
    let trace_path = dir.join(&spec.output.trace);
    let summary_path = dir.join(&spec.output.summary);

    let started = Instant::now();
    let k = match &exp.init {
        Init::Gaussian(_) => None,
        Init::Mixture(m) => Some(m.n_components()),
    };
    let (fitted, trace, iterations_run, stopped_early_at, skipped, error) = match exp.init.clone() {
        Init::Gaussian(q) => match run_gaussian(&exp.config, exp.model.as_ref(), q) {
            Ok(o) => (
                Fitted::Gaussian(o.approx),
                o.trace,
                o.iterations_run,
                o.stopped_early_at,
                0,
                None,
            ),
            Err(e) => {
                let msg = e.to_string();
                (Fitted::Gaussian(e.last_good), e.trace, e.iteration, None, 0, Some(msg))
            }
        },
        Init::Mixture(m) => match run_mixture(&exp.config, exp.model.as_ref(), m) {
            Ok(o) => (
                Fitted::Mixture(o.approx),
                o.trace,
                o.iterations_run,
                o.stopped_early_at,
                o.skipped_steps,
                None,
            ),
            Err(e) => {
                let msg = e.to_string();
                (Fitted::Mixture(e.last_good), e.trace, e.iteration, None, 0, Some(msg))
            }
        },
    };
    log::info!(
        "{} iterations in {:.2} s",
        iterations_run,
        started.elapsed().as_secs_f64()
    );

    let last = trace
        .last()
        .cloned()
        .unwrap_or_else(|| TraceRecord::from_elbo(0, f64::NAN));
    let summary = Summary {
        status: if error.is_some() {
            RunStatus::Aborted
        } else {
            RunStatus::Completed
        },
        error: error.clone(),
        model: exp.model.name().to_string(),
        family: spec.approx.family,
        estimator: spec.run.estimator.to_string(),
        seed: spec.run.seed,
        iterations_run,
        stopped_early_at,
        final_elbo: last.elbo,
        final_elbo_se: last.elbo_se,
        kl_final: fitted.kl(exp.posterior.as_ref()),
        skipped_steps: skipped,
        components: fitted.components(),
        config: spec.clone(),
    };

    let write = |path: &Path, bytes: &[u8]| {
        atomic_write(path, bytes).map_err(|source| ExperimentError::Output {
            path: path.to_path_buf(),
            source,
        })
    };
    write(&trace_path, trace_csv(&trace, k).as_bytes())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&summary_path, format!("{json}\n").as_bytes())?;

    match error {
        Some(message) => Err(ExperimentError::Aborted { message, summary_path }),
        None => Ok(RunReport {
            trace_path,
            summary_path,
            summary,
        }),
    }
}
