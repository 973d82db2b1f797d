//! Experiment specification files.
//!
//! A spec is a TOML document with four tables:
//!
//! ```toml
//! name = "optional label"
//!
//! [model]
//! kind = "conjugate"          # conjugate | logistic | bimodal
//! noise_var = 1.0             # conjugate only
//! prior_mean = [0.0, 0.0]     # conjugate only, defaults to zeros
//! prior_cov = [[1.0, 0.0], [0.0, 1.0]]
//! prior_precision = 1.0       # logistic only
//! data_file = "data.csv"      # relative to the spec file; or [model.synthetic]
//! centers = [[-2.0], [2.0]]   # bimodal only, with scales and weights
//!
//! [model.synthetic]
//! true_theta = [1.0, -0.5]
//! n_obs = 20
//! seed = 17
//!
//! [approx]
//! family = "gaussian"         # gaussian | mixture
//! components = 2              # mixture only
//! init_scale = 0.1
//! init_mean = [0.0, 0.0]      # gaussian; init_means = [[..], ..] for mixtures
//!
//! [run]
//! estimator = "natgrad-cholesky"
//! iterations = 5000
//! seed = 42
//! [run.schedule]
//! kind = "constant"
//! base = 0.05
//!
//! [output]
//! dir = "out"
//! trace = "trace.csv"
//! summary = "summary.json"
//! timing = false
//! ```
//!
//! Unknown keys are rejected. After parsing, every default is written back
//! into the spec, so the value echoed in a run summary is the full config.

use std::fmt;
use std::path::{Path, PathBuf};

use cholvi::optim::{ConvergenceMonitor, RunConfig, StepSchedule};
use cholvi::EstimatorKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub model: ModelSpec,
    #[serde(default)]
    pub approx: ApproxSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Conjugate,
    Logistic,
    Bimodal,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Conjugate => "conjugate",
            ModelKind::Logistic => "logistic",
            ModelKind::Bimodal => "bimodal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_var: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub true_theta: Vec<f64>,
    pub n_obs: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    Gaussian,
    Mixture,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Mixture => "mixture",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSpec {
    #[serde(default)]
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_means: Option<Vec<Vec<f64>>>,
}

fn default_init_scale() -> f64 {
    cholvi::gauss_vi::DEFAULT_INIT_SCALE
}

impl Default for ApproxSpec {
    fn default() -> Self {
        Self {
            family: Family::Gaussian,
            dim: None,
            components: None,
            init_scale: default_init_scale(),
            init_mean: None,
            init_means: None,
        }
    }
}

/// The `[run]` table. Mirrors [`RunConfig`]; a missing schedule is filled
/// with the estimator's default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<StepSchedule>,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::samples_per_iter")]
    pub samples_per_iter: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default = "defaults::eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub positive_diagonal: bool,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub logit_baseline: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<ConvergenceMonitor>,
}

fn default_estimator() -> EstimatorKind {
    EstimatorKind::NatgradCholesky
}

mod defaults {
    use cholvi::optim::RunConfig;

    pub fn iterations() -> usize {
        RunConfig::default().iterations
    }
    pub fn samples_per_iter() -> usize {
        RunConfig::default().samples_per_iter
    }
    pub fn seed() -> u64 {
        RunConfig::default().seed
    }
    pub fn eval_every() -> usize {
        RunConfig::default().eval_every
    }
    pub fn eval_samples() -> usize {
        RunConfig::default().eval_samples
    }
}

impl Default for RunSpec {
    fn default() -> Self {
        let c = RunConfig::default();
        Self {
            estimator: c.estimator,
            schedule: None,
            iterations: c.iterations,
            samples_per_iter: c.samples_per_iter,
            seed: c.seed,
            eval_every: c.eval_every,
            eval_samples: c.eval_samples,
            positive_diagonal: c.positive_diagonal,
            threads: c.threads,
            logit_baseline: c.logit_baseline,
            early_stop: c.early_stop,
        }
    }
}

impl RunSpec {
    pub fn schedule(&self) -> StepSchedule {
        self.schedule
            .unwrap_or_else(|| StepSchedule::default_for(self.estimator))
    }

    pub fn to_config(&self, record_wall_time: bool) -> RunConfig {
        RunConfig {
            estimator: self.estimator,
            schedule: self.schedule(),
            iterations: self.iterations,
            samples_per_iter: self.samples_per_iter,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_samples: self.eval_samples,
            positive_diagonal: self.positive_diagonal,
            threads: self.threads,
            logit_baseline: self.logit_baseline,
            early_stop: self.early_stop,
            record_wall_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_trace")]
    pub trace: String,
    #[serde(default = "default_summary")]
    pub summary: String,
    /// Fill the wall_time_ms column. Off by default so traces are
    /// byte-reproducible.
    #[serde(default)]
    pub timing: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_trace() -> String {
    "trace.csv".into()
}

fn default_summary() -> String {
    "summary.json".into()
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            trace: default_trace(),
            summary: default_summary(),
            timing: false,
        }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(seed) = self.seed {
            spec.run.seed = seed;
        }
        if let Some(n) = self.iterations {
            spec.run.iterations = n;
        }
        if let Some(out) = &self.out {
            spec.output.dir = out.clone();
        }
        if let Some(t) = self.threads {
            spec.run.threads = t;
        }
    }
}

// ---------------------------------------------------------------------------
// Errors

/// One problem found in a spec. `key` is the dotted path of the offending
/// entry; `line` is 1-based when the source text is available.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecIssue {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl SpecIssue {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line: None,
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for SpecIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.key.is_empty()) {
            (Some(line), false) => write!(f, "line {line} ({}): {}", self.key, self.message),
            (Some(line), true) => write!(f, "line {line}: {}", self.message),
            (None, false) => write!(f, "{}: {}", self.key, self.message),
            (None, true) => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", render_issues(.0))]
    Invalid(Vec<SpecIssue>),
}

impl SpecError {
    pub fn issues(&self) -> &[SpecIssue] {
        match self {
            SpecError::Invalid(issues) => issues,
            SpecError::Io { .. } => &[],
        }
    }
}

fn render_issues(issues: &[SpecIssue]) -> String {
    let mut out = format!(
        "invalid spec ({} problem{})",
        issues.len(),
        if issues.len() == 1 { "" } else { "s" }
    );
    for issue in issues {
        out.push_str("\n  ");
        out.push_str(&issue.to_string());
    }
    out
}

/// Maps dotted keys to line numbers in the source text. Understands plain
/// `[table]` headers and `key = value` lines, which covers every spec key.
struct Locator<'a> {
    text: &'a str,
}

impl Locator<'_> {
    fn line_of(&self, key: &str) -> Option<usize> {
        let (table, leaf) = match key.rsplit_once('.') {
            Some((t, l)) => (t, l),
            None => ("", key),
        };
        let mut current = String::new();
        let mut table_line = None;
        for (idx, raw) in self.text.lines().enumerate() {
            let line = raw.trim();
            if let Some(header) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
                current = header.trim().to_string();
                if current == key {
                    return Some(idx + 1);
                }
                if current == table {
                    table_line = Some(idx + 1);
                }
                continue;
            }
            if current == table {
                if let Some(rest) = line.strip_prefix(leaf) {
                    if rest.trim_start().starts_with('=') {
                        return Some(idx + 1);
                    }
                }
            }
        }
        table_line
    }

    fn line_of_offset(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())].matches('\n').count() + 1
    }
}

// ---------------------------------------------------------------------------
// Parsing

/// Reads, fills and validates a spec file. Relative `data_file` paths are
/// resolved against the spec's directory.
pub fn parse_spec(path: &Path) -> Result<ExperimentSpec, SpecError> {
    let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_spec_str(&text, base)
}

pub fn parse_spec_str(text: &str, base_dir: &Path) -> Result<ExperimentSpec, SpecError> {
    let locator = Locator { text };
    let mut spec: ExperimentSpec = toml::from_str(text).map_err(|e| {
        SpecError::Invalid(vec![SpecIssue {
            line: e.span().map(|s| locator.line_of_offset(s.start)),
            key: String::new(),
            message: e.message().trim().to_string(),
        }])
    })?;
    if let Some(file) = &spec.model.data_file {
        if file.is_relative() {
            spec.model.data_file = Some(base_dir.join(file));
        }
    }
    let mut issues = fill_and_check(&mut spec);
    if issues.is_empty() {
        if let Err(found) = experiment::build(&spec) {
            issues = found;
        }
    }
    if issues.is_empty() {
        return Ok(spec);
    }
    for issue in &mut issues {
        issue.line = locator.line_of(&issue.key);
    }
    Err(SpecError::Invalid(issues))
}

/// Re-validates a spec that has no source text, e.g. after overrides.
pub fn validate(spec: &ExperimentSpec) -> Result<(), SpecError> {
    let mut copy = spec.clone();
    let mut issues = fill_and_check(&mut copy);
    if issues.is_empty() {
        if let Err(found) = experiment::build(&copy) {
            issues = found;
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(SpecError::Invalid(issues))
    }
}

fn forbid<T>(issues: &mut Vec<SpecIssue>, value: &Option<T>, key: &str, kind: ModelKind) {
    if value.is_some() {
        issues.push(SpecIssue::new(
            key,
            format!("not used by model kind `{}`", kind.as_str()),
        ));
    }
}

/// Writes defaults into the spec and reports structural problems that do not
/// need the model to be built.
fn fill_and_check(spec: &mut ExperimentSpec) -> Vec<SpecIssue> {
    let mut issues = Vec::new();
    let model = &mut spec.model;
    let kind = model.kind;

    let data_dim = match kind {
        ModelKind::Conjugate | ModelKind::Logistic => {
            forbid(&mut issues, &model.centers, "model.centers", kind);
            forbid(&mut issues, &model.scales, "model.scales", kind);
            forbid(&mut issues, &model.weights, "model.weights", kind);
            match (&model.data_file, &model.synthetic) {
                (Some(_), Some(_)) => {
                    issues.push(SpecIssue::new(
                        "model.synthetic",
                        "give either data_file or [model.synthetic], not both",
                    ));
                    None
                }
                (None, None) => {
                    issues.push(SpecIssue::new(
                        "model",
                        "missing data: set data_file or add a [model.synthetic] table",
                    ));
                    None
                }
                (Some(path), None) => {
                    if !path.is_file() {
                        issues.push(SpecIssue::new(
                            "model.data_file",
                            format!("file not found: {}", path.display()),
                        ));
                        None
                    } else {
                        match cholvi::model::load_regression_csv(path) {
                            Ok(data) => Some(data.design.ncols()),
                            Err(e) => {
                                issues.push(SpecIssue::new("model.data_file", format!("{}: {e}", path.display())));
                                None
                            }
                        }
                    }
                }
                (None, Some(syn)) => {
                    if syn.true_theta.is_empty() {
                        issues.push(SpecIssue::new("model.synthetic.true_theta", "must not be empty"));
                    }
                    if syn.n_obs == 0 {
                        issues.push(SpecIssue::new("model.synthetic.n_obs", "must be at least 1"));
                    }
                    Some(syn.true_theta.len())
                }
            }
        }
        ModelKind::Bimodal => {
            forbid(&mut issues, &model.noise_var, "model.noise_var", kind);
            forbid(&mut issues, &model.prior_mean, "model.prior_mean", kind);
            forbid(&mut issues, &model.prior_cov, "model.prior_cov", kind);
            forbid(&mut issues, &model.prior_precision, "model.prior_precision", kind);
            forbid(&mut issues, &model.data_file, "model.data_file", kind);
            forbid(&mut issues, &model.synthetic, "model.synthetic", kind);
            for (key, missing) in [
                ("model.centers", model.centers.is_none()),
                ("model.scales", model.scales.is_none()),
                ("model.weights", model.weights.is_none()),
            ] {
                if missing {
                    issues.push(SpecIssue::new(key, "required for model kind `bimodal`"));
                }
            }
            model.centers.as_ref().and_then(|c| c.first()).map(Vec::len)
        }
    };

    match kind {
        ModelKind::Conjugate => {
            forbid(&mut issues, &model.prior_precision, "model.prior_precision", kind);
            model.noise_var.get_or_insert(1.0);
            if let Some(d) = data_dim.filter(|&d| d > 0) {
                model.prior_mean.get_or_insert_with(|| vec![0.0; d]);
                model.prior_cov.get_or_insert_with(|| {
                    (0..d)
                        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                        .collect()
                });
            }
        }
        ModelKind::Logistic => {
            forbid(&mut issues, &model.noise_var, "model.noise_var", kind);
            forbid(&mut issues, &model.prior_mean, "model.prior_mean", kind);
            forbid(&mut issues, &model.prior_cov, "model.prior_cov", kind);
            model.prior_precision.get_or_insert(1.0);
        }
        ModelKind::Bimodal => {}
    }

    let approx = &mut spec.approx;
    if let Some(d) = data_dim {
        match approx.dim {
            Some(given) if given != d => issues.push(SpecIssue::new(
                "approx.dim",
                format!("approximation has dimension {given} but the model has dimension {d}"),
            )),
            _ => approx.dim = Some(d),
        }
    }
    match approx.family {
        Family::Gaussian => {
            if approx.init_means.is_some() {
                issues.push(SpecIssue::new(
                    "approx.init_means",
                    "only for family `mixture`; use init_mean",
                ));
            }
            match approx.components {
                Some(k) if k != 1 => issues.push(SpecIssue::new(
                    "approx.components",
                    "family `gaussian` has exactly one component",
                )),
                _ => approx.components = Some(1),
            }
            if let (Some(m), Some(d)) = (&approx.init_mean, approx.dim) {
                if m.len() != d {
                    issues.push(SpecIssue::new(
                        "approx.init_mean",
                        format!("expected {d} entries, found {}", m.len()),
                    ));
                }
            }
        }
        Family::Mixture => {
            if approx.init_mean.is_some() {
                issues.push(SpecIssue::new(
                    "approx.init_mean",
                    "only for family `gaussian`; use init_means",
                ));
            }
            let k = *approx.components.get_or_insert(2);
            if k == 0 {
                issues.push(SpecIssue::new("approx.components", "must be at least 1"));
            }
            if let Some(means) = &approx.init_means {
                if means.len() != k {
                    issues.push(SpecIssue::new(
                        "approx.init_means",
                        format!("expected {k} means, found {}", means.len()),
                    ));
                }
                if let Some(d) = approx.dim {
                    if means.iter().any(|m| m.len() != d) {
                        issues.push(SpecIssue::new(
                            "approx.init_means",
                            format!("every mean needs {d} entries"),
                        ));
                    }
                }
            }
            if !spec.run.estimator.is_natural() {
                issues.push(SpecIssue::new(
                    "run.estimator",
                    format!(
                        "family `mixture` supports natgrad-cholesky and natgrad-natural, not `{}`",
                        spec.run.estimator
                    ),
                ));
            }
        }
    }
    if !(approx.init_scale > 0.0 && approx.init_scale.is_finite()) {
        issues.push(SpecIssue::new("approx.init_scale", "must be positive and finite"));
    }

    let run = &mut spec.run;
    if run.schedule.is_none() {
        run.schedule = Some(StepSchedule::default_for(run.estimator));
    }
    for (key, value) in [
        ("run.iterations", run.iterations),
        ("run.samples_per_iter", run.samples_per_iter),
        ("run.eval_every", run.eval_every),
        ("run.eval_samples", run.eval_samples),
    ] {
        if value == 0 {
            issues.push(SpecIssue::new(key, "must be at least 1"));
        }
    }

    let out = &spec.output;
    for (key, name) in [("output.trace", &out.trace), ("output.summary", &out.summary)] {
        if name.is_empty() || name.contains(['/', '\\']) {
            issues.push(SpecIssue::new(key, "must be a plain file name"));
        }
    }
    if out.trace == out.summary {
        issues.push(SpecIssue::new("output.summary", "must differ from the trace file name"));
    }
    issues
}
