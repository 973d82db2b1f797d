use std::path::Path;
use std::process::Command;

use cholvi::gauss_vi::{self, GaussianApprox};
use cholvi_cli::experiment::{run_experiment, ExperimentError, RunStatus, Summary, OUTPUT_ROOT_ENV};
use cholvi_cli::output::trace_header;
use cholvi_cli::presets;
use cholvi_cli::spec::{parse_spec, ExperimentSpec, Overrides};
use cholvi_cli::verify::{verify_suite, Level, LibraryKernel, VerifyKernel};
use nalgebra::DMatrix;

fn preset(name: &str) -> ExperimentSpec {
    presets::find(name).unwrap().spec().unwrap()
}

fn read_summary(path: &Path) -> Summary {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn cholvi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cholvi"))
}

#[test]
fn conjugate_preset_writes_trace_and_summary_with_kl() {
    let root = tempfile::tempdir().unwrap();
    let report = run_experiment(&preset("conjugate-d2-ng"), root.path()).unwrap();
    let summary = read_summary(&report.summary_path);
    let kl = summary.kl_final.expect("kl_final present");
    assert!(kl < 1e-2, "kl {kl}");
    assert_eq!(summary.status, RunStatus::Completed);
    assert_eq!(summary.iterations_run, 5000);
    assert_eq!(summary.seed, 42);

    let csv = std::fs::read_to_string(&report.trace_path).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "iteration,elbo,elbo_se,stepsize,param_norm_mu,param_norm_c,wall_time_ms"
    );
    // t = 0, every 50 iterations, final
    assert_eq!(csv.lines().count(), 1 + 101);
    assert!(!csv.contains('\r'));
    let iterations: Vec<usize> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(iterations.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn summary_config_round_trips_to_the_spec() {
    let root = tempfile::tempdir().unwrap();
    let mut spec = preset("bimodal-k2");
    spec.run.iterations = 200;
    let report = run_experiment(&spec, root.path()).unwrap();
    let text = std::fs::read_to_string(&report.summary_path).unwrap();
    let summary: Summary = serde_json::from_str(&text).unwrap();
    assert_eq!(summary.config, spec);
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let back: ExperimentSpec = serde_json::from_value(value["config"].clone()).unwrap();
    assert_eq!(back, spec);
}

#[test]
fn rerun_gives_byte_identical_trace() {
    let spec = preset("conjugate-d2-adam");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&spec, a.path()).unwrap();
    let rb = run_experiment(&spec, b.path()).unwrap();
    assert_eq!(
        std::fs::read(ra.trace_path).unwrap(),
        std::fs::read(rb.trace_path).unwrap()
    );
}

#[test]
fn bimodal_preset_reports_components() {
    let root = tempfile::tempdir().unwrap();
    let report = run_experiment(&preset("bimodal-k2"), root.path()).unwrap();
    let s = &report.summary;
    assert_eq!(s.components.len(), 2);
    assert!(s.kl_final.is_none());
    let mut fitted: Vec<(f64, f64)> = s.components.iter().map(|c| (c.mean[0], c.weight)).collect();
    fitted.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(
        (fitted[0].0 + 2.0).abs() < 0.1 && (fitted[1].0 - 2.0).abs() < 0.1,
        "{fitted:?}"
    );
    assert!(
        (fitted[0].1 - 0.3).abs() < 0.05 && (fitted[1].1 - 0.7).abs() < 0.05,
        "{fitted:?}"
    );

    let csv = std::fs::read_to_string(&report.trace_path).unwrap();
    assert_eq!(csv.lines().next().unwrap(), trace_header(Some(2)).join(","));
    let width = trace_header(Some(2)).len();
    assert!(csv.lines().all(|l| l.split(',').count() == width));
}

#[test]
fn csv_columns_depend_only_on_family_and_k() {
    let root = tempfile::tempdir().unwrap();
    let mut headers = Vec::new();
    for name in [
        "conjugate-d2-ng",
        "conjugate-d2-natural",
        "conjugate-d2-adam",
        "logistic-ng",
    ] {
        let mut spec = preset(name);
        spec.run.iterations = 60;
        let report = run_experiment(&spec, root.path()).unwrap();
        let csv = std::fs::read_to_string(report.trace_path).unwrap();
        headers.push(csv.lines().next().unwrap().to_string());
    }
    assert!(headers.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn timing_fills_the_last_column() {
    let root = tempfile::tempdir().unwrap();
    let mut spec = preset("conjugate-d2-ng");
    spec.run.iterations = 100;
    spec.output.timing = true;
    let report = run_experiment(&spec, root.path()).unwrap();
    let csv = std::fs::read_to_string(report.trace_path).unwrap();
    for line in csv.lines().skip(1) {
        let last = line.rsplit(',').next().unwrap();
        assert!(last.parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn unwritable_output_directory_is_an_error() {
    let root = tempfile::tempdir().unwrap();
    std::fs::write(root.path().join("blocked"), "").unwrap();
    let mut spec = preset("conjugate-d2-ng");
    spec.output.dir = "blocked/sub".into();
    spec.run.iterations = 10;
    let err = run_experiment(&spec, root.path()).unwrap_err();
    assert!(matches!(err, ExperimentError::Output { .. }), "{err}");
}

#[test]
fn diverging_run_aborts_with_partial_summary() {
    let root = tempfile::tempdir().unwrap();
    let spec_text = r#"
[model]
kind = "conjugate"
[model.synthetic]
true_theta = [1.0, -0.5]
n_obs = 20
seed = 17
[run]
estimator = "euclid-reparam"
iterations = 2000
[run.schedule]
kind = "constant"
base = 50.0
"#;
    let spec = cholvi_cli::spec::parse_spec_str(spec_text, Path::new(".")).unwrap();
    let err = run_experiment(&spec, root.path()).unwrap_err();
    let ExperimentError::Aborted { summary_path, message } = err else {
        panic!("expected abort")
    };
    assert!(message.contains("iteration"), "{message}");
    let summary = read_summary(&summary_path);
    assert_eq!(summary.status, RunStatus::Aborted);
    assert!(summary.error.is_some());
    assert!(summary.components[0].mean.iter().all(|v| v.is_finite()));
}

#[test]
fn data_file_is_resolved_relative_to_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("data")).unwrap();
    std::fs::write(
        dir.path().join("data/obs.csv"),
        "x1,x2,y\n1.0,0.5,1.2\n-0.3,1.0,0.1\n0.8,-1.2,2.0\n0.1,0.1,0.0\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("spec.toml"),
        "[model]\nkind = \"conjugate\"\ndata_file = \"data/obs.csv\"\n[run]\niterations = 100\n",
    )
    .unwrap();
    let spec = parse_spec(&dir.path().join("spec.toml")).unwrap();
    assert_eq!(spec.approx.dim, Some(2));
    assert!(spec.model.data_file.as_ref().unwrap().is_file());
    let report = run_experiment(&spec, dir.path()).unwrap();
    assert!(report.summary.kl_final.is_some());
}

#[test]
fn overrides_are_echoed_in_the_summary() {
    let root = tempfile::tempdir().unwrap();
    let mut spec = preset("conjugate-d2-ng");
    Overrides {
        seed: Some(5),
        iterations: Some(120),
        out: Some("custom".into()),
        threads: None,
    }
    .apply(&mut spec);
    let report = run_experiment(&spec, root.path()).unwrap();
    assert!(report.summary_path.starts_with(root.path().join("custom")));
    assert_eq!(report.summary.seed, 5);
    assert_eq!(report.summary.config.run.iterations, 120);
}

/// Fisher matrix with one entry nudged; everything else from the library.
struct PerturbedFisher;

impl VerifyKernel for PerturbedFisher {
    fn fisher_matrix(&self, q: &GaussianApprox) -> cholvi::Result<DMatrix<f64>> {
        let mut f = gauss_vi::fisher_matrix(q)?;
        let n = f.nrows();
        f[(n - 1, n - 1)] *= 1.0 + 1e-6;
        Ok(f)
    }
}

#[test]
fn perturbed_fisher_is_caught_by_name() {
    let report = verify_suite(Level::Fast, &PerturbedFisher);
    let failed: Vec<&str> = report.failures().map(|r| r.name).collect();
    assert_eq!(failed, ["fisher-inverse-product"]);
    let r = report.failures().next().unwrap();
    assert!(r.residual > r.threshold && r.residual.is_finite());
    assert!(verify_suite(Level::Fast, &LibraryKernel).all_passed());
}

// ---------------------------------------------------------------------------
// Binary

#[test]
fn binary_lists_and_shows_presets() {
    let out = cholvi().args(["presets", "list"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for p in presets::PRESETS {
        assert!(text.contains(p.name));
    }
    let out = cholvi().args(["presets", "show", "bimodal-k2"]).output().unwrap();
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        presets::find("bimodal-k2").unwrap().source
    );
    assert!(!cholvi()
        .args(["presets", "show", "nope"])
        .output()
        .unwrap()
        .status
        .success());
}

#[test]
fn binary_runs_a_spec_under_the_output_root() {
    let root = tempfile::tempdir().unwrap();
    let spec = root.path().join("s.toml");
    std::fs::write(&spec, presets::find("conjugate-d2-ng").unwrap().source).unwrap();
    let out = cholvi()
        .env(OUTPUT_ROOT_ENV, root.path())
        .args([
            "run",
            spec.to_str().unwrap(),
            "--iterations",
            "100",
            "--seed",
            "3",
            "--out",
            "here",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_summary(&root.path().join("here/summary.json"));
    assert_eq!((summary.seed, summary.iterations_run), (3, 100));
    assert!(root.path().join("here/trace.csv").is_file());
}

#[test]
fn binary_reports_spec_errors_with_lines() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    std::fs::write(
        &spec,
        "[model]\nkind = \"bimodal\"\ncenters = [[-2.0], [2.0]]\nscales = [0.5, 0.5]\nweights = [0.3, 0.7]\n[run]\nestimator = \"natgrad-natural\"\n",
    )
    .unwrap();
    let out = cholvi().args(["run", spec.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.contains("line 7") && err.contains("natgrad-natural") && err.contains("bimodal"),
        "{err}"
    );
}

#[test]
fn binary_verify_fast_passes() {
    let out = cholvi().args(["verify", "--level", "fast"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS fisher-inverse-product"));
    assert!(!text.contains("FAIL"));
}
