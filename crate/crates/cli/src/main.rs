use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

use cholvi_cli::experiment::{output_root, run_experiment, ExperimentError};
use cholvi_cli::presets::{self, PRESETS};
use cholvi_cli::spec::{parse_spec, Overrides};
use cholvi_cli::verify::{verify_with_progress, Level, LibraryKernel};

#[derive(Parser)]
#[command(
    name = "cholvi",
    version,
    about = "Natural-gradient Gaussian variational inference experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a spec file or a built-in preset.
    #[command(group(ArgGroup::new("source").required(true).args(["spec", "preset"])))]
    Run {
        spec: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Output directory, overriding `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the built-in correctness checks.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: Level,
    },
    /// List or print the built-in presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    Show { name: String },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            spec,
            preset,
            seed,
            iterations,
            out,
            threads,
        } => {
            let parsed = match (spec, preset) {
                (Some(path), _) => parse_spec(&path),
                (None, Some(name)) => match presets::find(&name) {
                    Some(p) => p.spec(),
                    None => {
                        eprintln!("error: unknown preset `{name}` (see `cholvi presets list`)");
                        return ExitCode::from(2);
                    }
                },
                (None, None) => unreachable!("clap requires a source"),
            };
            let mut spec = match parsed {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            Overrides {
                seed,
                iterations,
                out,
                threads,
            }
            .apply(&mut spec);
            match run_experiment(&spec, &output_root()) {
                Ok(report) => {
                    let s = &report.summary;
                    println!("final ELBO {:.6} ± {:.2e}", s.final_elbo, s.final_elbo_se);
                    if let Some(kl) = s.kl_final {
                        println!("KL(q ‖ posterior) {kl:.3e}");
                    }
                    println!("trace   {}", report.trace_path.display());
                    println!("summary {}", report.summary_path.display());
                    ExitCode::SUCCESS
                }
                Err(e @ ExperimentError::Spec(_)) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Verify { level } => {
            let report = verify_with_progress(level, &LibraryKernel, |r| println!("{r}"));
            if report.all_passed() {
                println!("all {} properties passed", report.results.len());
                ExitCode::SUCCESS
            } else {
                for r in report.failures() {
                    eprintln!(
                        "failed: {} (residual {:e}, threshold {:e})",
                        r.name, r.residual, r.threshold
                    );
                }
                ExitCode::FAILURE
            }
        }
        Command::Presets { action } => match action {
            PresetAction::List => {
                for p in PRESETS {
                    println!("{:<22} {}", p.name, p.description);
                }
                ExitCode::SUCCESS
            }
            PresetAction::Show { name } => match presets::find(&name) {
                Some(p) => {
                    print!("{}", p.source);
                    ExitCode::SUCCESS
                }
                None => {
                    eprintln!("error: unknown preset `{name}`");
                    ExitCode::from(2)
                }
            },
        },
    }
}
