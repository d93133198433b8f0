use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use whiteguard_cli::commands::{self, EvaluateArgs, FitArgs, RecordError, ScoreArgs, SweepArgs};
use whiteguard_cli::config::Overrides;
use whiteguard_cli::demo::{self, DemoSpec};
use whiteguard_cli::error::{CliResult, EXIT_OK, EXIT_RECORD_ERRORS};
use whiteguard_cli::service;
use whiteguard_core::write_activations;

#[derive(Parser)]
#[command(name = "whiteguard", version, about = "Fit, score and serve activation-whitening policy guards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a guard bundle from a labeled activation file.
    Fit(FitCmd),
    /// Score every record of an activation file into a CSV.
    Score(ScoreCmd),
    /// Precision, recall and F1 of a bundle on a labeled activation file.
    Evaluate(EvaluateCmd),
    /// Serve a bundle over HTTP.
    Serve(ServeCmd),
    /// Write a synthetic labeled activation file.
    Demo(DemoCmd),
}

#[derive(Args)]
struct FitCmd {
    #[arg(long)]
    activations: PathBuf,
    /// Flat TOML file with CalibrationConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    samples_per_category: Option<usize>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eigenvalue_floor: Option<f64>,
    /// One guard over all categories pooled instead of one per category.
    #[arg(long)]
    global: bool,
    /// RFC 3339 timestamp stored in the bundle (default: SOURCE_DATE_EPOCH or now).
    #[arg(long)]
    created_at: Option<String>,
    /// Write the per-layer calibration AUC table here (category,layer,auc).
    #[arg(long)]
    auc_report: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreCmd {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Route by cosine similarity even when a record's category has a profile.
    #[arg(long)]
    route: bool,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    activations: PathBuf,
    /// Per-layer AUC CSV refitted on the evaluation records.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    route: bool,
    /// Comma-separated k values to refit and evaluate, e.g. 10,15,25,50.
    #[arg(long, value_delimiter = ',', requires_all = ["sweep_fit", "sweep_out"])]
    sweep_k: Option<Vec<usize>>,
    /// Labeled activation file the sweep fits on.
    #[arg(long)]
    sweep_fit: Option<PathBuf>,
    /// CSV with one row per swept k.
    #[arg(long)]
    sweep_out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeCmd {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
}

#[derive(Args)]
struct DemoCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "finance,healthcare")]
    categories: Vec<String>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Records per label per category.
    #[arg(long, default_value_t = 50)]
    per_label: usize,
    #[arg(long, default_value_t = 6.0)]
    shift_sigmas: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    sample_seed: u64,
}

fn report_record_errors(errors: &[RecordError]) {
    let mut err = std::io::stderr().lock();
    for e in errors {
        let line = json!({
            "error": "record",
            "conversation_id": e.conversation_id,
            "message": e.message,
        });
        let _ = writeln!(err, "{line}");
    }
}

fn run(cli: Cli) -> CliResult<i32> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Fit(c) => {
            let args = FitArgs {
                activations: c.activations,
                config: c.config,
                out: c.out,
                overrides: Overrides {
                    k: c.k,
                    samples_per_category: c.samples_per_category,
                    split_fraction: c.split_fraction,
                    seed: c.seed,
                    eigenvalue_floor: c.eigenvalue_floor,
                    global: c.global,
                },
                created_at: c.created_at,
                auc_report: c.auc_report,
            };
            commands::fit(&args, &mut stdout)?;
            Ok(EXIT_OK)
        }
        Command::Score(c) => {
            let summary = commands::score(&ScoreArgs {
                bundle: c.bundle,
                activations: c.activations,
                out: c.out,
                route: c.route,
            })?;
            report_record_errors(&summary.errors);
            Ok(if summary.errors.is_empty() { EXIT_OK } else { EXIT_RECORD_ERRORS })
        }
        Command::Evaluate(c) => {
            let sweep = match (c.sweep_k, c.sweep_fit, c.sweep_out) {
                (Some(ks), Some(fit_activations), Some(out)) => Some(SweepArgs {
                    ks,
                    fit_activations,
                    out,
                }),
                _ => None,
            };
            let eval = commands::evaluate(
                &EvaluateArgs {
                    bundle: c.bundle,
                    activations: c.activations,
                    report: c.report,
                    route: c.route,
                    sweep,
                },
                &mut stdout,
            )?;
            report_record_errors(&eval.errors);
            Ok(if eval.errors.is_empty() { EXIT_OK } else { EXIT_RECORD_ERRORS })
        }
        Command::Serve(c) => {
            tracing_subscriber::fmt()
                .with_writer(std::io::stderr)
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| "info".into()),
                )
                .init();
            let runtime = tokio::runtime::Runtime::new().map_err(|e| {
                whiteguard_cli::CliError::new(whiteguard_cli::error::EXIT_FAILURE, "runtime", e.to_string())
            })?;
            runtime.block_on(service::serve(c.bundle, c.listen))?;
            Ok(EXIT_OK)
        }
        Command::Demo(c) => {
            let set = demo::generate(&DemoSpec {
                categories: c.categories,
                hidden_dim: c.dim,
                layer_count: c.layers,
                per_label: c.per_label,
                shift_sigmas: c.shift_sigmas,
                seed: c.seed,
                sample_seed: c.sample_seed,
            })?;
            write_activations(&set, &c.out)?;
            let _ = writeln!(
                stdout,
                "wrote {} records ({} categories, L = {}, d = {}) to {}",
                set.records.len(),
                set.category_indices().len(),
                set.layer_count,
                set.hidden_dim,
                c.out.display()
            );
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code as u8)
        }
    }
}
