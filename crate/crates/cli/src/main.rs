use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seismon::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "seismon",
    about = "Generative Bayesian seismic monitoring: synthesize scenarios, train models, infer bulletins, evaluate"
)]
struct Cli {
    /// Configuration document (TOML).
    #[arg(long, global = true, default_value = "seismon.toml")]
    config: PathBuf,
    /// Master random seed; recorded in every output.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic scenario: waveforms plus ground-truth bulletin.
    Synth,
    /// Fit the model from a training bulletin and waveforms.
    Train,
    /// Infer an event bulletin from waveforms under a trained model.
    Infer,
    /// Score an inferred bulletin against a reference bulletin.
    Eval,
    /// Emit plot data (PR curve, error histogram, recall by magnitude).
    EmitPlots,
}

fn run() -> seismon::Result<()> {
    let cli = Cli::parse();
    let cfg = RunConfig::load(&cli.config)?;
    match cli.command {
        Command::Synth => seismon_cli::cmd_synth(&cfg, cli.seed),
        Command::Train => seismon_cli::cmd_train(&cfg, cli.seed),
        Command::Infer => seismon_cli::cmd_infer(&cfg, cli.seed, cli.jobs),
        Command::Eval => seismon_cli::cmd_eval(&cfg, cli.seed).map(|metrics| {
            println!(
                "precision {:.4} recall {:.4} matched {}/{} mean_err_km {}",
                metrics.precision,
                metrics.recall,
                metrics.matched,
                metrics.n_reference,
                metrics
                    .mean_location_error_km
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }),
        Command::EmitPlots => seismon_cli::cmd_emit_plots(&cfg, cli.seed),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
