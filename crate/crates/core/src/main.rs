use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vcflow::cli::{self, CliConfig, Command, RunDir, SEED_ENV};

/// Synthetic fMRI-to-video decoding pipeline.
#[derive(Debug, Parser)]
#[command(name = "vcflow", version)]
struct Args {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set sara.tau_g=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Base seed; wins over the config file and VCFLOW_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding data, checkpoints, logs and reports.
    #[arg(long, global = true, value_name = "DIR", default_value = "vcflow-run")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    Synth,
    /// Standardize voxels, pack surfaces and apply the ROI scheme.
    Preprocess,
    /// Train the configured stage(s) and write checkpoints.
    Train,
    /// Reconstruct the test split and score it.
    Eval,
    /// Print the metric table of the last evaluation.
    Report,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cmd = match args.cmd {
        Cmd::Synth => Command::Synth,
        Cmd::Preprocess => Command::Preprocess,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Report => Command::Report,
    };
    let result = CliConfig::load(args.config.as_deref(), &args.sets, args.seed, std::env::var(SEED_ENV).ok())
        .and_then(|cfg| cli::run(cmd, &cfg, &RunDir::new(&args.out)));
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
