//! `gcrl`: build codebooks, train, evaluate and sample hybrid
//! generative-contrastive image models.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::commands::{BenchConfig, CodebookConfig, EvalConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gcrl", version, about, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set schedule.peak_rate=3e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a k-means color codebook.
    BuildCodebook(Common),
    /// Train a model; writes metrics.csv and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after_epoch: Option<u32>,
    },
    /// Linear probe on frozen representations.
    EvalLinear(Common),
    /// Bits per dimension of the decoder.
    EvalBpd(Common),
    /// Cosine k-NN probe.
    EvalKnn(Common),
    /// Expected calibration error of a predictions CSV.
    EvalEce(Common),
    /// Linear probes on stratified label subsets.
    EvalLowshot(Common),
    /// Autoregressive samples as PPM images.
    Sample(Common),
    /// Supervised OOD detection with class-conditional Gaussians.
    OodSup(Common),
    /// Unsupervised OOD detection with the log-likelihood gradient norm.
    OodUnsup(Common),
    /// Write representation matrices.
    ExtractReps(Common),
    /// Attention throughput and score-entry counts.
    Bench(Common),
    /// Generate the synthetic dataset.
    GenSynth(Common),
}

/// Parallelism cap from `GCRL_THREADS`. All computation is currently
/// sequential, so any valid value behaves like 1.
fn threads() -> CliResult<usize> {
    match std::env::var("GCRL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::config(
                "GCRL_THREADS",
                format!("expected a positive integer, got `{v}`"),
            )),
        },
    }
}

fn run(cli: Cli) -> CliResult<Value> {
    let threads = threads()?;
    let (name, common) = match &cli.command {
        Command::BuildCodebook(c) => ("build-codebook", c),
        Command::Train { common, .. } => ("train", common),
        Command::EvalLinear(c) => ("eval-linear", c),
        Command::EvalBpd(c) => ("eval-bpd", c),
        Command::EvalKnn(c) => ("eval-knn", c),
        Command::EvalEce(c) => ("eval-ece", c),
        Command::EvalLowshot(c) => ("eval-lowshot", c),
        Command::Sample(c) => ("sample", c),
        Command::OodSup(c) => ("ood-sup", c),
        Command::OodUnsup(c) => ("ood-unsup", c),
        Command::ExtractReps(c) => ("extract-reps", c),
        Command::Bench(c) => ("bench", c),
        Command::GenSynth(c) => ("gen-synth", c),
    };
    fn load<T: DeserializeOwned>(c: &Common) -> CliResult<T> {
        config::load(c.config.as_deref(), &c.overrides)
    }
    let out = common.out.as_path();
    // Parse the config before touching the output directory so that a bad
    // config leaves no partial outputs behind.
    match &cli.command {
        Command::GenSynth(c) => {
            let p = load(c)?;
            commands::prepare_out(out, name, c.config.as_deref(), &c.overrides, threads)?;
            commands::gen_synth(&p, out)
        }
        Command::BuildCodebook(c) => {
            let cfg: CodebookConfig = load(c)?;
            commands::prepare_out(out, name, c.config.as_deref(), &c.overrides, threads)?;
            commands::build_codebook_cmd(&cfg, out)
        }
        Command::Train {
            common: c,
            resume,
            stop_after_epoch,
        } => {
            let cfg = load(c)?;
            let inputs = commands::train_inputs(&cfg, resume.as_deref())?;
            commands::prepare_out(out, name, c.config.as_deref(), &c.overrides, threads)?;
            commands::train(&cfg, inputs, out, *stop_after_epoch)
        }
        Command::Bench(c) => {
            let cfg: BenchConfig = load(c)?;
            commands::prepare_out(out, name, c.config.as_deref(), &c.overrides, threads)?;
            commands::bench(&cfg, out)
        }
        other => {
            let cfg: EvalConfig = load(common)?;
            commands::prepare_out(out, name, common.config.as_deref(), &common.overrides, threads)?;
            match other {
                Command::EvalLinear(_) => commands::eval_linear(&cfg, out),
                Command::EvalBpd(_) => commands::eval_bpd(&cfg, out),
                Command::EvalKnn(_) => commands::eval_knn(&cfg, out),
                Command::EvalEce(_) => commands::eval_ece(&cfg, out),
                Command::EvalLowshot(_) => commands::eval_lowshot(&cfg, out),
                Command::Sample(_) => commands::sample(&cfg, out),
                Command::OodSup(_) => commands::ood_sup(&cfg, out),
                Command::OodUnsup(_) => commands::ood_unsup(&cfg, out),
                Command::ExtractReps(_) => commands::extract_reps(&cfg, out),
                _ => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code())
        }
    }
}
