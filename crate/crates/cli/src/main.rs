//! `neurop-diff` command-line driver.
//!
//! Exit codes: 0 ok, 2 config or argument, 3 data, 4 checkpoint, 5 numeric.
//! Failures print one JSON object to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurop_diff::config::{ConditionMode, Profile};
use neurop_diff::Error;

#[derive(Parser)]
#[command(name = "neurop-diff", version, about = "Arbitrary-scale diffusion super-resolution with a neural-operator prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON run config, merged onto the profile preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset profile; overrides the config's own.
    #[arg(long)]
    pub profile: Option<Profile>,
    /// Run seed; overrides the config's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory; overrides `data.root`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Phase 1: fit the neural operator to HR targets.
    TrainOperator {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to write [default: $NEUROP_DIFF_CACHE/operator.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from an operator checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Phase 2: fit the denoiser with the operator frozen.
    TrainDiffusion {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// What produces the conditioning prior.
        #[arg(long, default_value = "neurop")]
        condition: ConditionMode,
        /// Operator checkpoint (required for encoder and neurop).
        #[arg(long)]
        operator: Option<PathBuf>,
        /// Checkpoint to write [default: $NEUROP_DIFF_CACHE/diffusion-<mode>.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a diffusion checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one LR image or every image in a directory.
    Sample {
        /// Diffusion checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// LR image file or directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scale: f64,
        /// Reverse steps [default: the checkpoint's sample.steps].
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade HR images, super-resolve and score at each scale.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of HR images.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated scales, e.g. 2,4,8.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        scales: Vec<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// HR crop size [default: the checkpoint's data.hr_size].
        #[arg(long)]
        hr_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser under every conditioning mode and compare.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Operator checkpoint; trained first when absent.
        #[arg(long)]
        operator: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        scales: Vec<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Score on the training split instead of the held-out one.
        #[arg(long)]
        on_train: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write procedurally generated test scenes as PNGs.
    Synth {
        #[arg(long, default_value_t = 4)]
        count: u64,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully merged run config.
    PrintConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> neurop_diff::Result<()> {
    match cli.command {
        Command::TrainOperator { cfg, out, resume } => commands::train_operator(&cfg, out, resume),
        Command::TrainDiffusion { cfg, condition, operator, out, resume } => {
            commands::train_diffusion(&cfg, condition, operator, out, resume)
        }
        Command::Sample { checkpoint, input, scale, steps, seed, out } => commands::sample(&checkpoint, &input, scale, steps, seed, &out),
        Command::Eval { checkpoint, data, scales, steps, seed, hr_size, out } => {
            commands::eval(&checkpoint, &data, &scales, steps, seed, hr_size, &out)
        }
        Command::Ablate { cfg, operator, scales, steps, on_train, out } => commands::ablate(&cfg, operator, &scales, steps, on_train, &out),
        Command::Synth { count, size, seed, out } => commands::synth(count, size, seed, &out),
        Command::PrintConfig { cfg } => {
            println!("{}", commands::load_config(&cfg, None)?.to_json_pretty());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&Error::InvalidArgument(e.to_string().trim_end().to_string())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": e.kind(), "code": e.exit_code(), "message": e.to_string() } });
    eprintln!("{body}");
    ExitCode::from(e.exit_code() as u8)
}
