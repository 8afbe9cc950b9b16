//! `vdiff`: synthesize blur datasets, train the three stages, restore clips and score them.

mod commands;
mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

const FAILED_MARKER: &str = "_FAILED";

#[derive(Parser)]
#[command(name = "vdiff", version, about = "Video deblurring with a wavelet transformer and a latent diffusion prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plain-text file of key=value lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic motion-blur dataset with a train/eval manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root written by `synth` (or laid out the same way).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Previous-stage checkpoint to continue from, or a same-stage one to resume.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Total step count to train up to.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        diffusion_steps: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Deblur one clip directory of PNG frames.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory of numbered PNG frames, or a clip directory containing `blur/`.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long)]
        diffusion_steps: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Score a dataset split; optionally sweep diffusion steps or sequence length.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        diffusion_steps: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Train the full pipeline per diffusion step count and a prior-free variant, then compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Stage-one step count.
        #[arg(long)]
        steps: Option<u64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common, .. }
            | Command::Infer { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn pairs(common: &Common, flags: Vec<(&str, Option<String>)>) -> Result<settings::Pairs> {
    settings::collect(common.config.as_deref(), &common.set, flags)
}

fn run(command: &Command) -> Result<()> {
    let common = command.common();
    let out = common.out.as_path();
    let seed = text(&common.seed);
    match command {
        Command::Synth { .. } => commands::synth(out, &pairs(common, vec![("data_seed", seed)])?),
        Command::Train {
            data,
            stage,
            checkpoint,
            steps,
            diffusion_steps,
            seq_len,
            ..
        } => {
            let flags = vec![
                ("seed", seed),
                ("steps", text(steps)),
                ("diffusion_steps", text(diffusion_steps)),
                ("seq_len", text(seq_len)),
            ];
            let args = commands::TrainArgs {
                out,
                data,
                stage: *stage,
                checkpoint: checkpoint.as_deref(),
            };
            commands::train(args, &pairs(common, flags)?)
        }
        Command::Infer {
            checkpoint,
            input,
            diffusion_steps,
            seq_len,
            ..
        } => {
            let flags = vec![("seed", seed), ("diffusion_steps", text(diffusion_steps)), ("seq_len", text(seq_len))];
            commands::infer(out, checkpoint, input, &pairs(common, flags)?)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            diffusion_steps,
            seq_len,
            ..
        } => {
            let flags = vec![("seed", seed), ("diffusion_steps", text(diffusion_steps)), ("seq_len", text(seq_len))];
            let args = commands::EvalArgs {
                out,
                checkpoint: checkpoint.as_deref(),
                data,
                split,
            };
            commands::eval(args, &pairs(common, flags)?)
        }
        Command::Ablate { data, steps, .. } => {
            commands::ablate(out, data, &pairs(common, vec![("seed", seed), ("steps", text(steps))])?)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("VDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).with_context(|| format!("VDIFF_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).with_context(|| format!("removing stale {}", marker.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.command.common().out.clone();
    let result = init_threads().and_then(|_| prepare(&out)).and_then(|_| run(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if fs::create_dir_all(&out).is_ok() {
                let _ = fs::write(out.join(FAILED_MARKER), format!("{e:#}\n"));
            }
            ExitCode::FAILURE
        }
    }
}
