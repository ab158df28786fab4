//! Command-line surface for the voicespace stack: world dumps, staged
//! training, benchmarking, sampling, gradient audits and ablation or
//! data-scale grids.
//!
//! Every verb resolves its config in layers (built-in defaults, config
//! file, `VOICESPACE_SEED`, `--set` overrides), echoes the resolved
//! text into the output directory and closes with a manifest listing
//! every file written with its SHA-256. Exit codes: 0 success, 1
//! contract or validation errors, 2 IO or format errors.

mod commands;
mod gradcheck;
mod run_dir;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use voicespace_core::ErrorClass;

#[derive(Parser)]
#[command(
    name = "voicespace",
    version,
    about = "Synthetic-world pipeline for multimodal voice embeddings: generate data, train in stages, benchmark and sample"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the config's synthetic world and dump per-speaker
    /// embeddings and observations
    GenData(GenData),
    /// Run one training stage and write its checkpoint and loss trace
    Train(Train),
    /// Score a checkpoint on the generation benchmark tasks
    Eval(Eval),
    /// Sample speaker embeddings from a checkpoint conditioned on one
    /// modality
    Sample(Sample),
    /// Compare analytic gradients against finite differences for every
    /// loss
    GradCheck(GradCheck),
    /// Train and score every combination of the ablation toggles
    Ablate(Ablate),
    /// Re-run the alignment stage at several data scales and score
    /// each
    Sweep(Sweep),
}

#[derive(Args)]
struct Common {
    /// Config file layered over built-in defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Single key override, the highest layer (repeatable)
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory for artifacts, resolved config and manifest
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Cap on parallel workers (overrides run.workers)
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Train {
    /// Stage to run: pretrain, self_distill or align (overrides
    /// run.stage)
    #[arg(long, value_name = "STAGE")]
    stage: Option<String>,

    /// Mid-run checkpoint of the same stage to continue from
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Eval {
    /// Checkpoint to score
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Comma-separated benchmark tasks
    #[arg(
        long,
        value_delimiter = ',',
        value_name = "TASKS",
        default_value = "face_tts,face_vc,text_tts,text_vc"
    )]
    tasks: Vec<String>,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Sample {
    /// Checkpoint to sample from
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Conditioning modality: face, text or speech
    #[arg(long, value_name = "MODALITY", default_value = "face")]
    modality: String,

    /// Euler steps for the sampler (overrides field.ode_steps)
    #[arg(long, value_name = "N")]
    steps: Option<usize>,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradCheck {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Ablate {
    /// Toggles to vary, a comma-separated subset of: mva, softcl
    #[arg(
        long,
        value_delimiter = ',',
        value_name = "TOGGLES",
        default_value = "mva,softcl"
    )]
    grid: Vec<String>,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Sweep {
    /// Comma-separated alignment data scales in [0, 1]
    #[arg(
        long,
        value_delimiter = ',',
        value_name = "SCALES",
        default_value = "0.0,0.25,0.5,1.0"
    )]
    scales: Vec<f64>,

    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version arrive here too; only real usage errors
            // take the contract exit code
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Validation => 1,
                ErrorClass::IoFormat => 2,
            })
        }
    }
}
