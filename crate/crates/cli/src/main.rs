mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;

#[derive(Parser)]
#[command(
    name = "posefield",
    version,
    about = "Pose extraction, transfer and generation for triangle meshes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a posed worm dataset: template.obj, pose_NNNN.obj, manifest.txt.
    GenData {
        /// `identity-a`, `identity-b`, or a key=value spec file.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the extractor and applier on a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Move the pose of one mesh onto another template.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source_pose: PathBuf,
        #[arg(long)]
        target_template: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        refiner: Option<PathBuf>,
    },
    /// Fit a latent refiner for a target template.
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target_template: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the keypoint and feature diffusion models on dataset latents.
    TrainDiffusion {
        /// Autoencoder checkpoint used to extract latents and, later, decode.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample new poses and apply them to a template.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        target_template: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Mean squared per-vertex distance between two meshes.
    EvalPmd {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { spec, n, seed, out } => commands::gen_data(&spec, n, seed, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let step = commands::train(&config, &data, &out, resume.as_deref())?;
            let history = commands::read_history(&out.join(commands::HISTORY_FILE))?;
            if let Some(last) = history.column("loss").and_then(|l| l.last().copied()) {
                println!("step {step} loss {last:e}");
            }
            Ok(())
        }
        Command::Transfer {
            checkpoint,
            source_pose,
            target_template,
            out,
            refiner,
        } => commands::transfer(
            &checkpoint,
            &source_pose,
            &target_template,
            &out,
            refiner.as_deref(),
        ),
        Command::Refine {
            checkpoint,
            data,
            target_template,
            config,
            out,
        } => commands::refine(&checkpoint, &data, &target_template, &config, &out),
        Command::TrainDiffusion {
            checkpoint,
            data,
            config,
            out,
        } => commands::train_diffusion_cmd(&checkpoint, &data, &config, &out),
        Command::Sample {
            checkpoint,
            n,
            seed,
            target_template,
            out_dir,
        } => commands::sample(&checkpoint, n, seed, &target_template, &out_dir),
        Command::EvalPmd { pred, gt } => {
            let pmd = commands::eval_pmd(&pred, &gt)?;
            println!("pmd {pmd:.6e}\tpmd_x1e-3 {:.6}", pmd * 1e3);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
