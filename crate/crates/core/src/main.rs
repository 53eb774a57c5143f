//! Command-line interface: dataset generation, two-stage training,
//! evaluation and per-video scoring.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use protovad::checkpoint::Checkpoint;
use protovad::config::{Ablation, Config, CONFIG_ENV_VAR};
use protovad::data::{generate_synthetic, DatasetManifest, SynthConfig};
use protovad::error::PipelineError;
use protovad::pipeline;

#[derive(Parser)]
#[command(
    name = "protovad",
    about = "Prototype-constrained future-frame prediction for video anomaly detection",
    version
)]
struct Cli {
    /// TOML config file; overrides every hyperparameter default. Falls
    /// back to $PROTOVAD_CONFIG when not given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled video dataset.
    GenData {
        /// Output dataset root directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset size preset; ignored when a config file sets [data].
        #[arg(long, default_value = "default", value_parser = ["default", "small"])]
        preset: String,
    },
    /// Stage 1: autoencoder pre-training with online pre-clustering.
    Pretrain {
        /// Dataset root (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write (updated every epoch).
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: formal training of the full model (or an ablation).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model variant: none|no-ac|no-dlan|no-drcs|rand-init|fixed-m=N
        #[arg(long, default_value = "none")]
        ablation: String,
        /// Resume from an interrupted stage-2 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs (schedule unchanged); pairs with
        /// --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score the test split and report frame-level AUC.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for per-video score CSVs and SVG curves.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Score a single directory of frame_*.pgm files (CSV on stdout).
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        /// Video directory.
        #[arg(long)]
        video: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = Config::resolve(cli.config.as_deref())?;
    let has_config_file =
        cli.config.is_some() || std::env::var_os(CONFIG_ENV_VAR).is_some();
    match cli.cmd {
        Cmd::GenData { out, seed, preset } => {
            let mut data_cfg = if has_config_file {
                cfg.data.clone()
            } else if preset == "small" {
                SynthConfig::small()
            } else {
                SynthConfig::default()
            };
            if let Some(s) = seed {
                data_cfg.seed = s;
            }
            let manifest = generate_synthetic(&data_cfg, &out)?;
            println!(
                "wrote {} train + {} test videos ({}px) under {}",
                manifest.train_videos().count(),
                manifest.test_videos().count(),
                manifest.frame_size,
                out.display()
            );
        }
        Cmd::Pretrain { data, out } => {
            let manifest = DatasetManifest::load(&data)?;
            let ckpt = pipeline::pretrain(&cfg, &manifest, &out)?;
            match ckpt.meta.ac_m {
                Some(m) => println!(
                    "pretraining done: {} epochs, cluster estimate M = {m}; checkpoint at {}",
                    ckpt.meta.epochs_done,
                    out.display()
                ),
                None => println!(
                    "pretraining done: {} epochs (clusterer disabled); checkpoint at {}",
                    ckpt.meta.epochs_done,
                    out.display()
                ),
            }
        }
        Cmd::Train { data, pre, out, ablation, resume, stop_after } => {
            let manifest = DatasetManifest::load(&data)?;
            let pre_ckpt = Checkpoint::load(&pre)?;
            let ablation: Ablation = ablation.parse()?;
            let resume_ckpt = resume.as_deref().map(Checkpoint::load).transpose()?;
            let ckpt = pipeline::train_until(
                &cfg,
                &manifest,
                &pre_ckpt,
                ablation,
                &out,
                resume_ckpt.as_ref(),
                stop_after,
            )?;
            println!(
                "training done: {} epochs ({}); checkpoint at {}",
                ckpt.meta.epochs_done,
                ckpt.meta.ablation,
                out.display()
            );
        }
        Cmd::Eval { ckpt, data, report_dir } => {
            let manifest = DatasetManifest::load(&data)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let (auc, videos) = pipeline::evaluate(&ckpt, &manifest, report_dir.as_deref())?;
            for v in &videos {
                let anomalous = v.labels.iter().filter(|&&l| l != 0).count();
                println!(
                    "{}: {} scored frames, {} labeled anomalous",
                    v.video_id,
                    v.score.len(),
                    anomalous
                );
            }
            println!("frame-level AUC: {auc:.6}");
            if let Some(dir) = report_dir {
                println!("reports written to {}", dir.display());
            }
        }
        Cmd::Score { ckpt, video } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let scores = pipeline::score_video_dir(&ckpt, &video)?;
            println!("frame_index,psnr,score");
            for i in 0..scores.psnr.len() {
                println!("{},{},{}", scores.start_frame + i, scores.psnr[i], scores.score[i]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
