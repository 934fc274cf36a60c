//! `acla`: search, train, evaluate and inspect cross-layer attention models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 state, format
//! or checkpoint-version error.

use std::path::PathBuf;
use std::process::ExitCode;

use acla_core::commands;
use acla_core::config::ExperimentConfig;
use acla_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "acla", version, about = "Cross-layer attention experiments for image restoration")]
struct Cli {
    /// Experiment config (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Searches insert positions for ACLA modules.
    Search,
    /// Trains a model, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scores a model (or the raw inputs) on a directory of clean images.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        /// Degraded inputs with matching file names.
        #[arg(long)]
        input_dir: Option<PathBuf>,
    },
    /// Marks the keys each module samples for one query pixel.
    VisualizeKeys {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        row: usize,
        #[arg(long)]
        col: usize,
        /// Keeps every key regardless of its mask.
        #[arg(long)]
        force_masks_on: bool,
    },
    /// Writes synthetic training images.
    MakeData {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 12)]
        count: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = &cli.out_dir;
    match cli.command {
        Command::Search => {
            let s = commands::cmd_search(&cfg, out)?;
            for (l, p) in &s.cv_scores {
                println!("lambda {l}: val psnr {p:.3}");
            }
            let gates: Vec<String> = s.gates.iter().map(|g| format!("{g:.3}")).collect();
            println!("lambda {} gates [{}]", s.lambda, gates.join(", "));
            println!("derived positions {:?}", s.derived);
            println!("wrote {}", out.join("derived.cfg").display());
        }
        Command::Train { resume } => {
            let s = commands::cmd_train(&cfg, out, resume.as_deref())?;
            match s.records.last() {
                Some(r) => println!("epoch {}: val psnr {:.3} ssim {:.4}", r.epoch, r.val_psnr, r.val_ssim),
                None => println!("no epochs to run (at epoch {})", s.start_epoch),
            }
            println!("wrote {}", s.checkpoint.display());
        }
        Command::Eval { checkpoint, data_dir, input_dir } => {
            let s = commands::cmd_eval(&cfg, checkpoint.as_deref(), &data_dir, input_dir.as_deref(), out)?;
            for (name, p, ss) in &s.rows {
                println!("{name}: psnr {p:.3} ssim {ss:.4}");
            }
            println!("mean over {} images: psnr {:.3} ssim {:.4}", s.rows.len(), s.mean_psnr, s.mean_ssim);
        }
        Command::VisualizeKeys { checkpoint, image, row, col, force_masks_on } => {
            let v = commands::cmd_visualize_keys(&checkpoint, &image, (row, col), force_masks_on, out)?;
            println!("{} keys over {} images in {}", v.rows.len(), v.images.len(), out.display());
        }
        Command::MakeData { dir, count, size, channels } => {
            if !matches!(channels, 1 | 3) {
                return Err(Error::Config { field: "channels".into(), detail: "must be 1 or 3".into() });
            }
            let files = commands::make_synthetic(&dir, count, size, channels, cfg.seed)?;
            println!("wrote {} images to {}", files.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
