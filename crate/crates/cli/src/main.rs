use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tvcd_core::generator::{generate_dataset, load_dataset, read_rgb_png, write_mask_png};
use tvcd_core::harness::{
    compare_pairing, evaluate, load_model, train, Predictor, RunConfig, CONFIG_FILE,
};
use tvcd_core::{Error, Result};

/// Text-guided change detection on synthetic bi-temporal pairs.
///
/// Log verbosity follows RUST_LOG (default: info).
#[derive(Parser)]
#[command(name = "tvcd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pair dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of pairs.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a model and write config, checkpoint and log to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset directory (overrides data.train).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out dataset directory (overrides data.eval).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total step count (overrides optimizer.steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint; writes a JSON report to --out if given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (overrides data.eval).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Predict a change mask PNG for one image pair.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Earlier image (PNG).
        #[arg(long)]
        before: PathBuf,
        /// Later image (PNG).
        #[arg(long)]
        after: PathBuf,
    },
    /// Compare building overlap of random pairing against edited pairs.
    ComparePairing {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(path: Option<&Path>, fallback_dir: Option<&Path>) -> Result<RunConfig> {
    let sibling = fallback_dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.exists());
    match path.map(Path::to_path_buf).or(sibling) {
        Some(p) => RunConfig::load(&p),
        None => Ok(RunConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn required(path: Option<PathBuf>, field: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::config(field, "no dataset directory given"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, n } => {
            let mut cfg = load_config(common.config.as_deref(), None)?;
            if let Some(n) = n {
                cfg.generator.n = n;
            }
            if let Some(seed) = common.seed {
                cfg.generator.master_seed = seed;
            }
            cfg.generator.validate()?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("dataset"));
            let m = generate_dataset(&cfg.generator, &out)?;
            println!("{} pairs written to {}", m.samples.len(), out.display());
        }
        Command::Train {
            common,
            data,
            eval_data,
            resume,
            steps,
        } => {
            let mut cfg = load_config(common.config.as_deref(), None)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            if let Some(steps) = steps {
                cfg.optimizer.steps = steps;
            }
            if data.is_some() {
                cfg.data.train = data;
            }
            if eval_data.is_some() {
                cfg.data.eval = eval_data;
            }
            cfg.validate()?;
            let train_ds = load_dataset(&required(cfg.data.train.clone(), "data.train")?)?;
            if train_ds.manifest.num_classes != cfg.model.num_classes {
                return Err(Error::config(
                    "num_classes",
                    format!(
                        "dataset has {} classes, model {}",
                        train_ds.manifest.num_classes, cfg.model.num_classes
                    ),
                ));
            }
            let eval_ds = cfg.data.eval.as_deref().map(load_dataset).transpose()?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("run"));
            let outcome = train(
                &cfg,
                &train_ds.pairs,
                eval_ds.as_ref().map(|d| d.pairs.as_slice()),
                &out,
                resume.as_deref(),
                None,
            )?;
            let last = outcome.log.steps().last().map_or(f64::NAN, |s| s.total);
            println!("trained to step {}; final loss {last:.4}", outcome.trainer.step);
            if let Some(r) = outcome.final_eval {
                println!("F1 {:.4} IoU {:.4} OA {:.4}", r.f1, r.iou, r.oa);
            }
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            oracle,
        } => {
            let dir = checkpoint.as_deref().and_then(Path::parent);
            let mut cfg = load_config(common.config.as_deref(), dir)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            if data.is_some() {
                cfg.data.eval = data;
            }
            let ds = load_dataset(&required(cfg.data.eval.clone(), "data.eval")?)?;
            let report = if oracle {
                evaluate(&cfg, &ds.pairs, &Predictor::Oracle)?
            } else {
                let ckpt = checkpoint.expect("clap enforces --checkpoint without --oracle");
                let (model, store) = load_model(&cfg, &ckpt)?;
                evaluate(&cfg, &ds.pairs, &Predictor::Model { model: &model, store: &store })?
            };
            println!("F1 {:.4} IoU {:.4} OA {:.4}", report.f1, report.iou, report.oa);
            if let Some(out) = common.out {
                write_text(&out, &report.to_json())?;
            }
        }
        Command::Predict {
            common,
            checkpoint,
            before,
            after,
        } => {
            let cfg = load_config(common.config.as_deref(), checkpoint.parent())?;
            let (model, store) = load_model(&cfg, &checkpoint)?;
            let a = read_rgb_png(&before)?;
            let b = read_rgb_png(&after)?;
            let mask = model
                .predict(&store, &a, &b, cfg.ablation.enable_dtco)?
                .to_mask(a.height(), a.width(), cfg.threshold);
            let out = common.out.unwrap_or_else(|| PathBuf::from("change.png"));
            write_mask_png(&out, &mask)?;
            println!("{} changed pixels written to {}", mask.count(), out.display());
        }
        Command::ComparePairing { common } => {
            let mut cfg = load_config(common.config.as_deref(), None)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let report = compare_pairing(&cfg)?;
            println!(
                "random pairing: {} pairs, mean overlap {:.4} ({} nonzero)",
                report.random_pairing.count, report.random_pairing.mean, report.random_pairing.nonzero
            );
            println!(
                "edited pairs:   {} pairs, mean overlap {:.4} ({} nonzero)",
                report.edit_pairing.count, report.edit_pairing.mean, report.edit_pairing.nonzero
            );
            if let Some(out) = common.out {
                write_text(&out, &report.to_json())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
