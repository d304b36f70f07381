//! Run configuration, training loop, evaluation and pairing comparison.
//!
//! A training output directory holds `config.json`, `checkpoint.bin`
//! (parameters plus optimizer state) and `train_log.jsonl`.
//! Runs are reproducible from the config and seed; everything executes on
//! the calling thread.

mod compare;
mod config;
mod eval;
mod train;

use std::path::{Path, PathBuf};

pub use compare::{compare_pairing, OverlapSummary, PairingComparison};
pub use config::{
    AblationConfig, AugmentConfig, CompareConfig, DataConfig, LossConfig, OptimizerConfig, RunConfig, CONFIG_VERSION,
};
pub use eval::{evaluate, load_model, Predictor};
pub use train::{
    write_failure_dump, write_log, EvalRecord, Example, LogEntry, StepRecord, TrainLog, Trainer,
};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::generator::DatasetPair;
use crate::metrics::MetricsReport;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FAILURE_FILE: &str = "failure.json";

pub struct TrainOutcome {
    pub log: TrainLog,
    pub checkpoint: PathBuf,
    pub final_eval: Option<MetricsReport>,
    pub trainer: Trainer,
}

/// Trains until `config.optimizer.steps`, optionally continuing from a
/// checkpoint, and writes the run directory. `stop_after` ends the run early
/// (after that many total steps) while keeping the decay schedule of the
/// full run.
pub fn train(
    config: &RunConfig,
    train_data: &[DatasetPair],
    eval_data: Option<&[DatasetPair]>,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(path) => Trainer::resume(config, path)?,
        None => Trainer::new(config)?,
    };
    if let Some(pair) = train_data.first() {
        let want = (config.image_size, config.image_size);
        if (pair.img_a.height(), pair.img_a.width()) != want {
            return Err(Error::config(
                "image_size",
                format!(
                    "dataset images are {}x{}, config says {}",
                    pair.img_a.height(),
                    pair.img_a.width(),
                    config.image_size
                ),
            ));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(CONFIG_FILE), config.to_json()?.as_bytes())?;

    let end = stop_after.unwrap_or(config.optimizer.steps).min(config.optimizer.steps);
    let mut log = TrainLog::default();
    while trainer.step < end {
        let record = match trainer.train_step(train_data) {
            Ok(r) => r,
            Err(e) => {
                write_failure_dump(&out.join(FAILURE_FILE), &e)?;
                write_log(&out.join(LOG_FILE), &log.entries, resume.is_some())?;
                return Err(e);
            }
        };
        if record.step % 25 == 0 || trainer.step == end {
            log::info!(
                "step {:>5} lr {:.2e} total {:.4} seg {:.4} cd {:.4}",
                record.step,
                record.lr,
                record.total,
                record.seg,
                record.cd
            );
        }
        log.entries.push(LogEntry::Step(record));
        if let (Some(data), true) = (eval_data, config.eval_every > 0) {
            if trainer.step % config.eval_every == 0 && trainer.step < end {
                log.entries.push(LogEntry::Eval(eval_record(&trainer, data)?.0));
            }
        }
    }
    let final_eval = match eval_data {
        Some(data) => {
            let (rec, report) = eval_record(&trainer, data)?;
            log::info!("eval at step {}: F1 {:.4} IoU {:.4} OA {:.4}", rec.step, rec.f1, rec.iou, rec.oa);
            log.entries.push(LogEntry::Eval(rec));
            Some(report)
        }
        None => None,
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer.save(&checkpoint)?;
    write_log(&out.join(LOG_FILE), &log.entries, resume.is_some())?;
    Ok(TrainOutcome {
        log,
        checkpoint,
        final_eval,
        trainer,
    })
}

fn eval_record(trainer: &Trainer, data: &[DatasetPair]) -> Result<(EvalRecord, MetricsReport)> {
    let predictor = Predictor::Model {
        model: &trainer.model,
        store: &trainer.store,
    };
    let report = evaluate(&trainer.config, data, &predictor)?;
    Ok((
        EvalRecord {
            step: trainer.step,
            f1: report.f1,
            iou: report.iou,
            oa: report.oa,
        },
        report,
    ))
}
