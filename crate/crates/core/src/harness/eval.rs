use std::path::Path;

use super::config::RunConfig;
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::generator::DatasetPair;
use crate::metrics::{confusion, metrics, ConfusionCounts, MetricsReport, PerImage};
use crate::model::Model;
use crate::params::ParamStore;
use crate::raster::{BinaryMask, ChangeMask, ImageTensor};

/// Where change masks come from during evaluation.
pub enum Predictor<'a> {
    Model { model: &'a Model, store: &'a ParamStore },
    /// Returns the ground truth itself.
    Oracle,
    AllPositive,
    AllNegative,
}

impl Predictor<'_> {
    pub fn predict(&self, cfg: &RunConfig, a: &ImageTensor, b: &ImageTensor, gt: &ChangeMask) -> Result<ChangeMask> {
        let (h, w) = (gt.height(), gt.width());
        Ok(match self {
            Predictor::Model { model, store } => {
                model
                    .predict(store, a, b, cfg.ablation.enable_dtco)?
                    .to_mask(h, w, cfg.threshold)
            }
            Predictor::Oracle => gt.clone(),
            Predictor::AllPositive => BinaryMask::from_fn(h, w, |_, _| true),
            Predictor::AllNegative => BinaryMask::empty(h, w),
        })
    }
}

/// Micro-averaged report with per-image counts attached.
pub fn evaluate(cfg: &RunConfig, pairs: &[DatasetPair], predictor: &Predictor<'_>) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let pred = predictor.predict(cfg, &pair.img_a, &pair.img_b, &pair.change)?;
        per_image.push(PerImage {
            id: pair.id.clone(),
            counts: confusion(&pred, &pair.change)?,
        });
    }
    let total: ConfusionCounts = per_image.iter().map(|p| p.counts).sum();
    let mut report = metrics(total)?;
    report.per_image = Some(per_image);
    Ok(report)
}

/// Model parameters from a checkpoint archive (optimizer state is ignored).
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Model, ParamStore)> {
    cfg.validate()?;
    let (model, mut store) = Model::new(&cfg.model, cfg.seed)?;
    let archive = Archive::load(checkpoint)?;
    store
        .load_from(archive.with_prefix("model/"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", checkpoint.display())))?;
    Ok((model, store))
}
