use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::change_head::LossWeights;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::model::{ModelConfig, ObjectiveOptions};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Divides raw patch cosine similarities before they are mapped to [0, 1].
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier on `lr` for the image encoder's parameters.
    pub image_encoder_lr_mult: f64,
    pub poly_decay: bool,
    pub poly_power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 2000,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            image_encoder_lr_mult: 0.1,
            poly_decay: true,
            poly_power: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    /// Side of a random square crop; `None` disables cropping.
    pub crop: Option<usize>,
    /// Randomly exchange the two temporals.
    pub swap: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            crop: None,
            swap: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub enable_lva: bool,
    pub enable_pca: bool,
    pub enable_dtco: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            enable_lva: true,
            enable_pca: true,
            enable_dtco: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Scenes in the single-temporal pool.
    pub pool_size: usize,
    /// Batch size for random in-batch pairing.
    pub batch_size: usize,
    /// Add one building at a shared location to every scene so that random
    /// pairing is guaranteed to produce co-located buildings.
    pub colocated: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            pool_size: 64,
            batch_size: 8,
            colocated: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub freeze_text_encoder: bool,
    pub augment: AugmentConfig,
    pub ablation: AblationConfig,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub compare: CompareConfig,
    /// Change threshold on the predicted probability.
    pub threshold: f64,
    /// Evaluate on `data.eval` every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            seed: 7,
            image_size: 64,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            freeze_text_encoder: true,
            augment: AugmentConfig::default(),
            ablation: AblationConfig::default(),
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            compare: CompareConfig::default(),
            threshold: 0.5,
            eval_every: 0,
        }
    }
}

fn json_err(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
    let context = context.into();
    move |source| Error::Json { context, source }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            // unknown or mistyped fields are configuration errors
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(json_err("run config"))
    }

    pub fn objective(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            weights: LossWeights {
                alpha: self.loss.alpha,
                beta: self.loss.beta,
            },
            temperature: self.loss.temperature,
            enable_lva: self.ablation.enable_lva,
            enable_pca: self.ablation.enable_pca,
            enable_dtco: self.ablation.enable_dtco,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::config(
                "format_version",
                format!("expected {CONFIG_VERSION}, got {}", self.format_version),
            ));
        }
        self.model.validate()?;
        let stride = self.model.patch_size;
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(Error::config(
                "image_size",
                format!("must be a positive multiple of patch_size {stride}"),
            ));
        }
        LossWeights {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
        }
        .validate()?;
        if !(self.loss.temperature.is_finite() && self.loss.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        let o = &self.optimizer;
        let positive = [
            ("lr", o.lr),
            ("beta2", o.beta2),
            ("eps", o.eps),
            ("poly_power", o.poly_power),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || o.beta2 >= 1.0 {
            return Err(Error::config("beta1", "moment decay rates must lie in [0, 1)"));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if !(o.image_encoder_lr_mult.is_finite() && o.image_encoder_lr_mult >= 0.0) {
            return Err(Error::config("image_encoder_lr_mult", "must be >= 0"));
        }
        if o.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if o.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if let Some(c) = self.augment.crop {
            if c == 0 || c % stride != 0 || c > self.image_size {
                return Err(Error::config(
                    "crop",
                    format!("must be a multiple of patch_size no larger than image_size, got {c}"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold", "must be in [0, 1]"));
        }
        self.generator.validate()?;
        if self.generator.num_classes != self.model.num_classes {
            return Err(Error::config(
                "num_classes",
                format!(
                    "generator K = {} but model K = {}",
                    self.generator.num_classes, self.model.num_classes
                ),
            ));
        }
        if self.compare.pool_size < 2 {
            return Err(Error::config("pool_size", "need at least 2 scenes"));
        }
        if self.compare.batch_size < 2 {
            return Err(Error::config("batch_size", "random pairing needs batches of at least 2"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_json().unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn default_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.loss.alpha, c.loss.beta), (0.1, 0.1));
        assert_eq!(c.optimizer.lr, 1e-4);
        assert_eq!(c.optimizer.image_encoder_lr_mult, 0.1);
        assert!(c.freeze_text_encoder && c.optimizer.poly_decay);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn errors_name_the_field() {
        let field = |json: &str| match RunConfig::from_json(json) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(r#"{"model": {"num_classes": 1}}"#), "num_classes");
        assert_eq!(field(r#"{"loss": {"alpha": -0.5}}"#), "alpha");
        assert_eq!(field(r#"{"image_size": 60}"#), "image_size");
        assert_eq!(field(r#"{"bogus": 1}"#), "bogus");
        assert_eq!(field(r#"{"optimizer": {"lr": 0}}"#), "lr");
    }
}
