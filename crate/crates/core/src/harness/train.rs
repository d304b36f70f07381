use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::autodiff::Graph;
use crate::checkpoint::{write_atomic, Archive};
use crate::error::{Error, Result};
use crate::generator::{mix, DatasetPair};
use crate::model::{Model, PairTargets, IMAGE_ENCODER_PREFIX, TEXT_ENCODER_PREFIX};
use crate::params::{ParamId, ParamStore};
use crate::raster::{ChangeMask, ImageTensor, LabelMap};
use crate::tensor::Tensor;

const MODEL_PREFIX: &str = "model/";
const M_PREFIX: &str = "optim/m/";
const V_PREFIX: &str = "optim/v/";
const STEP_KEY: &str = "optim/step";

/// Loss components of one optimizer step, averaged over the batch.
/// Disabled auxiliary losses are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub batch: Vec<usize>,
    pub seg: f64,
    pub cd: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lva: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pca_post: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pca_past: Option<f64>,
    /// Weighted contribution of the alignment loss to `total`.
    pub lva_term: f64,
    /// Weighted contribution of the two score-map losses to `total`.
    pub pca_term: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|source| Error::Json {
                    context: "train log".into(),
                    source,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

/// One augmented training example.
pub struct Example {
    pub img_a: ImageTensor,
    pub img_b: ImageTensor,
    pub labels_a: LabelMap,
    pub labels_b: LabelMap,
    pub change: ChangeMask,
}

/// AdamW state for one parameter.
#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    /// Number of optimizer steps taken so far.
    pub step: usize,
    trainable: Vec<bool>,
    lr_mult: Vec<f64>,
    moments: Vec<Moments>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::new(&config.model, config.seed)?;
        let freeze_text = config.freeze_text_encoder;
        let trainable = store
            .ids()
            .map(|id| !(freeze_text && store.name(id).starts_with(TEXT_ENCODER_PREFIX)))
            .collect();
        let lr_mult = store
            .ids()
            .map(|id| {
                if store.name(id).starts_with(IMAGE_ENCODER_PREFIX) {
                    config.optimizer.image_encoder_lr_mult
                } else {
                    1.0
                }
            })
            .collect();
        let moments = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Moments {
                    m: Tensor::zeros(r, c),
                    v: Tensor::zeros(r, c),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            model,
            store,
            step: 0,
            trainable,
            lr_mult,
            moments,
        })
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(config: &RunConfig, path: &Path) -> Result<Self> {
        let mut t = Self::new(config)?;
        let archive = Archive::load(path)?;
        t.store.load_from(archive.with_prefix(MODEL_PREFIX))?;
        let step = archive
            .get(STEP_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("{}: no optimizer step", path.display())))?;
        t.step = step.item() as usize;
        for id in t.store.ids().collect::<Vec<_>>() {
            let name = t.store.name(id).to_string();
            let shape = t.store.get(id).shape();
            let fetch = |prefix: &str| -> Result<Tensor> {
                let key = format!("{prefix}{name}");
                let v = archive
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry {key}")))?;
                if v.shape() != shape {
                    return Err(Error::Checkpoint(format!("optimizer entry {key} has the wrong shape")));
                }
                Ok(v.clone())
            };
            t.moments[id.index()] = Moments {
                m: fetch(M_PREFIX)?,
                v: fetch(V_PREFIX)?,
            };
        }
        Ok(t)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (name, value) in self.store.iter() {
            a.insert(format!("{MODEL_PREFIX}{name}"), value.clone());
        }
        for id in self.store.ids() {
            let name = self.store.name(id);
            let mo = &self.moments[id.index()];
            a.insert(format!("{M_PREFIX}{name}"), mo.m.clone());
            a.insert(format!("{V_PREFIX}{name}"), mo.v.clone());
        }
        a.insert(STEP_KEY, Tensor::scalar(self.step as f64));
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Learning rate used by the step about to be taken.
    pub fn current_lr(&self) -> f64 {
        let o = &self.config.optimizer;
        if o.poly_decay {
            let progress = (self.step as f64 / o.steps as f64).min(1.0);
            o.lr * (1.0 - progress).powf(o.poly_power)
        } else {
            o.lr
        }
    }

    /// Dataset indices and augmentation choices of step `step`; a pure
    /// function of the seed and the step so resumed runs see the same data.
    pub fn batch_for(&self, step: usize, data: &[DatasetPair]) -> (Vec<usize>, Vec<Example>) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, step as u64));
        let count = self.config.optimizer.batch_size.min(data.len());
        let ids = rand::seq::index::sample(&mut rng, data.len(), count).into_vec();
        let examples = ids.iter().map(|&i| self.augment(&data[i], &mut rng)).collect();
        (ids, examples)
    }

    fn augment(&self, pair: &DatasetPair, rng: &mut ChaCha8Rng) -> Example {
        let aug = &self.config.augment;
        let mut ex = Example {
            img_a: pair.img_a.clone(),
            img_b: pair.img_b.clone(),
            labels_a: pair.labels_a.clone(),
            labels_b: pair.labels_b.clone(),
            change: pair.change.clone(),
        };
        // draw every choice unconditionally so toggling one switch does not
        // shift the others
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let swap = rng.random_bool(0.5);
        let (cy, cx): (f64, f64) = (rng.random(), rng.random());
        if aug.hflip && hflip {
            ex = Example {
                img_a: ex.img_a.flip_horizontal(),
                img_b: ex.img_b.flip_horizontal(),
                labels_a: ex.labels_a.flip_horizontal(),
                labels_b: ex.labels_b.flip_horizontal(),
                change: ex.change.flip_horizontal(),
            };
        }
        if aug.vflip && vflip {
            ex = Example {
                img_a: ex.img_a.flip_vertical(),
                img_b: ex.img_b.flip_vertical(),
                labels_a: ex.labels_a.flip_vertical(),
                labels_b: ex.labels_b.flip_vertical(),
                change: ex.change.flip_vertical(),
            };
        }
        if let Some(size) = aug.crop {
            let h = ex.img_a.height();
            let w = ex.img_a.width();
            let size_h = size.min(h);
            let size_w = size.min(w);
            let top = ((h - size_h + 1) as f64 * cy) as usize;
            let left = ((w - size_w + 1) as f64 * cx) as usize;
            ex = Example {
                img_a: ex.img_a.crop(top, left, size_h, size_w),
                img_b: ex.img_b.crop(top, left, size_h, size_w),
                labels_a: ex.labels_a.crop(top, left, size_h, size_w),
                labels_b: ex.labels_b.crop(top, left, size_h, size_w),
                change: ex.change.crop(top, left, size_h, size_w),
            };
        }
        if aug.swap && swap {
            std::mem::swap(&mut ex.img_a, &mut ex.img_b);
            std::mem::swap(&mut ex.labels_a, &mut ex.labels_b);
        }
        ex
    }

    /// Loss and summed parameter gradients for one example.
    pub fn example_gradients(&self, ex: &Example) -> Result<(StepRecord, Vec<Option<Tensor>>)> {
        let opts = self.config.objective();
        let mut g = Graph::new();
        let trainable = &self.trainable;
        let freeze_text = self.config.freeze_text_encoder;
        let p = self
            .store
            .bind(&mut g, |name| !(freeze_text && name.starts_with(TEXT_ENCODER_PREFIX)));
        let fwd = self.model.forward(&mut g, &p, &ex.img_a, &ex.img_b, opts.enable_dtco)?;
        let targets = PairTargets {
            labels_a: &ex.labels_a,
            labels_b: &ex.labels_b,
            change: &ex.change,
        };
        let losses = self.model.objective(&mut g, &p, &fwd, &targets, &opts)?;
        let lva = losses.lva.map(|v| g.scalar(v));
        let pca_post = losses.pca_b.map(|v| g.scalar(v));
        let pca_past = losses.pca_a.map(|v| g.scalar(v));
        let record = StepRecord {
            step: self.step,
            lr: self.current_lr(),
            batch: Vec::new(),
            seg: g.scalar(losses.seg),
            cd: g.scalar(losses.cd),
            lva,
            pca_post,
            pca_past,
            lva_term: lva.map_or(0.0, |v| opts.weights.alpha * v),
            pca_term: match (pca_post, pca_past) {
                (Some(a), Some(b)) => opts.weights.beta * (a + b),
                _ => 0.0,
            },
            total: g.scalar(losses.total),
        };
        let mut grads = g.backward(losses.total);
        let out = self
            .store
            .ids()
            .map(|id| if trainable[id.index()] { grads.take(p.var(id)) } else { None })
            .collect();
        Ok((record, out))
    }

    /// One optimizer step on the batch chosen for the current step.
    pub fn train_step(&mut self, data: &[DatasetPair]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::Dataset("no training pairs".into()));
        }
        let (ids, examples) = self.batch_for(self.step, data);
        let n = examples.len() as f64;
        let mut sum: Vec<Option<Tensor>> = vec![None; self.store.len()];
        let mut acc = StepRecord {
            step: self.step,
            lr: self.current_lr(),
            batch: ids.clone(),
            seg: 0.0,
            cd: 0.0,
            lva: None,
            pca_post: None,
            pca_past: None,
            lva_term: 0.0,
            pca_term: 0.0,
            total: 0.0,
        };
        let add_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, b) => b.map(|v| v / n),
            (Some(a), Some(b)) => Some(a + b / n),
            (Some(a), None) => Some(a),
        };
        for ex in &examples {
            let (r, grads) = self.example_gradients(ex)?;
            let finite = [r.seg, r.cd, r.total].iter().chain(r.lva.iter()).chain(r.pca_post.iter()).chain(r.pca_past.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite {
                    step: self.step,
                    batch: ids,
                    detail: format!(
                        "seg={} cd={} lva={:?} pca_post={:?} pca_past={:?} total={}",
                        r.seg, r.cd, r.lva, r.pca_post, r.pca_past, r.total
                    ),
                });
            }
            acc.seg += r.seg / n;
            acc.cd += r.cd / n;
            acc.lva = add_opt(acc.lva, r.lva);
            acc.pca_post = add_opt(acc.pca_post, r.pca_post);
            acc.pca_past = add_opt(acc.pca_past, r.pca_past);
            acc.lva_term += r.lva_term / n;
            acc.pca_term += r.pca_term / n;
            acc.total += r.total / n;
            for (slot, g) in sum.iter_mut().zip(grads) {
                match (slot.as_mut(), g) {
                    (Some(s), Some(g)) => s.axpy(1.0, &g),
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
        }
        self.apply_update(&sum, 1.0 / n);
        self.step += 1;
        Ok(acc)
    }

    /// AdamW with decoupled weight decay; `grads` are scaled by `scale`.
    fn apply_update(&mut self, grads: &[Option<Tensor>], scale: f64) {
        let o = self.config.optimizer.clone();
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - o.beta1.powi(t);
        let bc2 = 1.0 - o.beta2.powi(t);
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let step_lr = lr * self.lr_mult[i];
            let mo = &mut self.moments[i];
            let p = self.store.get_mut(id);
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = o.beta1 * *mi + (1.0 - o.beta1) * gi;
                *vi = o.beta2 * *vi + (1.0 - o.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + o.eps);
                *w -= step_lr * (update + o.weight_decay * *w);
            }
        }
    }
}

/// Writes the log as JSON lines, appending when `append` is set.
pub fn write_log(path: &Path, entries: &[LogEntry], append: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let text = TrainLog {
        entries: entries.to_vec(),
    }
    .to_jsonl();
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes the diagnostic dump for a failed step.
pub fn write_failure_dump(path: &Path, err: &Error) -> Result<()> {
    if let Error::NonFinite { step, batch, detail } = err {
        let dump = serde_json::json!({ "step": step, "batch": batch, "detail": detail });
        let text = serde_json::to_string_pretty(&dump).expect("json values serialize");
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}
