//! The assembled bi-temporal model: shared image encoder, prompt text
//! encoder, per-temporal context fusion, dense upsampling, segmentation
//! classifier and change head.
//!
//! Temporal naming: `a` is the earlier image ("past"), `b` the later one
//! ("post"). The change head reads `[f_post, s_post, f_past, s_past]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::change_head::{cd_loss_graph, ChangeHead, ChangeProbMap, LossWeights};
use crate::dtco::DtcoParams;
use crate::encoders::{Fpn, ImageEncoder, PromptBank, TextEncoder};
use crate::error::{Error, Result};
use crate::losses::{lva_graph, patch_similarity_labels, pca_graph, score_map_graph, seg_logits_graph, seg_loss_graph};
use crate::params::{Bound, ParamId, ParamStore};
use crate::raster::{ChangeMask, ImageTensor, LabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub context_len: usize,
    pub upsample_factor: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 32,
            num_classes: 5,
            context_len: 8,
            upsample_factor: 4,
            depth: 2,
            mlp_ratio: 4,
            head_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("mlp_ratio", self.mlp_ratio),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::config("embed_dim", "must be even"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::config("num_classes", format!("must be in 2..=255, got {}", self.num_classes)));
        }
        if self.context_len < 2 {
            return Err(Error::config("context_len", "must be at least 2"));
        }
        if self.upsample_factor == 0 || !self.upsample_factor.is_power_of_two() {
            return Err(Error::config("upsample_factor", "must be a power of two"));
        }
        Ok(())
    }
}

/// Switches and weights for the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    pub temperature: f64,
    pub enable_lva: bool,
    pub enable_pca: bool,
    pub enable_dtco: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            temperature: 1.0,
            enable_lva: true,
            enable_pca: true,
            enable_dtco: true,
        }
    }
}

/// Intermediate nodes of one pair's forward pass.
pub struct PairForward {
    pub grid: (usize, usize),
    pub dense: (usize, usize),
    pub patch_a: Var,
    pub patch_b: Var,
    pub dense_a: Var,
    pub dense_b: Var,
    pub text: Var,
    pub text_a: Var,
    pub text_b: Var,
    pub scores_a: Var,
    pub scores_b: Var,
    pub prob: Var,
}

/// Loss nodes; disabled auxiliary terms are `None`.
pub struct LossNodes {
    pub seg: Var,
    pub cd: Var,
    pub lva: Option<Var>,
    pub pca_a: Option<Var>,
    pub pca_b: Option<Var>,
    pub total: Var,
}

/// Ground truth for one pair.
pub struct PairTargets<'a> {
    pub labels_a: &'a LabelMap,
    pub labels_b: &'a LabelMap,
    pub change: &'a ChangeMask,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub prompt: PromptBank,
    pub fpn: Fpn,
    pub classifier: ParamId,
    pub dtco: DtcoParams,
    pub head: ChangeHead,
}

pub const TEXT_ENCODER_PREFIX: &str = "text_encoder/";
pub const IMAGE_ENCODER_PREFIX: &str = "image_encoder/";

impl Model {
    /// Builds the model and its freshly initialized parameters. All weights
    /// are drawn from one ChaCha8 stream seeded with `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = config.embed_dim;
        let image_encoder = ImageEncoder::new(&mut store, config.patch_size, e, config.depth, config.mlp_ratio, &mut rng);
        let text_encoder = TextEncoder::new(&mut store, e, config.mlp_ratio, &mut rng);
        let prompt = PromptBank::new(&mut store, config.context_len, config.num_classes, e, &mut rng)?;
        let fpn = Fpn::new(&mut store, e, config.upsample_factor, &mut rng)?;
        let classifier = store.add_scaled_normal("seg/classifier", config.num_classes, e, &mut rng);
        let dtco = DtcoParams::new(&mut store, e, &mut rng);
        let head = ChangeHead::new(&mut store, e, config.num_classes, config.head_hidden, &mut rng);
        let model = Self {
            config: config.clone(),
            image_encoder,
            text_encoder,
            prompt,
            fpn,
            classifier,
            dtco,
            head,
        };
        Ok((model, store))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        img_a: &ImageTensor,
        img_b: &ImageTensor,
        enable_dtco: bool,
    ) -> Result<PairForward> {
        if (img_a.height(), img_a.width()) != (img_b.height(), img_b.width()) {
            return Err(Error::Shape("pair images differ in size".into()));
        }
        let (patch_a, gh, gw) = self.image_encoder.forward(g, p, img_a)?;
        let (patch_b, _, _) = self.image_encoder.forward(g, p, img_b)?;
        let (dense_a, dh, dw) = self.fpn.forward(g, p, patch_a, gh, gw);
        let (dense_b, _, _) = self.fpn.forward(g, p, patch_b, gh, gw);
        let text = self.text_encoder.forward(g, p, &self.prompt);
        let (text_a, text_b) = if enable_dtco {
            (
                self.dtco.forward(g, p, patch_a, text),
                self.dtco.forward(g, p, patch_b, text),
            )
        } else {
            (text, text)
        };
        let scores_a = score_map_graph(g, dense_a, text_a);
        let scores_b = score_map_graph(g, dense_b, text_b);
        let prob = self.head.forward(g, p, dense_b, scores_b, dense_a, scores_a, dh, dw);
        Ok(PairForward {
            grid: (gh, gw),
            dense: (dh, dw),
            patch_a,
            patch_b,
            dense_a,
            dense_b,
            text,
            text_a,
            text_b,
            scores_a,
            scores_b,
            prob,
        })
    }

    pub fn objective(
        &self,
        g: &mut Graph,
        p: &Bound,
        fwd: &PairForward,
        targets: &PairTargets<'_>,
        opts: &ObjectiveOptions,
    ) -> Result<LossNodes> {
        let (dh, dw) = fwd.dense;
        let k = self.config.num_classes;
        for l in [targets.labels_a, targets.labels_b] {
            if let Some(m) = l.max_class().filter(|&m| m as usize >= k) {
                return Err(Error::Invalid(format!("class index {m} >= K = {k}")));
            }
        }
        let ya = targets.labels_a.downsample_nearest(dh, dw).indices();
        let yb = targets.labels_b.downsample_nearest(dh, dw).indices();

        let w = p.var(self.classifier);
        let logits_a = seg_logits_graph(g, fwd.dense_a, w);
        let logits_b = seg_logits_graph(g, fwd.dense_b, w);
        let seg = seg_loss_graph(g, logits_b, logits_a, &yb, &ya);

        let change = targets.change.downsample_nearest(dh, dw);
        let cd = cd_loss_graph(g, fwd.prob, &change);
        let mut total = g.add(seg, cd);

        let lva = if opts.enable_lva {
            let ybar = patch_similarity_labels(targets.labels_b, targets.labels_a, fwd.grid.0, fwd.grid.1)?;
            let fa = g.normalize_rows(fwd.patch_a);
            let fb = g.normalize_rows(fwd.patch_b);
            let l = lva_graph(g, fb, fa, &ybar.targets(), opts.temperature);
            let weighted = g.scale(l, opts.weights.alpha);
            total = g.add(total, weighted);
            Some(l)
        } else {
            None
        };

        let (pca_a, pca_b) = if opts.enable_pca {
            let la = pca_graph(g, fwd.scores_a, &ya);
            let lb = pca_graph(g, fwd.scores_b, &yb);
            let both = g.add(lb, la);
            let weighted = g.scale(both, opts.weights.beta);
            total = g.add(total, weighted);
            (Some(la), Some(lb))
        } else {
            (None, None)
        };

        Ok(LossNodes {
            seg,
            cd,
            lva,
            pca_a,
            pca_b,
            total,
        })
    }

    /// Change probabilities at dense resolution.
    pub fn predict(
        &self,
        store: &ParamStore,
        img_a: &ImageTensor,
        img_b: &ImageTensor,
        enable_dtco: bool,
    ) -> Result<ChangeProbMap> {
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let fwd = self.forward(&mut g, &p, img_a, img_b, enable_dtco)?;
        Ok(ChangeProbMap {
            height: fwd.dense.0,
            width: fwd.dense.1,
            values: g.value(fwd.prob).data().to_vec(),
        })
    }
}
