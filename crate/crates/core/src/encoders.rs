//! Patch-transformer image encoder, prompt-context text encoder and the
//! feature-pyramid upsampler that turns patch features into dense ones.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoid_1d, sinusoid_2d, Conv3x3, LayerNorm, Linear, TransformerBlock};
use crate::params::{Bound, ParamId, ParamStore};
use crate::raster::ImageTensor;
use crate::tensor::Tensor;

/// Region features on the patch grid, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Tensor,
}

/// Upsampled per-pixel features, one row per dense-grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatures {
    pub height: usize,
    pub width: usize,
    pub values: Tensor,
}

/// One embedding row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings {
    pub values: Tensor,
}

impl PatchFeatures {
    pub fn new(grid_h: usize, grid_w: usize, values: Tensor) -> Result<Self> {
        if values.rows() != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "{} rows cannot form a {grid_h}x{grid_w} patch grid",
                values.rows()
            )));
        }
        Ok(Self { grid_h, grid_w, values })
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

impl DenseFeatures {
    pub fn new(height: usize, width: usize, values: Tensor) -> Result<Self> {
        if values.rows() != height * width {
            return Err(Error::Shape(format!(
                "{} rows cannot form a {height}x{width} dense grid",
                values.rows()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

impl TextEmbeddings {
    pub fn num_classes(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Rows reordered so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(perm),
        }
    }
}

/// Feature containers that are matrices of row vectors.
pub trait RowFeatures: Sized {
    fn rows(&self) -> &Tensor;
    fn with_rows(&self, values: Tensor) -> Self;
}

impl RowFeatures for PatchFeatures {
    fn rows(&self) -> &Tensor {
        &self.values
    }
    fn with_rows(&self, values: Tensor) -> Self {
        Self { values, ..*self }
    }
}

impl RowFeatures for DenseFeatures {
    fn rows(&self) -> &Tensor {
        &self.values
    }
    fn with_rows(&self, values: Tensor) -> Self {
        Self { values, ..*self }
    }
}

impl RowFeatures for TextEmbeddings {
    fn rows(&self) -> &Tensor {
        &self.values
    }
    fn with_rows(&self, values: Tensor) -> Self {
        Self { values }
    }
}

impl RowFeatures for Tensor {
    fn rows(&self) -> &Tensor {
        self
    }
    fn with_rows(&self, values: Tensor) -> Self {
        values
    }
}

static ZERO_NORM_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Total rows clamped to the norm floor by [`normalize_rows`] in this process.
pub fn zero_norm_clamp_count() -> u64 {
    ZERO_NORM_CLAMPS.load(Ordering::Relaxed)
}

/// Unit-L2 rows; zero rows are divided by the norm floor `1e-8` instead and
/// counted in [`zero_norm_clamp_count`].
pub fn normalize_rows<T: RowFeatures>(features: &T) -> T {
    let mut g = Graph::new();
    let x = g.constant(features.rows().clone());
    let y = g.normalize_rows(x);
    ZERO_NORM_CLAMPS.fetch_add(g.clamped_rows() as u64, Ordering::Relaxed);
    features.with_rows(g.value(y).clone())
}

/// Learnable prompt: `context_len - 1` shared context vectors followed by
/// one class token per class.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub context: ParamId,
    pub class_tokens: ParamId,
    pub context_len: usize,
    pub num_classes: usize,
}

impl PromptBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        context_len: usize,
        num_classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if context_len < 2 {
            return Err(Error::config("context_len", "must be at least 2"));
        }
        if num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        Ok(Self {
            context: store.add("prompt/context", Tensor::randn(context_len - 1, dim, 0.02, rng)),
            class_tokens: store.add("prompt/class_tokens", Tensor::randn(num_classes, dim, 1.0, rng)),
            context_len,
            num_classes,
        })
    }
}

/// Patch embedding, transformer blocks and a final projection to width E.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_size: usize,
    pub dim: usize,
    pub embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        patch_size: usize,
        dim: usize,
        depth: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let embed = Linear::new(store, "image_encoder/patch_embed", patch_size * patch_size * 3, dim, rng);
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("image_encoder/block{i}"), dim, mlp_ratio, rng))
            .collect();
        Self {
            patch_size,
            dim,
            embed,
            blocks,
            norm: LayerNorm::new(store, "image_encoder/norm", dim),
            proj: Linear::new(store, "image_encoder/proj", dim, dim, rng),
        }
    }

    /// Returns the `(grid_h * grid_w, E)` feature node and the grid dims.
    pub fn forward(&self, g: &mut Graph, p: &Bound, img: &ImageTensor) -> Result<(Var, usize, usize)> {
        let patches = img.patches(self.patch_size)?;
        let (gh, gw) = (img.height() / self.patch_size, img.width() / self.patch_size);
        // pixels centred on zero
        let x = g.constant(patches.map(|v| v - 0.5));
        let x = self.embed.forward(g, p, x);
        let pos = g.constant(sinusoid_2d(gh, gw, self.dim));
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, p, x);
        }
        let x = self.norm.forward(g, p, x);
        Ok((self.proj.forward(g, p, x), gh, gw))
    }

    pub fn encode(&self, store: &ParamStore, img: &ImageTensor) -> Result<PatchFeatures> {
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let (f, gh, gw) = self.forward(&mut g, &p, img)?;
        PatchFeatures::new(gh, gw, g.value(f).clone())
    }
}

/// One transformer block over the `context_len` prompt tokens, mean-pool
/// readout and a projection to width E; rows are L2-normalized.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub dim: usize,
    pub block: TransformerBlock,
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            dim,
            block: TransformerBlock::new(store, "text_encoder/block0", dim, mlp_ratio, rng),
            norm: LayerNorm::new(store, "text_encoder/norm", dim),
            proj: Linear::new(store, "text_encoder/proj", dim, dim, rng),
        }
    }

    /// `K x E` node of normalized class embeddings.
    pub fn forward(&self, g: &mut Graph, p: &Bound, bank: &PromptBank) -> Var {
        let context = p.var(bank.context);
        let tokens = p.var(bank.class_tokens);
        let pos = g.constant(sinusoid_1d(bank.context_len, self.dim));
        let rows: Vec<Var> = (0..bank.num_classes)
            .map(|k| {
                let class = g.slice_rows(tokens, k, 1);
                let seq = g.concat_rows(&[context, class]);
                let seq = g.add(seq, pos);
                let h = self.block.forward(g, p, seq);
                let h = self.norm.forward(g, p, h);
                g.mean_rows(h)
            })
            .collect();
        let pooled = g.concat_rows(&rows);
        let t = self.proj.forward(g, p, pooled);
        g.normalize_rows(t)
    }

    pub fn encode(&self, store: &ParamStore, bank: &PromptBank) -> TextEmbeddings {
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let t = self.forward(&mut g, &p, bank);
        TextEmbeddings {
            values: g.value(t).clone(),
        }
    }
}

/// Upsamples patch features by `factor` (a power of two) in x2 stages; each
/// stage is nearest upsampling followed by a residual 3x3 conv + GELU.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub factor: usize,
    pub stages: Vec<Conv3x3>,
}

impl Fpn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, factor: usize, rng: &mut R) -> Result<Self> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(Error::config("upsample_factor", "must be a power of two"));
        }
        let stages = (0..factor.trailing_zeros())
            .map(|i| Conv3x3::new(store, &format!("fpn/stage{i}"), dim, dim, rng))
            .collect();
        Ok(Self { factor, stages })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var, grid_h: usize, grid_w: usize) -> (Var, usize, usize) {
        let (mut x, mut h, mut w) = (f, grid_h, grid_w);
        for conv in &self.stages {
            x = g.upsample_nearest(x, h, w, 2);
            h *= 2;
            w *= 2;
            let y = conv.forward(g, p, x, h, w);
            let y = g.gelu(y);
            x = g.add(x, y);
        }
        (x, h, w)
    }

    pub fn upsample(&self, store: &ParamStore, f: &PatchFeatures) -> DenseFeatures {
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let x = g.constant(f.values.clone());
        let (y, h, w) = self.forward(&mut g, &p, x, f.grid_h, f.grid_w);
        DenseFeatures {
            height: h,
            width: w,
            values: g.value(y).clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_three_four_five() {
        let t = Tensor::from_rows(&[&[3.0, 4.0]]).unwrap();
        let n = normalize_rows(&t);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_idempotent_and_counts_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(100, 32, 1.0, &mut rng);
        let once = normalize_rows(&x);
        for i in 0..100 {
            let n: f64 = once.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
        assert!(normalize_rows(&once).max_abs_diff(&once) <= 1e-12);

        let before = zero_norm_clamp_count();
        let z = normalize_rows(&Tensor::zeros(2, 4));
        assert!(z.data().iter().all(|v| v.is_finite()));
        assert!(zero_norm_clamp_count() >= before + 2);
    }

    #[test]
    fn fpn_rejects_non_power_of_two() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(Fpn::new(&mut store, 8, 3, &mut rng).is_err());
        let fpn = Fpn::new(&mut store, 8, 1, &mut rng).unwrap();
        assert!(fpn.stages.is_empty());
    }

    #[test]
    fn prompt_bank_validates_lengths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(PromptBank::new(&mut store, 1, 3, 8, &mut rng).is_err());
        let mut store = ParamStore::new();
        assert!(PromptBank::new(&mut store, 4, 1, 8, &mut rng).is_err());
    }
}
