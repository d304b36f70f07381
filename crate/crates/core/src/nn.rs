//! Small differentiable layers. Each layer owns [`ParamId`]s into a
//! [`ParamStore`] and evaluates on a [`Graph`] through a [`Bound`] binding.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let weight = store.add_scaled_normal(format!("{prefix}/weight"), inp, out, rng);
        let bias = store.add(format!("{prefix}/bias"), Tensor::zeros(1, out));
        Self { weight, bias }
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, inp: usize, out: usize) -> Self {
        let weight = store.add(format!("{prefix}/weight"), Tensor::zeros(inp, out));
        let bias = store.add(format!("{prefix}/bias"), Tensor::zeros(1, out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.weight));
        g.add_row(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}/gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{prefix}/beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}/fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{prefix}/fc2"), hidden, dim, rng),
        }
    }

    /// Output layer starts at zero so the block initially emits zeros.
    pub fn zero_output<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}/fc1"), dim, hidden, rng),
            fc2: Linear::zeros(store, &format!("{prefix}/fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Single-head scaled dot-product attention with input and output
/// projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{prefix}/q"), dim, dim, rng),
            k: Linear::new(store, &format!("{prefix}/k"), dim, dim, rng),
            v: Linear::new(store, &format!("{prefix}/v"), dim, dim, rng),
            out: Linear::new(store, &format!("{prefix}/out"), dim, dim, rng),
            dim,
        }
    }

    /// Rows of `queries` attend over rows of `context`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, queries: Var, context: Var) -> Var {
        let q = self.q.forward(g, p, queries);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let mixed = g.matmul(attn, v);
        self.out.forward(g, p, mixed)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{prefix}/ln1"), dim),
            attn: Attention::new(store, &format!("{prefix}/attn"), dim, rng),
            ln2: LayerNorm::new(store, &format!("{prefix}/ln2"), dim),
            mlp: Mlp::new(store, &format!("{prefix}/mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.ln1.forward(g, p, x);
        let a = self.attn.forward(g, p, h, h);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, p, x);
        let m = self.mlp.forward(g, p, h);
        g.add(x, m)
    }
}

/// 3x3 convolution, stride 1, zero padding 1, over `(h*w, C)` maps.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_scaled_normal(format!("{prefix}/weight"), 9 * inp, out, rng),
            bias: store.add(format!("{prefix}/bias"), Tensor::zeros(1, out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, height: usize, width: usize) -> Var {
        let cols = g.im2col3x3(x, height, width);
        let y = g.matmul(cols, p.var(self.weight));
        g.add_row(y, p.var(self.bias))
    }
}

/// Fixed sinusoidal encodings for `len` positions.
pub fn sinusoid_1d(len: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(len, dim);
    for pos in 0..len {
        fill_sinusoid(out.row_mut(pos), pos as f64);
    }
    out
}

/// Fixed 2-D sinusoidal encodings for a row-major `grid_h x grid_w` grid:
/// the first half of each row encodes y, the second half x.
pub fn sinusoid_2d(grid_h: usize, grid_w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(grid_h * grid_w, dim);
    for y in 0..grid_h {
        for x in 0..grid_w {
            let row = out.row_mut(y * grid_w + x);
            let (a, b) = row.split_at_mut(half);
            fill_sinusoid(a, y as f64);
            fill_sinusoid(b, x as f64);
        }
    }
    out
}

fn fill_sinusoid(row: &mut [f64], pos: f64) {
    let d = row.len().max(1) as f64;
    for (i, v) in row.iter_mut().enumerate() {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d);
        *v = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv3x3_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let conv = Conv3x3::new(&mut store, "c", 2, 3, &mut rng);
        *store.get_mut(conv.bias) = Tensor::randn(1, 3, 1.0, &mut rng);
        let (h, w) = (4, 5);
        let x = Tensor::randn(h * w, 2, 1.0, &mut rng);

        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let y = conv.forward(&mut g, &p, xv, h, w);
        let got = g.value(y).clone();

        let wt = store.get(conv.weight);
        let b = store.get(conv.bias);
        for yy in 0..h {
            for xx in 0..w {
                for o in 0..3 {
                    let mut s = b.get(0, o);
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (yy as i64 + ky - 1, xx as i64 + kx - 1);
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            for c in 0..2 {
                                let wi = ((ky * 3 + kx) as usize) * 2 + c;
                                s += wt.get(wi, o) * x.get(sy as usize * w + sx as usize, c);
                            }
                        }
                    }
                    assert!((got.get(yy * w + xx, o) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sinusoids_are_bounded_and_distinct() {
        let pe = sinusoid_2d(4, 4, 8);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe.row(1), pe.row(4));
        assert_eq!(sinusoid_1d(3, 6).shape(), (3, 6));
    }
}
