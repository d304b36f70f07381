//! Dynamic text-vision context fusion.
//!
//! Class embeddings `t` attend over the patch tokens plus their mean-pooled
//! summary `g`, giving a per-class visual context `z`. Two adapters mix the
//! modalities and a learnable per-dimension weight keeps a direct path:
//!
//! ```text
//! t_hat = phi(z) * t + varsigma(t) * z + sigma * t      (elementwise)
//! ```
//!
//! `phi` and `varsigma` start with zero output layers and `sigma` with ones,
//! so an untrained fusion returns `t` unchanged.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoders::{PatchFeatures, TextEmbeddings};
use crate::error::{Error, Result};
use crate::nn::{Attention, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DtcoParams {
    pub xattn: Attention,
    /// Visual-side adapter applied to `z`.
    pub mlp_v: Mlp,
    /// Text-side adapter applied to `t`.
    pub mlp_t: Mlp,
    pub sigma: ParamId,
    pub dim: usize,
}

impl DtcoParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            xattn: Attention::new(store, "dtco/xattn", dim, rng),
            mlp_v: Mlp::zero_output(store, "dtco/mlp_v", dim, dim, rng),
            mlp_t: Mlp::zero_output(store, "dtco/mlp_t", dim, dim, rng),
            sigma: store.add("dtco/sigma", Tensor::full(1, dim, 1.0)),
            dim,
        }
    }

    /// `f` is `N x E` patch features, `t` is `K x E`; returns `K x E`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var, t: Var) -> Var {
        let pooled = g.mean_rows(f);
        let visual = g.concat_rows(&[f, pooled]);
        let z = self.xattn.forward(g, p, t, visual);
        let phi = self.mlp_v.forward(g, p, z);
        let vs = self.mlp_t.forward(g, p, t);
        let a = g.mul(phi, t);
        let b = g.mul(vs, z);
        let c = g.mul_row(t, p.var(self.sigma));
        let ab = g.add(a, b);
        g.add(ab, c)
    }
}

/// Per-channel mean over all patch positions.
pub fn pool_visual(f: &PatchFeatures) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(f.values.clone());
    let m = g.mean_rows(x);
    g.value(m).data().to_vec()
}

pub fn dtco_fuse(
    store: &ParamStore,
    params: &DtcoParams,
    f: &PatchFeatures,
    t: &TextEmbeddings,
) -> Result<TextEmbeddings> {
    if f.dim() != t.dim() || f.dim() != params.dim {
        return Err(Error::Shape(format!(
            "embedding width mismatch: features {}, text {}, fusion {}",
            f.dim(),
            t.dim(),
            params.dim
        )));
    }
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let fv = g.constant(f.values.clone());
    let tv = g.constant(t.values.clone());
    let out = params.forward(&mut g, &p, fv, tv);
    Ok(TextEmbeddings {
        values: g.value(out).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::normalize_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(k: usize, e: usize, seed: u64) -> (ParamStore, DtcoParams, PatchFeatures, TextEmbeddings) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = DtcoParams::new(&mut store, e, &mut rng);
        let f = PatchFeatures::new(4, 4, Tensor::randn(16, e, 1.0, &mut rng)).unwrap();
        let t = TextEmbeddings {
            values: normalize_rows(&Tensor::randn(k, e, 1.0, &mut rng)),
        };
        (store, params, f, t)
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (r, c) = store.get(id).shape();
            *store.get_mut(id) = Tensor::randn(r, c, 0.3, &mut rng);
        }
    }

    #[test]
    fn identity_at_initialization() {
        let (store, params, f, t) = setup(3, 16, 1);
        let out = dtco_fuse(&store, &params, &f, &t).unwrap();
        assert!(out.values.max_abs_diff(&t.values) <= 1e-12);
    }

    #[test]
    fn shape_and_width_check() {
        let (store, params, f, _) = setup(5, 64, 2);
        let t = TextEmbeddings {
            values: Tensor::full(5, 64, 0.1),
        };
        assert_eq!(dtco_fuse(&store, &params, &f, &t).unwrap().values.shape(), (5, 64));
        let narrow = TextEmbeddings {
            values: Tensor::full(5, 32, 0.1),
        };
        assert!(dtco_fuse(&store, &params, &f, &narrow).is_err());
    }

    #[test]
    fn permuting_classes_permutes_rows() {
        let (mut store, params, f, t) = setup(4, 8, 3);
        randomize(&mut store, 30);
        let perm = [2, 0, 3, 1];
        let a = dtco_fuse(&store, &params, &f, &t).unwrap().permuted(&perm);
        let b = dtco_fuse(&store, &params, &f, &t.permuted(&perm)).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-12);
    }

    #[test]
    fn sigma_gradient_is_column_sums_of_t() {
        let (mut store, params, f, t) = setup(3, 8, 4);
        randomize(&mut store, 40);
        let mut g = Graph::new();
        let p = store.bind_all(&mut g);
        let fv = g.constant(f.values.clone());
        let tv = g.constant(t.values.clone());
        let out = params.forward(&mut g, &p, fv, tv);
        let s = g.sum_all(out);
        let grads = g.backward(s);
        let gs = grads.get(p.var(params.sigma)).unwrap();
        for e in 0..8 {
            let col: f64 = (0..3).map(|k| t.values.get(k, e)).sum();
            assert!((gs.get(0, e) - col).abs() < 1e-10);
        }
    }

    #[test]
    fn pooling_examples() {
        let f = PatchFeatures::new(1, 2, Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(pool_visual(&f), vec![0.5, 0.5]);
        let c = PatchFeatures::new(2, 2, Tensor::full(4, 3, 0.7)).unwrap();
        assert!(pool_visual(&c).iter().all(|v| (v - 0.7).abs() < 1e-15));
    }
}
