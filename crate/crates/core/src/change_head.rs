//! Change-detection head and the combined training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::DenseFeatures;
use crate::error::{Error, Result};
use crate::losses::{ScoreMap, BCE_EPS};
use crate::nn::Conv3x3;
use crate::params::{Bound, ParamStore};
use crate::raster::{nearest_src, BinaryMask, ChangeMask};

/// Probability of "changed" per dense-grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeProbMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ChangeProbMap {
    /// Nearest upsampling to `height x width`, then `p >= threshold`.
    pub fn to_mask(&self, height: usize, width: usize, threshold: f64) -> ChangeMask {
        BinaryMask::from_fn(height, width, |y, x| {
            let sy = nearest_src(y, height, self.height);
            let sx = nearest_src(x, width, self.width);
            self.values[sy * self.width + sx] >= threshold
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Two 3x3 convolutions (ReLU between) over `[f_po, s_po, f_pa, s_pa]`
/// producing two channels; the positive channel of their softmax is the
/// change probability.
#[derive(Clone, Debug)]
pub struct ChangeHead {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub in_channels: usize,
}

impl ChangeHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, num_classes: usize, hidden: usize, rng: &mut R) -> Self {
        let in_channels = 2 * dim + 2 * num_classes;
        Self {
            conv1: Conv3x3::new(store, "head/conv1", in_channels, hidden, rng),
            conv2: Conv3x3::new(store, "head/conv2", hidden, 2, rng),
            in_channels,
        }
    }

    /// `N x 1` probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        f_po: Var,
        s_po: Var,
        f_pa: Var,
        s_pa: Var,
        height: usize,
        width: usize,
    ) -> Var {
        let x = g.concat_cols(&[f_po, s_po, f_pa, s_pa]);
        let h = self.conv1.forward(g, p, x, height, width);
        let h = g.relu(h);
        let logits = self.conv2.forward(g, p, h, height, width);
        let probs = g.softmax_rows(logits);
        g.col(probs, 1)
    }
}

/// Change probabilities for one pair of dense features and score maps.
pub fn change_logits(
    store: &ParamStore,
    head: &ChangeHead,
    f_po: &DenseFeatures,
    f_pa: &DenseFeatures,
    s_po: &ScoreMap,
    s_pa: &ScoreMap,
) -> Result<ChangeProbMap> {
    let dims = (f_po.height, f_po.width);
    if (f_pa.height, f_pa.width) != dims || (s_po.height, s_po.width) != dims || (s_pa.height, s_pa.width) != dims {
        return Err(Error::Shape("change head inputs differ in spatial size".into()));
    }
    let width = f_po.dim() + f_pa.dim() + s_po.values.cols() + s_pa.values.cols();
    if width != head.in_channels {
        return Err(Error::Shape(format!(
            "concatenated width {width} vs head input {}",
            head.in_channels
        )));
    }
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let a = g.constant(f_po.values.clone());
    let b = g.constant(s_po.values.clone());
    let c = g.constant(f_pa.values.clone());
    let d = g.constant(s_pa.values.clone());
    let prob = head.forward(&mut g, &p, a, b, c, d, dims.0, dims.1);
    Ok(ChangeProbMap {
        height: dims.0,
        width: dims.1,
        values: g.value(prob).data().to_vec(),
    })
}

pub fn cd_loss_graph(g: &mut Graph, prob: Var, target: &ChangeMask) -> Var {
    g.bce(prob, &target.targets(), BCE_EPS)
}

/// Mean clamped binary cross-entropy; `target` must already be at the
/// probability map's resolution.
pub fn loss_cd(p: &ChangeProbMap, target: &ChangeMask) -> Result<f64> {
    if (target.height(), target.width()) != (p.height, p.width) {
        return Err(Error::Shape(format!(
            "target {}x{} vs probabilities {}x{}",
            target.height(),
            target.width(),
            p.height,
            p.width
        )));
    }
    let mut g = Graph::new();
    let pv = g.constant(crate::tensor::Tensor::from_vec(p.values.len(), 1, p.values.clone())?);
    let l = cd_loss_graph(&mut g, pv, target);
    Ok(g.scalar(l))
}

/// `seg + cd + alpha * lva + beta * (pca_po + pca_pa)`.
pub fn loss_total(seg: f64, cd: f64, lva: f64, pca_po: f64, pca_pa: f64, w: LossWeights) -> f64 {
    seg + cd + w.alpha * lva + w.beta * (pca_po + pca_pa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(h: usize, w: usize, e: usize, k: usize, seed: u64) -> [Tensor; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [
            Tensor::randn(h * w, e, 1.0, &mut rng),
            Tensor::uniform(h * w, k, 0.0, 2.0, &mut rng),
            Tensor::randn(h * w, e, 1.0, &mut rng),
            Tensor::uniform(h * w, k, 0.0, 2.0, &mut rng),
        ]
    }

    fn run(store: &ParamStore, head: &ChangeHead, x: &[Tensor; 4], h: usize, w: usize) -> ChangeProbMap {
        let fd = |t: &Tensor| DenseFeatures::new(h, w, t.clone()).unwrap();
        let sm = |t: &Tensor| ScoreMap {
            height: h,
            width: w,
            values: t.clone(),
        };
        change_logits(store, head, &fd(&x[0]), &fd(&x[2]), &sm(&x[1]), &sm(&x[3])).unwrap()
    }

    #[test]
    fn probabilities_are_valid_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = ChangeHead::new(&mut store, 32, 4, 32, &mut rng);
        assert_eq!(head.in_channels, 72);
        let x = random_inputs(32, 32, 32, 4, 2);
        let p = run(&store, &head, &x, 32, 32);
        assert_eq!(p.values.len(), 32 * 32);
        assert!(p.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn head_is_not_swap_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = ChangeHead::new(&mut store, 8, 3, 8, &mut rng);
        let x = random_inputs(4, 4, 8, 3, 4);
        let swapped = [x[2].clone(), x[3].clone(), x[0].clone(), x[1].clone()];
        let a = run(&store, &head, &x, 4, 4);
        let b = run(&store, &head, &swapped, 4, 4);
        let diff = a.values.iter().zip(&b.values).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = ChangeHead::new(&mut store, 2, 2, 4, &mut rng);
        let f = DenseFeatures::new(2, 2, Tensor::zeros(4, 2)).unwrap();
        let g = DenseFeatures::new(1, 4, Tensor::zeros(4, 2)).unwrap();
        let s = ScoreMap {
            height: 2,
            width: 2,
            values: Tensor::zeros(4, 2),
        };
        assert!(change_logits(&store, &head, &f, &g, &s, &s).is_err());
    }

    #[test]
    fn cd_loss_reference_cases() {
        let target = BinaryMask::new(1, 4, vec![true, false, true, false]).unwrap();
        let exact = ChangeProbMap {
            height: 1,
            width: 4,
            values: vec![1.0, 0.0, 1.0, 0.0],
        };
        assert!(loss_cd(&exact, &target).unwrap() <= 1e-6);
        let half = ChangeProbMap {
            values: vec![0.5; 4],
            ..exact
        };
        assert!((loss_cd(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_composition() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta), (0.1, 0.1));
        assert!((loss_total(1.0, 1.0, 1.0, 1.0, 1.0, w) - 2.3).abs() < 1e-12);
        let zero = LossWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(loss_total(0.7, 0.4, 9.0, 9.0, 9.0, zero), 0.7 + 0.4);
        assert!(LossWeights { alpha: -1.0, beta: 0.0 }.validate().is_err());
    }

    #[test]
    fn mask_export_upsamples_and_thresholds() {
        let p = ChangeProbMap {
            height: 1,
            width: 2,
            values: vec![0.2, 0.5],
        };
        let m = p.to_mask(2, 4, 0.5);
        assert_eq!(m.data(), &[false, false, true, true, false, false, true, true]);
    }
}
