//! Alignment and segmentation objectives on encoder features.
//!
//! * local patch-visual alignment: BCE between patch-pair cosine agreement
//!   and whether both temporals hold the same majority class in that patch
//! * K-way segmentation: softmax cross-entropy of `W f_hat` per temporal
//! * pixel-context alignment: cross-entropy of `-s` where `s` is the cosine
//!   *distance* between dense features and class embeddings
//!
//! Every loss has a graph form (used in training) and a plain form over the
//! feature containers.

use crate::autodiff::{Graph, Var};
use crate::encoders::{DenseFeatures, PatchFeatures, TextEmbeddings};
use crate::error::{Error, Result};
use crate::raster::LabelMap;
use crate::tensor::Tensor;

/// Probability clamp for the binary cross-entropies.
pub const BCE_EPS: f64 = 1e-7;

/// Per-patch indicator that both temporals share the majority class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityLabelGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<bool>,
}

impl SimilarityLabelGrid {
    pub fn targets(&self) -> Vec<f64> {
        self.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn zeros(&self) -> usize {
        self.values.iter().filter(|b| !**b).count()
    }
}

/// Per-pixel cosine distances `1 - cos(f_i, t_k)`, `(H' * W') x K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Tensor,
}

/// Majority class of each `grid_h x grid_w` cell; ties go to the smaller
/// class index.
pub fn patch_majority(labels: &LabelMap, grid_h: usize, grid_w: usize) -> Result<Vec<u8>> {
    let (h, w) = (labels.height(), labels.width());
    if grid_h == 0 || grid_w == 0 || h % grid_h != 0 || w % grid_w != 0 {
        return Err(Error::Shape(format!("grid {grid_h}x{grid_w} does not divide {h}x{w}")));
    }
    let (ph, pw) = (h / grid_h, w / grid_w);
    let mut out = Vec::with_capacity(grid_h * grid_w);
    let mut counts = [0usize; 256];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            counts.fill(0);
            for y in gy * ph..(gy + 1) * ph {
                for x in gx * pw..(gx + 1) * pw {
                    counts[labels.get(y, x) as usize] += 1;
                }
            }
            let mut best = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

pub fn patch_similarity_labels(
    y_po: &LabelMap,
    y_pa: &LabelMap,
    grid_h: usize,
    grid_w: usize,
) -> Result<SimilarityLabelGrid> {
    if (y_po.height(), y_po.width()) != (y_pa.height(), y_pa.width()) {
        return Err(Error::Shape("label maps differ in size".into()));
    }
    let a = patch_majority(y_po, grid_h, grid_w)?;
    let b = patch_majority(y_pa, grid_h, grid_w)?;
    Ok(SimilarityLabelGrid {
        grid_h,
        grid_w,
        values: a.iter().zip(&b).map(|(x, y)| x == y).collect(),
    })
}

/// Patch alignment loss on normalized `N x E` features. The cosine `d` is
/// divided by `temperature`, mapped by `(d + 1) / 2` and clamped inside the
/// BCE.
pub fn lva_graph(g: &mut Graph, fbar_po: Var, fbar_pa: Var, targets: &[f64], temperature: f64) -> Var {
    let d = g.row_dot(fbar_pa, fbar_po);
    let d = g.scale(d, 0.5 / temperature);
    let d = g.add_scalar(d, 0.5);
    g.bce(d, targets, BCE_EPS)
}

/// `N x K` logits `f_hat W^T`.
pub fn seg_logits_graph(g: &mut Graph, fhat: Var, weights: Var) -> Var {
    g.matmul_nt(fhat, weights)
}

pub fn seg_loss_graph(g: &mut Graph, logits_po: Var, logits_pa: Var, y_po: &[usize], y_pa: &[usize]) -> Var {
    let a = g.cross_entropy(logits_po, y_po);
    let b = g.cross_entropy(logits_pa, y_pa);
    g.add(a, b)
}

/// Cosine distance between rows of `fhat` and rows of `t`.
pub fn score_map_graph(g: &mut Graph, fhat: Var, t: Var) -> Var {
    let f = g.normalize_rows(fhat);
    let t = g.normalize_rows(t);
    let cos = g.matmul_nt(f, t);
    let neg = g.scale(cos, -1.0);
    g.add_scalar(neg, 1.0)
}

pub fn pca_graph(g: &mut Graph, scores: Var, labels: &[usize]) -> Var {
    let logits = g.scale(scores, -1.0);
    g.cross_entropy(logits, labels)
}

fn check_labels(labels: &LabelMap, height: usize, width: usize, k: usize) -> Result<Vec<usize>> {
    if (labels.height(), labels.width()) != (height, width) {
        return Err(Error::Shape(format!(
            "labels {}x{} do not match {height}x{width}",
            labels.height(),
            labels.width()
        )));
    }
    if let Some(m) = labels.max_class().filter(|&m| m as usize >= k) {
        return Err(Error::Invalid(format!("class index {m} >= K = {k}")));
    }
    Ok(labels.indices())
}

pub fn loss_lva(
    fbar_po: &PatchFeatures,
    fbar_pa: &PatchFeatures,
    ybar: &SimilarityLabelGrid,
    temperature: f64,
) -> Result<f64> {
    if fbar_po.values.shape() != fbar_pa.values.shape()
        || (fbar_po.grid_h, fbar_po.grid_w) != (ybar.grid_h, ybar.grid_w)
    {
        return Err(Error::Shape("patch features and similarity grid disagree".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(fbar_po.values.clone());
    let b = g.constant(fbar_pa.values.clone());
    let l = lva_graph(&mut g, a, b, &ybar.targets(), temperature);
    Ok(g.scalar(l))
}

pub fn segment_logits(fhat: &DenseFeatures, weights: &Tensor) -> Result<Tensor> {
    if fhat.dim() != weights.cols() {
        return Err(Error::Shape(format!(
            "feature width {} vs classifier width {}",
            fhat.dim(),
            weights.cols()
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(fhat.values.clone());
    let w = g.constant(weights.clone());
    let l = seg_logits_graph(&mut g, f, w);
    Ok(g.value(l).clone())
}

/// Row-wise softmax of logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let p = g.softmax_rows(l);
    g.value(p).clone()
}

/// Sum of the two temporals' mean cross-entropies; labels at the logits'
/// dense resolution.
pub fn loss_seg(
    logits_po: &Tensor,
    logits_pa: &Tensor,
    dense: (usize, usize),
    y_po: &LabelMap,
    y_pa: &LabelMap,
) -> Result<f64> {
    let k = logits_po.cols();
    if logits_pa.shape() != logits_po.shape() || logits_po.rows() != dense.0 * dense.1 {
        return Err(Error::Shape("logit maps disagree".into()));
    }
    let a = check_labels(y_po, dense.0, dense.1, k)?;
    let b = check_labels(y_pa, dense.0, dense.1, k)?;
    let mut g = Graph::new();
    let lp = g.constant(logits_po.clone());
    let la = g.constant(logits_pa.clone());
    let l = seg_loss_graph(&mut g, lp, la, &a, &b);
    Ok(g.scalar(l))
}

pub fn score_map(fhat: &DenseFeatures, t: &TextEmbeddings) -> Result<ScoreMap> {
    if fhat.dim() != t.dim() {
        return Err(Error::Shape(format!("feature width {} vs text width {}", fhat.dim(), t.dim())));
    }
    let mut g = Graph::new();
    let f = g.constant(fhat.values.clone());
    let tv = g.constant(t.values.clone());
    let s = score_map_graph(&mut g, f, tv);
    Ok(ScoreMap {
        height: fhat.height,
        width: fhat.width,
        values: g.value(s).clone(),
    })
}

pub fn loss_pca(scores: &ScoreMap, labels: &LabelMap) -> Result<f64> {
    let y = check_labels(labels, scores.height, scores.width, scores.values.cols())?;
    let mut g = Graph::new();
    let s = g.constant(scores.values.clone());
    let l = pca_graph(&mut g, s, &y);
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::normalize_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pf(rows: &[&[f64]]) -> PatchFeatures {
        PatchFeatures::new(1, rows.len(), Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn lva_reference_cases() {
        let all = |v: bool, n: usize| SimilarityLabelGrid {
            grid_h: 1,
            grid_w: n,
            values: vec![v; n],
        };
        let a = pf(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let same = loss_lva(&a, &a, &all(true, 2), 1.0).unwrap();
        assert!(same <= -(1.0 - BCE_EPS).ln() + 1e-15);

        let b = pf(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let orth = loss_lva(&a, &b, &all(true, 2), 1.0).unwrap();
        assert!((orth - std::f64::consts::LN_2).abs() < 1e-12);

        let c = pf(&[&[-1.0, 0.0], &[0.0, -1.0]]);
        let anti = loss_lva(&a, &c, &all(false, 2), 1.0).unwrap();
        assert!(anti <= 1.01e-7);
    }

    #[test]
    fn similarity_labels_cases() {
        let a = LabelMap::filled(16, 16, 0);
        let b = LabelMap::filled(16, 16, 1);
        assert!(patch_similarity_labels(&a, &a, 2, 2).unwrap().values.iter().all(|&v| v));
        assert_eq!(patch_similarity_labels(&a, &b, 2, 2).unwrap().zeros(), 4);

        // bottom-right quadrant: 40 of 64 pixels become class 2
        let mut c = a.clone();
        let mut n = 0;
        for y in 8..16 {
            for x in 8..16 {
                if n < 40 {
                    c.set(y, x, 2);
                }
                n += 1;
            }
        }
        let grid = patch_similarity_labels(&a, &c, 2, 2).unwrap();
        assert_eq!(grid.values, vec![true, true, true, false]);
        assert_eq!(grid, patch_similarity_labels(&c, &a, 2, 2).unwrap());
    }

    #[test]
    fn majority_ties_break_to_smaller_class() {
        let lm = LabelMap::new(2, 2, vec![3, 1, 1, 3], 4).unwrap();
        assert_eq!(patch_majority(&lm, 1, 1).unwrap(), vec![1]);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        assert!((p.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((p.get(0, 1) - 0.2689).abs() < 1e-4);

        let fhat = DenseFeatures::new(2, 2, Tensor::full(4, 3, 0.4)).unwrap();
        let logits = segment_logits(&fhat, &Tensor::zeros(5, 3)).unwrap();
        let p = softmax(&logits);
        assert!(p.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn seg_rejects_out_of_range_labels() {
        let l = Tensor::zeros(4, 3);
        let ok = LabelMap::filled(2, 2, 0);
        let bad = LabelMap::new(2, 2, vec![0, 0, 0, 3], 4).unwrap();
        assert!(loss_seg(&l, &l, (2, 2), &ok, &bad).is_err());
        let uniform = loss_seg(&l, &l, (2, 2), &ok, &ok).unwrap();
        assert!((uniform - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn score_map_distance_convention() {
        let fhat = DenseFeatures::new(1, 2, Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]).unwrap()).unwrap();
        let t = TextEmbeddings {
            values: Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
        };
        let s = score_map(&fhat, &t).unwrap();
        assert!(s.values.get(0, 0).abs() < 1e-15);
        assert!((s.values.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((s.values.get(1, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pca_decreases_when_true_class_distance_drops() {
        let labels = LabelMap::filled(1, 1, 1);
        let mut prev = f64::INFINITY;
        for s_true in [1.5, 1.0, 0.5, 0.0] {
            let s = ScoreMap {
                height: 1,
                width: 1,
                values: Tensor::from_rows(&[&[1.0, s_true, 0.8]]).unwrap(),
            };
            let l = loss_pca(&s, &labels).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn argmin_distance_is_argmax_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fhat = DenseFeatures::new(4, 4, Tensor::randn(16, 6, 1.0, &mut rng)).unwrap();
        let t = TextEmbeddings {
            values: normalize_rows(&Tensor::randn(4, 6, 1.0, &mut rng)),
        };
        let s = score_map(&fhat, &t).unwrap();
        let fnorm = normalize_rows(&fhat.values);
        for i in 0..16 {
            let cos: Vec<f64> = (0..4)
                .map(|k| fnorm.row(i).iter().zip(t.values.row(k)).map(|(a, b)| a * b).sum())
                .collect();
            let argmax = (0..4).max_by(|&a, &b| cos[a].total_cmp(&cos[b])).unwrap();
            let argmin = (0..4).min_by(|&a, &b| s.values.get(i, a).total_cmp(&s.values.get(i, b))).unwrap();
            assert_eq!(argmax, argmin);
            assert!(s.values.row(i).iter().all(|v| (-1e-12..=2.0 + 1e-12).contains(v)));
        }
    }
}
