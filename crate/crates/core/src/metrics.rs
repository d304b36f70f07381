//! Change-detection metrics from exact confusion counts. Positive = changed.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::raster::ChangeMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &ChangeMask, gt: &ChangeMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn four_places<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.4}"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerImage {
    pub id: String,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "four_places")]
    pub precision: f64,
    #[serde(serialize_with = "four_places")]
    pub recall: f64,
    #[serde(serialize_with = "four_places")]
    pub f1: f64,
    #[serde(serialize_with = "four_places")]
    pub iou: f64,
    #[serde(serialize_with = "four_places")]
    pub oa: f64,
    pub counts: ConfusionCounts,
    /// Names of ratios whose denominator was zero and were set to 0.
    pub degenerate: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<PerImage>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}

pub fn metrics(c: ConfusionCounts) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Invalid("no pixels evaluated".into()));
    }
    let mut degenerate = Vec::new();
    let mut ratio = |name: &'static str, num: f64, den: f64| {
        if den == 0.0 {
            degenerate.push(name);
            0.0
        } else {
            num / den
        }
    };
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    // 2PR/(P+R) written in counts so it stays exact when P and R are.
    let f1 = ratio("f1", 2.0 * tp, 2.0 * tp + fp + fn_);
    let iou = ratio("iou", tp, tp + fp + fn_);
    let oa = (tp + tn) / total as f64;
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        iou,
        oa,
        counts: c,
        degenerate,
        per_image: None,
    })
}

/// Micro average: counts are summed and the metrics recomputed.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Invalid("nothing to aggregate".into()));
    }
    metrics(reports.iter().map(|r| r.counts).sum())
}
