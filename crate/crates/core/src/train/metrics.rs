use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::dataprep::mask::{check_same, BinaryMask};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Pixel counts with wall as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
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

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn confusion(pred: &BinaryMask, target: &BinaryMask) -> Result<ConfusionCounts> {
    check_same(pred, target)?;
    if pred.bits().is_empty() {
        return Err(Error::Data("confusion of empty masks".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.bits().iter().zip(target.bits()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Argmax over the class axis of `[N, 2, H, W]` (or `[2, H, W]`) logits;
/// ties go to background, which matches `p(wall) > 0.5`.
pub fn predict_masks(logits: &Tensor<f32>) -> Result<Vec<BinaryMask>> {
    let (n, h, w) = match *logits.shape() {
        [n, 2, h, w] => (n, h, w),
        [2, h, w] => (1, h, w),
        ref s => return Err(shape_err!("expected two-class logits [N, 2, H, W], got {s:?}")),
    };
    let d = logits.data();
    let hw = h * w;
    Ok((0..n)
        .map(|b| {
            let bits = (0..hw).map(|i| d[(b * 2 + 1) * hw + i] > d[b * 2 * hw + i]).collect();
            BinaryMask::new(h, w, bits).expect("shape from logits")
        })
        .collect())
}

/// All ratios in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub miou: f64,
    /// [background, wall]
    pub iou: [f64; 2],
    pub confusion: ConfusionCounts,
}

/// `num/den` in percent; an empty denominator means there was nothing to get
/// wrong, which scores 100.
fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        100.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// mIoU is the mean over {background, wall}.
pub fn metrics(c: &ConfusionCounts) -> Result<MetricReport> {
    if c.total() == 0 {
        return Err(Error::Data("metrics over zero pixels".into()));
    }
    let iou = [pct(c.tn, c.tn + c.fn_ + c.fp), pct(c.tp, c.tp + c.fp + c.fn_)];
    Ok(MetricReport {
        recall: pct(c.tp, c.tp + c.fn_),
        precision: pct(c.tp, c.tp + c.fp),
        accuracy: pct(c.tp + c.tn, c.total()),
        miou: (iou[0] + iou[1]) / 2.0,
        iou,
        confusion: *c,
    })
}

impl MetricReport {
    pub fn wall_iou(&self) -> f64 {
        self.iou[1]
    }
}

/// Field-wise mean of several reports (e.g. best epochs of repeated runs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub miou: f64,
    pub wall_iou: f64,
    pub runs: usize,
}

impl MeanMetrics {
    pub fn of(reports: &[MetricReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            recall: avg(|r| r.recall),
            precision: avg(|r| r.precision),
            accuracy: avg(|r| r.accuracy),
            miou: avg(|r| r.miou),
            wall_iou: avg(|r| r.iou[1]),
            runs: reports.len(),
        }
    }
}
