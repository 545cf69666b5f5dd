use serde::{Deserialize, Serialize};

use crate::dataprep::image::Sample;
use crate::error::{invalid, Result};
use crate::losses::LossSpec;
use crate::train::metrics::MeanMetrics;
use crate::train::trainer::{train, EpochRecord, TrainConfig};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub beta: f64,
    pub metrics: MeanMetrics,
}

/// Direction check of precision and recall against the false-positive weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub precision_rho: f64,
    pub recall_rho: f64,
    /// Adjacent steps where precision fell as the weight rose.
    pub precision_inversions: usize,
    /// Adjacent steps where recall rose as the weight rose.
    pub recall_inversions: usize,
}

impl Trend {
    pub fn of(rows: &[AblationRow]) -> Self {
        let mut rows = rows.to_vec();
        rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        let alpha: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
        let p: Vec<f64> = rows.iter().map(|r| r.metrics.precision).collect();
        let r: Vec<f64> = rows.iter().map(|r| r.metrics.recall).collect();
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        Self {
            precision_rho: spearman(&alpha, &p),
            recall_rho: spearman(&alpha, &r),
            precision_inversions: adjacent_inversions(&p),
            recall_inversions: adjacent_inversions(&neg_r),
        }
    }

    /// Precision up, recall down, each with at most one adjacent step out of line.
    pub fn holds(&self) -> bool {
        self.precision_rho > 0.0 && self.recall_rho < 0.0 && self.precision_inversions <= 1 && self.recall_inversions <= 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub trend: Trend,
}

/// Ranks starting at 1; ties share the average of the ranks they span.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of average ranks. Zero when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Number of adjacent pairs that decrease.
pub fn adjacent_inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] < w[0]).count()
}

/// One training per weight with `beta = 1 - alpha`; data split and seeds are
/// shared so only the loss differs between rows.
pub fn ablate_tversky(
    alphas: &[f64],
    cfg: &TrainConfig,
    data: &[Sample],
    observer: &mut dyn FnMut(f64, &EpochRecord),
) -> Result<AblationResult> {
    if alphas.is_empty() {
        return Err(invalid!("ablation needs at least one alpha"));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let beta = 1.0 - alpha;
        let run_cfg = TrainConfig { loss: LossSpec::tversky(alpha, beta), ..cfg.clone() };
        run_cfg.loss.validate()?;
        let out = train(&run_cfg, data, &mut |rec| observer(alpha, rec))?;
        rows.push(AblationRow { alpha, beta, metrics: out.mean });
    }
    let trend = Trend::of(&rows);
    Ok(AblationResult { rows, trend })
}
