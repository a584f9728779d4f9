//! Accuracy, macro one-vs-rest AUC and quadratic weighted kappa, plus
//! per-fold aggregation as mean ± population std.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_ids(ids: &[usize], classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&c| c >= classes) {
        return Err(Error::Data(format!("{what} id {bad} out of range for {classes} classes")));
    }
    Ok(())
}

pub fn accuracy(targets: &[usize], preds: &[usize]) -> Result<f64> {
    if targets.len() != preds.len() {
        return Err(Error::shape("accuracy", &[targets.len()], &[preds.len()]));
    }
    if targets.is_empty() {
        return Err(Error::Data("accuracy of zero samples".into()));
    }
    let hits = targets.iter().zip(preds).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Confusion counts `O[target][pred]`.
pub fn confusion(targets: &[usize], preds: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let mut o = vec![vec![0.0; classes]; classes];
    for (&t, &p) in targets.iter().zip(preds) {
        o[t][p] += 1.0;
    }
    o
}

/// Quadratic weighted kappa, κ = 1 − Σw·O / Σw·E with w = (i−j)²/(C−1)².
///
/// When both marginals put all mass on the same class the expected
/// disagreement is zero; κ is then defined as 1 if the observed matrix is
/// concentrated there too, and an error otherwise.
pub fn qwk(targets: &[usize], preds: &[usize], classes: usize) -> Result<f64> {
    if targets.len() != preds.len() {
        return Err(Error::shape("qwk", &[targets.len()], &[preds.len()]));
    }
    if targets.is_empty() {
        return Err(Error::Data("qwk of zero samples".into()));
    }
    if classes < 2 {
        return Err(Error::Config("qwk needs at least 2 classes".into()));
    }
    check_ids(targets, classes, "target")?;
    check_ids(preds, classes, "prediction")?;
    let n = targets.len() as f64;
    let o = confusion(targets, preds, classes);
    let row: Vec<f64> = o.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..classes).map(|j| o.iter().map(|r| r[j]).sum()).collect();
    let denom_w = ((classes - 1) * (classes - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..classes {
        for j in 0..classes {
            let w = ((i as f64) - (j as f64)).powi(2) / denom_w;
            num += w * o[i][j];
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        return if num == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::DegenerateMarginals("expected disagreement is zero but observed is not".into()))
        };
    }
    Ok(1.0 - num / den)
}

/// Mann-Whitney AUC of `scores` for positives vs negatives; ties count ½.
fn rank_auc(scores: &[(f64, bool)]) -> Option<f64> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Count, for each positive, negatives strictly below plus half the tied ones.
    let mut wins = 0.0;
    let mut negatives_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let group = &sorted[i..j];
        let p = group.iter().filter(|s| s.1).count();
        let n = group.len() - p;
        wins += p as f64 * (negatives_below as f64 + 0.5 * n as f64);
        negatives_below += n;
        i = j;
    }
    Some(wins / (pos as f64 * neg as f64))
}

/// Macro one-vs-rest AUC over classes with at least one positive and one negative.
/// `probs` is row-major `[n×C]` with rows summing to 1.
pub fn auc_macro_ovr(targets: &[usize], probs: &[f64], classes: usize) -> Result<f64> {
    let n = targets.len();
    if classes == 0 || probs.len() != n * classes {
        return Err(Error::shape("auc_macro_ovr", &[n, classes], &[probs.len()]));
    }
    check_ids(targets, classes, "target")?;
    for (r, row) in probs.chunks_exact(classes).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Data(format!("probability row {r} sums to {s}")));
        }
    }
    let per_class: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let scores: Vec<(f64, bool)> = (0..n).map(|i| (probs[i * classes + c], targets[i] == c)).collect();
            rank_auc(&scores)
        })
        .collect();
    if per_class.is_empty() {
        return Err(Error::Data("no class has both positive and negative samples".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Metrics of one validation fold. AUC is absent when no class is scorable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub qwk: f64,
}

impl FoldMetrics {
    pub fn compute(targets: &[usize], preds: &[usize], probs: &[f64], classes: usize) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(targets, preds)?,
            auc: auc_macro_ovr(targets, probs, classes).ok(),
            qwk: qwk(targets, preds, classes)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub folds: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
    pub std: FoldMetrics,
    /// How multiclass AUC is computed.
    pub auc_kind: String,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population std of each metric over folds.
pub fn aggregate_folds(method: &str, folds: &[FoldMetrics]) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(Error::Data("no folds to aggregate".into()));
    }
    let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let kappa: Vec<f64> = folds.iter().map(|f| f.qwk).collect();
    let auc: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
    let (acc_m, acc_s) = mean_std(&acc);
    let (qwk_m, qwk_s) = mean_std(&kappa);
    let (auc_m, auc_s) = if auc.is_empty() { (None, None) } else {
        let (m, s) = mean_std(&auc);
        (Some(m), Some(s))
    };
    Ok(MetricsReport {
        method: method.to_string(),
        folds: folds.to_vec(),
        mean: FoldMetrics { accuracy: acc_m, auc: auc_m, qwk: qwk_m },
        std: FoldMetrics { accuracy: acc_s, auc: auc_s, qwk: qwk_s },
        auc_kind: "macro_one_vs_rest".into(),
    })
}

impl MetricsReport {
    pub fn csv_header() -> [&'static str; 4] {
        ["method", "accuracy", "auc", "qwk"]
    }

    /// One results-table row with each metric as `mean±std`.
    pub fn csv_row(&self) -> [String; 4] {
        let cell = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.3}±{s:.3}"),
            _ => "-".to_string(),
        };
        [
            self.method.clone(),
            cell(Some(self.mean.accuracy), Some(self.std.accuracy)),
            cell(self.mean.auc, self.std.auc),
            cell(Some(self.mean.qwk), Some(self.std.qwk)),
        ]
    }
}
