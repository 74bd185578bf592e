//! Threshold-free separability metrics and rank correlation.
//!
//! In-distribution scores are the positive class throughout: a good measure
//! scores them higher than out-of-distribution samples.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidence scores of in-distribution (positive) and OoD (negative) samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub iod: Vec<f64>,
    pub ood: Vec<f64>,
}

impl ScorePair {
    pub fn new(iod: Vec<f64>, ood: Vec<f64>) -> Result<Self> {
        let pair = Self { iod, ood };
        pair.check()?;
        Ok(pair)
    }

    fn check(&self) -> Result<()> {
        if self.iod.is_empty() || self.ood.is_empty() {
            return Err(Error::dataset("both score lists must be nonempty"));
        }
        if self.iod.iter().chain(&self.ood).any(|v| v.is_nan()) {
            return Err(Error::dataset("NaN score"));
        }
        Ok(())
    }

    /// Operating points at every distinct score, highest threshold first:
    /// `(tp, fp)` counts of samples with score `>= t`.
    fn sweep(&self) -> Vec<(usize, usize)> {
        let mut all: Vec<(f64, bool)> = self
            .iod
            .iter()
            .map(|&v| (v, true))
            .chain(self.ood.iter().map(|&v| (v, false)))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        let mut i = 0;
        while i < all.len() {
            let t = all[i].0;
            while i < all.len() && all[i].0 == t {
                if all[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push((tp, fp));
        }
        points
    }
}

/// Area under the ROC curve: `P(iod > ood) + ½·P(iod = ood)`.
pub fn auroc(pair: &ScorePair) -> Result<f64> {
    pair.check()?;
    // trapezoidal integration of the grouped sweep equals the Mann–Whitney form
    let (p, n) = (pair.iod.len() as f64, pair.ood.len() as f64);
    let mut area = 0.0;
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    for (tp, fp) in pair.sweep() {
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(area / (p * n))
}

/// Step-wise area under precision–recall: `Σ ΔRecall · Precision` over the
/// descending threshold sweep, ties grouped at one threshold.
pub fn aupr(pair: &ScorePair) -> Result<f64> {
    pair.check()?;
    let p = pair.iod.len() as f64;
    let mut area = 0.0;
    let mut prev_tp = 0usize;
    for (tp, fp) in pair.sweep() {
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 / p * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(area)
}

/// False-positive rate at the largest observed threshold whose true-positive
/// rate reaches `target_tpr`.
pub fn fpr_at_tpr(pair: &ScorePair, target_tpr: f64) -> Result<f64> {
    pair.check()?;
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::Config(format!(
            "target TPR {target_tpr} not in (0, 1]"
        )));
    }
    let (p, n) = (pair.iod.len() as f64, pair.ood.len() as f64);
    pair.sweep()
        .into_iter()
        .find(|&(tp, _)| tp as f64 / p >= target_tpr)
        .map(|(_, fp)| fp as f64 / n)
        .ok_or_else(|| Error::dataset("target TPR unreachable"))
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DegenerateInput(format!(
            "lengths {} and {} differ",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::DegenerateInput("need at least 3 points".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::DegenerateInput("NaN value".into()));
    }
    if xs.iter().all(|&v| v == xs[0]) || ys.iter().all(|&v| v == ys[0]) {
        return Err(Error::DegenerateInput(
            "constant input has no ranking".into(),
        ));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// AUROC, AUPR and FPR at 80% TPR for one score pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr80: f64,
}

impl EvalReport {
    pub fn compute(pair: &ScorePair) -> Result<Self> {
        Ok(Self {
            auroc: auroc(pair)?,
            aupr: aupr(pair)?,
            fpr80: fpr_at_tpr(pair, 0.8)?,
        })
    }

    pub fn metrics(&self) -> [(&'static str, f64); 3] {
        [
            ("auroc", self.auroc),
            ("aupr", self.aupr),
            ("fpr80", self.fpr80),
        ]
    }
}

/// Mean and unbiased standard deviation over repeated runs. `std` is `None`
/// for a single run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::dataset("nothing to summarize"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(Summary { mean, std })
}

/// Scores both sets with `measure` and computes the three metrics.
pub fn cross_dataset_eval<T, F>(measure: F, iod: &[T], ood: &[T]) -> Result<EvalReport>
where
    F: Fn(&T) -> Result<f64>,
{
    let iod = iod.iter().map(&measure).collect::<Result<Vec<_>>>()?;
    let ood = ood.iter().map(&measure).collect::<Result<Vec<_>>>()?;
    EvalReport::compute(&ScorePair::new(iod, ood)?)
}
