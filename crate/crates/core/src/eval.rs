//! Detection metrics and resampling statistics.
//!
//! Labels are booleans with `true` meaning forged (the positive class).
//! Resampling draws every bootstrap replicate or permutation from its own
//! ChaCha stream `(seed, index)`, so results do not depend on how work is
//! split across threads.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest fraction of failed bootstrap replicates tolerated.
const MAX_BOOTSTRAP_FAILURE: f64 = 0.05;

pub(crate) fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidData("non-finite score".into()));
    }
    Ok(())
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Positions of `scores` sorted ascending, ties in input order.
fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Area under the ROC curve via the midrank Mann–Whitney statistic.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    let order = ascending_order(scores);
    // Twice the positive rank sum, kept integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_mid * pos_in_tie;
        i = j + 1;
    }
    let p = n_pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    let twice_total = 2 * p * n_neg as u128;
    // Evaluate the smaller side by division so auroc(s) + auroc(-s) == 1.
    Ok(if 2 * twice_u <= twice_total {
        twice_u as f64 / twice_total as f64
    } else {
        1.0 - (twice_total - twice_u) as f64 / twice_total as f64
    })
}

/// Precision/recall at every distinct threshold, highest threshold first.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_lengths(scores, labels)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(Error::Metric(
            "precision-recall needs at least one forged sample".into(),
        ));
    }
    let mut order = ascending_order(scores);
    order.reverse();
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(points)
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over distinct thresholds.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (recall, precision) in pr_curve(scores, labels)? {
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// ROC points `(fpr, tpr)` from `(0, 0)` through every distinct threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("ROC curve needs both classes".into()));
    }
    let mut order = ascending_order(scores);
    order.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// Smallest authentic score `t` with `#{authentic ≥ t} ≤ ⌊alpha · N⌋`; if
/// no score qualifies, a value just above the maximum.
pub(crate) fn fpr_threshold(authentic: &[f64], alpha: f64) -> Result<f64> {
    if authentic.is_empty() {
        return Err(Error::Calibration(
            "no authentic scores to calibrate on".into(),
        ));
    }
    if authentic.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidData("non-finite authentic score".into()));
    }
    let mut sorted = authentic.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let allowed = (alpha * sorted.len() as f64).floor() as usize;
    // Walk distinct values from the top while the count at or above stays
    // within budget.
    let mut best = None;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        if j > allowed {
            break;
        }
        best = Some(v);
        i = j;
    }
    Ok(best.unwrap_or_else(|| {
        let max = sorted[0];
        max + 2f64.powi(-32) * max.abs().max(1.0)
    }))
}

/// TPR at the calibrated threshold for target FPR `alpha ∈ [0, 1)`.
pub fn tpr_at_fpr(scores: &[f64], labels: &[bool], alpha: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::param(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("TPR@FPR needs both classes".into()));
    }
    let authentic: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    let t = fpr_threshold(&authentic, alpha)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| l && **s >= t)
        .count();
    Ok(hits as f64 / n_pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub r#fn: u64,
}

impl Confusion {
    pub fn from_decisions(decisions: &[bool], labels: &[bool]) -> Result<Self> {
        if decisions.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} decisions but {} labels",
                decisions.len(),
                labels.len()
            )));
        }
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            tn: 0,
            r#fn: 0,
        };
        for (&d, &l) in decisions.iter().zip(labels) {
            match (d, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.r#fn += 1,
            }
        }
        Ok(c)
    }

    /// Mean of the defined class recalls.
    pub fn balanced_accuracy(&self) -> f64 {
        let rates: Vec<f64> = [(self.tp, self.tp + self.r#fn), (self.tn, self.tn + self.fp)]
            .into_iter()
            .filter(|&(_, d)| d > 0)
            .map(|(n, d)| n as f64 / d as f64)
            .collect();
        if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    }

    /// Matthews correlation, 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (
            self.tp as f64,
            self.fp as f64,
            self.tn as f64,
            self.r#fn as f64,
        );
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / denom.sqrt()
        }
    }
}

pub fn balanced_accuracy_mcc(decisions: &[bool], labels: &[bool]) -> Result<(f64, f64)> {
    let c = Confusion::from_decisions(decisions, labels)?;
    Ok((c.balanced_accuracy(), c.mcc()))
}

/// Standardized mean difference `(mean_b − mean_a) / s_pooled` with the
/// `(n − 1)`-weighted pooled variance; 0 when that variance is 0.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric(
            "Cohen's d needs two or more values per sample".into(),
        ));
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let ss = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        (m, ss)
    };
    let (ma, ssa) = stats(a);
    let (mb, ssb) = stats(b);
    let pooled = (ssa + ssb) / (a.len() + b.len() - 2) as f64;
    if pooled <= 0.0 {
        return Ok(0.0);
    }
    Ok((mb - ma) / pooled.sqrt())
}

/// Linear-interpolated percentile of sorted data, `p ∈ [0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    /// Replicates whose metric could not be evaluated.
    pub failed: usize,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Percentile 95% interval of `metric` over `b` label-stratified
/// resamples with replacement.
pub fn bootstrap_ci<F>(
    scores: &[f64],
    labels: &[bool],
    metric: F,
    b: usize,
    seed: u64,
) -> Result<ConfidenceInterval>
where
    F: Fn(&[f64], &[bool]) -> Result<f64> + Sync,
{
    check_lengths(scores, labels)?;
    if b < 2 {
        return Err(Error::param(format!("bootstrap needs B >= 2, got {b}")));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let replicates: Vec<Option<f64>> = (0..b as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = task_rng(seed, k);
            let mut s = Vec::with_capacity(scores.len());
            let mut l = Vec::with_capacity(scores.len());
            for group in [&pos, &neg] {
                for _ in 0..group.len() {
                    let i = group[rng.random_range(0..group.len())];
                    s.push(scores[i]);
                    l.push(labels[i]);
                }
            }
            metric(&s, &l).ok()
        })
        .collect();
    let mut values: Vec<f64> = replicates.iter().flatten().copied().collect();
    let failed = b - values.len();
    if values.is_empty() || failed as f64 > MAX_BOOTSTRAP_FAILURE * b as f64 {
        return Err(Error::Metric(format!(
            "{failed} of {b} bootstrap replicates failed"
        )));
    }
    values.sort_by(f64::total_cmp);
    Ok(ConfidenceInterval {
        lo: percentile(&values, 2.5),
        hi: percentile(&values, 97.5),
        failed,
    })
}

/// Add-one permutation p-value of the observed AUROC.
pub fn permutation_test(scores: &[f64], labels: &[bool], n_perm: usize, seed: u64) -> Result<f64> {
    if n_perm < 1 {
        return Err(Error::param("permutation test needs n_perm >= 1"));
    }
    let observed = auroc(scores, labels)?;
    let exceed: usize = (0..n_perm as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = task_rng(seed, k);
            let mut l = labels.to_vec();
            l.shuffle(&mut rng);
            let a = auroc(scores, &l).expect("class counts are preserved by shuffling");
            usize::from(a >= observed - 1e-12)
        })
        .sum();
    Ok((1 + exceed) as f64 / (n_perm + 1) as f64)
}

/// p-values are shown with three decimals, matching the resolution of a
/// 200-permutation test.
pub fn format_p_value(p: f64) -> String {
    format!("{p:.3}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub auroc_ci: (f64, f64),
    pub ci_method: String,
    pub auprc: f64,
    pub tpr_at_1pct: f64,
    pub tpr_at_5pct: f64,
    /// Balanced accuracy and MCC of the decision at the 5% FPR threshold.
    pub balanced_accuracy: f64,
    pub mcc: f64,
    pub cohens_d: f64,
    pub permutation_p: f64,
    pub permutation_p_display: String,
    pub n_val: usize,
    pub n_authentic: usize,
    pub n_forged: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub n_perm: usize,
    pub seed: u64,
}

/// Full metric set for one score vector.
pub fn evaluate(
    scores: &[f64],
    labels: &[bool],
    b: usize,
    n_perm: usize,
    seed: u64,
) -> Result<MetricReport> {
    let point = auroc(scores, labels)?;
    let ci = bootstrap_ci(scores, labels, auroc, b, seed)?;
    let authentic: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    let forged: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .collect();
    let t5 = fpr_threshold(&authentic, 0.05)?;
    let decisions: Vec<bool> = scores.iter().map(|&s| s >= t5).collect();
    let (bacc, mcc) = balanced_accuracy_mcc(&decisions, labels)?;
    let d = if authentic.len() >= 2 && forged.len() >= 2 {
        cohens_d(&authentic, &forged)?
    } else {
        0.0
    };
    let p = permutation_test(scores, labels, n_perm, seed)?;
    Ok(MetricReport {
        auroc: point,
        auroc_ci: (ci.lo.min(point), ci.hi.max(point)),
        ci_method: "percentile".into(),
        auprc: auprc(scores, labels)?,
        tpr_at_1pct: tpr_at_fpr(scores, labels, 0.01)?,
        tpr_at_5pct: tpr_at_fpr(scores, labels, 0.05)?,
        balanced_accuracy: bacc,
        mcc,
        cohens_d: d,
        permutation_p: p,
        permutation_p_display: format_p_value(p),
        n_val: scores.len(),
        n_authentic: authentic.len(),
        n_forged: forged.len(),
        b,
        n_perm,
        seed,
    })
}
