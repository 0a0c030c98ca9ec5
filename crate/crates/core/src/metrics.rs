//! Evaluation metrics: ROC-AUC (binary and macro one-vs-rest), balanced
//! accuracy, weighted F1, per-class breakdowns, Jensen-Shannon divergence
//! between score distributions, and Spearman rank correlation.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Binary ROC-AUC via the Mann-Whitney U statistic with average ranks for
/// ties. `labels` are 0/1; `scores` are the positive-class scores.
pub fn roc_auc(labels: &[usize], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::shape(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("roc_auc on empty input".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_auc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "roc_auc needs both classes present".into(),
        ));
    }
    let ranks = average_ranks(scores);
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// 1-based average ranks (ties share the mean of their positions).
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Macro one-vs-rest multiclass AUC from per-class probability columns.
/// Classes absent from `labels` are skipped; at least two must be present.
pub fn multiclass_auc(labels: &[usize], probs: &[Vec<f64>], n_classes: usize) -> Result<f64> {
    if labels.len() != probs.len() {
        return Err(Error::shape(format!(
            "{} labels vs {} probability rows",
            labels.len(),
            probs.len()
        )));
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes {
        let bin: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
        if bin.iter().all(|&b| b == 0) || bin.iter().all(|&b| b == 1) {
            continue;
        }
        let col: Vec<f64> = probs
            .iter()
            .map(|row| {
                row.get(c).copied().ok_or_else(|| {
                    Error::shape(format!("probability row shorter than {n_classes}"))
                })
            })
            .collect::<Result<_>>()?;
        sum += roc_auc(&bin, &col)?;
        counted += 1;
    }
    if counted < 2 && n_classes > 2 {
        return Err(Error::UndefinedMetric(
            "macro AUC needs at least two classes present".into(),
        ));
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(
            "macro AUC needs at least two classes present".into(),
        ));
    }
    Ok(sum / counted as f64)
}

/// Mean per-class recall over classes that appear in the labels.
pub fn balanced_accuracy(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<f64> {
    let cm = confusion_matrix(labels, preds, n_classes)?;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        let support: usize = cm[c].iter().sum();
        if support == 0 {
            continue;
        }
        sum += cm[c][c] as f64 / support as f64;
        present += 1;
    }
    if present == 0 {
        return Err(Error::UndefinedMetric("no labels present".into()));
    }
    Ok(sum / present as f64)
}

/// rows = true class, cols = predicted class.
pub fn confusion_matrix(
    labels: &[usize],
    preds: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if labels.len() != preds.len() {
        return Err(Error::shape(format!(
            "{} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("confusion matrix on empty input".into()));
    }
    let mut cm = vec![vec![0usize; n_classes]; n_classes];
    for (&l, &p) in labels.iter().zip(preds) {
        if l >= n_classes || p >= n_classes {
            return Err(Error::Index(format!(
                "label {l} / prediction {p} out of range for {n_classes} classes"
            )));
        }
        cm[l][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-class precision/recall/F1 with the 0-when-undefined convention.
pub fn class_reports(cm: &[Vec<usize>]) -> Vec<ClassReport> {
    let n = cm.len();
    (0..n)
        .map(|c| {
            let tp = cm[c][c] as f64;
            let support: usize = cm[c].iter().sum();
            let predicted: usize = (0..n).map(|r| cm[r][c]).sum();
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassReport {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<f64> {
    let cm = confusion_matrix(labels, preds, n_classes)?;
    let reports = class_reports(&cm);
    let total: usize = reports.iter().map(|r| r.support).sum();
    Ok(reports
        .iter()
        .map(|r| r.f1 * r.support as f64 / total as f64)
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub auc: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassReport>,
    pub confusion: Vec<Vec<usize>>,
}

/// All classification metrics from labels, hard predictions, and per-class
/// probabilities. Binary AUC uses the class-1 column.
pub fn evaluate(
    labels: &[usize],
    preds: &[usize],
    probs: &[Vec<f64>],
    n_classes: usize,
) -> Result<EvalResult> {
    let cm = confusion_matrix(labels, preds, n_classes)?;
    let auc = if n_classes == 2 {
        let col: Vec<f64> = probs.iter().map(|row| row[1]).collect();
        roc_auc(labels, &col)?
    } else {
        multiclass_auc(labels, probs, n_classes)?
    };
    let correct = labels.iter().zip(preds).filter(|(l, p)| l == p).count();
    Ok(EvalResult {
        accuracy: correct as f64 / labels.len() as f64,
        balanced_accuracy: balanced_accuracy(labels, preds, n_classes)?,
        auc,
        weighted_f1: weighted_f1(labels, preds, n_classes)?,
        per_class: class_reports(&cm),
        confusion: cm,
    })
}

pub const JSD_BINS: usize = 128;
pub const JSD_SMOOTHING: f64 = 1e-12;

/// Base-2 Jensen-Shannon divergence between two score samples, estimated on a
/// shared `bins`-bin histogram over `range` with additive smoothing. Bounded
/// in [0, 1]; 0 for identical samples.
pub fn js_divergence(a: &[f64], b: &[f64], bins: usize, range: (f64, f64)) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("js_divergence on empty sample".into()));
    }
    if bins < 2 {
        return Err(Error::config("js_divergence needs at least 2 bins"));
    }
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(Error::Range(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let p = histogram(a, bins, lo, hi);
    let q = histogram(b, bins, lo, hi);
    let mut jsd = 0.0;
    for i in 0..bins {
        let pi = p[i] + JSD_SMOOTHING;
        let qi = q[i] + JSD_SMOOTHING;
        let mi = 0.5 * (pi + qi);
        jsd += 0.5 * pi * (pi / mi).log2() + 0.5 * qi * (qi / mi).log2();
    }
    Ok(jsd.clamp(0.0, 1.0))
}

/// Normalized histogram; out-of-range values clamp to the edge bins.
fn histogram(xs: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &x in xs {
        let i = (((x - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        h[i] += 1.0;
    }
    let n = xs.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "spearman over {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Degenerate(
            "spearman needs at least 2 values".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate(
            "correlation undefined for constant input".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// One row per fold plus a summary row in `mean ± std` form (population std
/// over folds).
pub fn write_kfold_csv(path: impl AsRef<Path>, folds: &[EvalResult]) -> Result<()> {
    if folds.is_empty() {
        return Err(Error::EmptyInput("no folds to write".into()));
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "fold,accuracy,balanced_accuracy,auc,weighted_f1")?;
    for (i, r) in folds.iter().enumerate() {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6}",
            i, r.accuracy, r.balanced_accuracy, r.auc, r.weighted_f1
        )?;
    }
    let cols: [fn(&EvalResult) -> f64; 4] = [
        |r| r.accuracy,
        |r| r.balanced_accuracy,
        |r| r.auc,
        |r| r.weighted_f1,
    ];
    let summary: Vec<String> = cols
        .iter()
        .map(|get| {
            let vals: Vec<f64> = folds.iter().map(|r| get(r)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            format!("{:.4} ± {:.4}", mean, var.sqrt())
        })
        .collect();
    writeln!(f, "summary,{}", summary.join(","))?;
    Ok(())
}
