use serde::{Deserialize, Serialize};

use crate::domain::Task;
use crate::error::{Error, Result};

/// How acc2 and F1 treat samples whose label is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroLabels {
    /// Drop them: polarity is negative vs positive.
    Exclude,
    /// Keep them: polarity is negative vs non-negative.
    NonNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub acc7: f64,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    /// Set when either input had zero variance, in which case `corr` is 0.
    pub corr_degenerate: bool,
    pub n: usize,
    /// Samples that entered acc2/F1.
    pub n_polar: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub acc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum EvalReport {
    Regression(RegressionReport),
    Multilabel {
        classes: Vec<ClassReport>,
        mean_acc: f64,
        mean_f1: f64,
        n: usize,
    },
}

/// Binary F1 for the positive class; 0 when there are no true or predicted positives.
pub fn binary_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Pearson correlation, or `(0, true)` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> (f64, bool) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, true);
    }
    ((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false)
}

fn class7(v: f64) -> f64 {
    v.clamp(-3.0, 3.0).round()
}

pub fn regression_report(preds: &[f64], labels: &[f64], zero: ZeroLabels) -> Result<RegressionReport> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "metrics need equal nonempty arrays, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let n = preds.len();
    let acc7 = preds.iter().zip(labels).filter(|(p, l)| class7(**p) == class7(**l)).count() as f64 / n as f64;
    let mae = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / n as f64;
    let (corr, corr_degenerate) = pearson(preds, labels);

    let (mut hits, mut n_polar, mut tp, mut fp, mut fn_) = (0, 0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        let (pred_pos, label_pos) = match zero {
            ZeroLabels::Exclude => {
                if l == 0.0 {
                    continue;
                }
                (p > 0.0, l > 0.0)
            }
            ZeroLabels::NonNegative => (p >= 0.0, l >= 0.0),
        };
        n_polar += 1;
        if pred_pos == label_pos {
            hits += 1;
        }
        match (pred_pos, label_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let acc2 = if n_polar == 0 { 0.0 } else { hits as f64 / n_polar as f64 };
    Ok(RegressionReport {
        acc7,
        acc2,
        f1: binary_f1(tp, fp, fn_),
        mae,
        corr,
        corr_degenerate,
        n,
        n_polar,
    })
}

/// Per-class accuracy and F1 from logits (positive when the logit is > 0,
/// i.e. probability > 0.5) and 0/1 labels. Both are row-major `[n × k]`.
pub fn multilabel_report(logits: &[f64], labels: &[f64], classes: usize) -> Result<EvalReport> {
    if classes == 0 || logits.is_empty() || logits.len() != labels.len() || !logits.len().is_multiple_of(classes) {
        return Err(Error::Data(format!(
            "multilabel metrics need matching [n × {classes}] arrays, got {} and {}",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() / classes;
    let reports: Vec<ClassReport> = (0..classes)
        .map(|c| {
            let (mut hits, mut tp, mut fp, mut fn_) = (0, 0, 0, 0);
            for i in 0..n {
                let pred = logits[i * classes + c] > 0.0;
                let truth = labels[i * classes + c] > 0.5;
                hits += usize::from(pred == truth);
                tp += usize::from(pred && truth);
                fp += usize::from(pred && !truth);
                fn_ += usize::from(!pred && truth);
            }
            ClassReport {
                acc: hits as f64 / n as f64,
                f1: binary_f1(tp, fp, fn_),
            }
        })
        .collect();
    let k = classes as f64;
    Ok(EvalReport::Multilabel {
        mean_acc: reports.iter().map(|r| r.acc).sum::<f64>() / k,
        mean_f1: reports.iter().map(|r| r.f1).sum::<f64>() / k,
        classes: reports,
        n,
    })
}

/// Metrics for `task` over row-major predictions and labels.
pub fn evaluate(preds: &[f64], labels: &[f64], task: Task, zero: ZeroLabels) -> Result<EvalReport> {
    match task {
        Task::Regression => regression_report(preds, labels, zero).map(EvalReport::Regression),
        Task::Multilabel { classes } => multilabel_report(preds, labels, classes),
    }
}

/// MAE of always predicting the median of `train_labels`.
pub fn median_baseline_mae(train_labels: &[f64], labels: &[f64]) -> f64 {
    let mut sorted = train_labels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    labels.iter().map(|l| (l - median).abs()).sum::<f64>() / labels.len() as f64
}
