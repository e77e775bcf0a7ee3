//! Classification metrics. Undefined values are `None`, never a silent 0.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("metric input contains NaN scores".into()));
    }
    Ok(())
}

/// Area under the ROC curve (Mann-Whitney U with ties counted as 1/2),
/// via average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("auROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg * tied_pos as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean precision at the rank of each positive, scores descending; equal
/// scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Undefined("average precision needs a positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdMetrics {
    pub acc: f64,
    /// `None` when nothing is predicted positive.
    pub precision: Option<f64>,
    /// `None` when there are no actual positives.
    pub recall: Option<f64>,
    /// `None` when precision or recall is undefined or both are zero.
    pub f1: Option<f64>,
}

/// Metrics of the hard decision `score >= threshold`.
pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Undefined("threshold metrics of an empty set"));
    }
    let (mut tp, mut fp, mut tn, mut fal_n) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fal_n += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fal_n);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(ThresholdMetrics {
        acc: (tp + tn) as f64 / scores.len() as f64,
        precision,
        recall,
        f1,
    })
}

/// Ranking metrics of one class in a multi-label report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub acc: Option<f64>,
    pub auroc: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ap: Option<f64>,
    pub n_samples: usize,
    pub per_class: Vec<ClassMetrics>,
    pub warnings: Vec<String>,
}

pub const THRESHOLD: f64 = 0.5;

fn defined(r: Result<f64>, what: &str, warnings: &mut Vec<String>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(msg)) => {
            warnings.push(format!("{what}: {msg}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

impl MetricReport {
    /// All six metrics of a binary scorer.
    pub fn binary(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let mut warnings = Vec::new();
        let t = threshold_metrics(scores, labels, THRESHOLD)?;
        let auroc = defined(auroc(scores, labels), "auroc", &mut warnings)?;
        let ap = defined(average_precision(scores, labels), "ap", &mut warnings)?;
        Ok(Self {
            acc: Some(t.acc),
            auroc,
            f1: t.f1,
            precision: t.precision,
            recall: t.recall,
            ap,
            n_samples: scores.len(),
            per_class: Vec::new(),
            warnings,
        })
    }

    /// Per-class auROC/AP with unweighted macro averages over the classes
    /// where each is defined. Accuracy, precision, recall and F1 are
    /// micro-averaged over all `(sample, class)` decisions.
    ///
    /// `scores` and `labels` are row-major `[n, k]`.
    pub fn multilabel(scores: &[f64], labels: &[bool], k: usize) -> Result<Self> {
        check(scores, labels)?;
        if k == 0 || !scores.len().is_multiple_of(k) {
            return Err(Error::shape("multilabel metrics", format!("{} entries for {k} classes", scores.len())));
        }
        let n = scores.len() / k;
        let mut warnings = Vec::new();
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let s: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
            let l: Vec<bool> = (0..n).map(|i| labels[i * k + c]).collect();
            per_class.push(ClassMetrics {
                class: c,
                auroc: defined(auroc(&s, &l), &format!("class {c} auroc"), &mut warnings)?,
                ap: defined(average_precision(&s, &l), &format!("class {c} ap"), &mut warnings)?,
            });
        }
        let macro_avg = |f: fn(&ClassMetrics) -> Option<f64>| {
            let vals: Vec<f64> = per_class.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let t = threshold_metrics(scores, labels, THRESHOLD)?;
        Ok(Self {
            acc: Some(t.acc),
            auroc: macro_avg(|c| c.auroc),
            f1: t.f1,
            precision: t.precision,
            recall: t.recall,
            ap: macro_avg(|c| c.ap),
            n_samples: n,
            per_class,
            warnings,
        })
    }

    /// `acc,auroc,f1,prec,recall,ap` cells; undefined values print as `NA`.
    pub fn csv_cells(&self) -> [String; 6] {
        [self.acc, self.auroc, self.f1, self.precision, self.recall, self.ap].map(fmt_metric)
    }
}

pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}
