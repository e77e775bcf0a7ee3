use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use serde::Serialize;

use super::config::{RunConfig, TaskKind};
use super::data::Splits;
use super::run::run_finetune;
use crate::error::{Error, Result};
use crate::metrics::{fmt_metric, MetricReport};
use crate::seed;
use crate::tensor::Real;
use crate::weights::WeightFile;

pub const RESULTS_HEADER: [&str; 10] = ["task", "init", "fraction", "seed", "acc", "auroc", "f1", "prec", "recall", "ap"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub task: String,
    pub init: String,
    pub fraction: f64,
    pub seed: u64,
    pub report: MetricReport,
}

impl SweepRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.task.clone(), self.init.clone(), format!("{}", self.fraction), self.seed.to_string()];
        r.extend(self.report.csv_cells());
        r
    }
}

/// Seed of one sweep cell; independent of which other cells run.
pub fn cell_seed(base: u64, fraction: f64, seed: u64, init: &str) -> u64 {
    seed::derive(&[base, fraction.to_bits(), seed, seed::label(init)])
}

pub fn task_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Match => "match",
        TaskKind::Binary => "binary",
        TaskKind::Multilabel => "multilabel",
    }
}

/// One fine-tune + test evaluation.
pub fn run_cell<T: Real>(
    config: &RunConfig,
    splits: &Splits,
    pretrained: Option<&WeightFile>,
    init: &str,
    fraction: f64,
    seed: u64,
) -> Result<SweepRow> {
    let weights = match init {
        "scratch" => None,
        "pretrained" => Some(pretrained.ok_or_else(|| Error::Config {
            key: "init".into(),
            msg: "the pretrained sweep arm needs a matcher weight file".into(),
        })?),
        other => {
            return Err(Error::Config {
                key: "sweep.inits".into(),
                msg: format!("unknown init `{other}`"),
            })
        }
    };
    let s = cell_seed(config.seed, fraction, seed, init);
    let out = run_finetune::<T>(config, splits, weights, fraction, s)?;
    info!(
        "cell {init} fraction {fraction} seed {seed}: {} train items, acc {}",
        out.train_size,
        fmt_metric(out.test.acc)
    );
    Ok(SweepRow {
        task: task_name(config.task).into(),
        init: init.into(),
        fraction,
        seed,
        report: out.test,
    })
}

/// Every `(fraction, seed, init)` cell of the configured grid.
pub fn run_sweep<T: Real>(config: &RunConfig, splits: &Splits, pretrained: Option<&WeightFile>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &fraction in &config.sweep.fractions {
        for &seed in &config.sweep.seeds {
            for init in &config.sweep.inits {
                rows.push(run_cell::<T>(config, splits, pretrained, init, fraction, seed)?);
            }
        }
    }
    Ok(rows)
}

pub fn write_results(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMean {
    pub init: String,
    pub fraction: f64,
    pub runs: usize,
    pub acc: Option<f64>,
    pub auroc: Option<f64>,
    pub f1: Option<f64>,
    pub prec: Option<f64>,
    pub recall: Option<f64>,
    pub ap: Option<f64>,
}

/// Smallest pretrained fraction whose mean accuracy reaches the best
/// scratch mean accuracy, and the relative label saving.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelReduction {
    pub best_scratch_fraction: f64,
    pub best_scratch_acc: f64,
    pub pretrained_fraction: f64,
    pub pretrained_acc: f64,
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub means: Vec<CellMean>,
    pub label_reduction: Option<LabelReduction>,
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(rows: &[SweepRow]) -> Summary {
    let mut groups: BTreeMap<(String, u64), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.init.clone(), r.fraction.to_bits())).or_default().push(r);
    }
    let mut means: Vec<CellMean> = groups
        .into_iter()
        .map(|((init, bits), rs)| CellMean {
            init,
            fraction: f64::from_bits(bits),
            runs: rs.len(),
            acc: mean(rs.iter().map(|r| r.report.acc)),
            auroc: mean(rs.iter().map(|r| r.report.auroc)),
            f1: mean(rs.iter().map(|r| r.report.f1)),
            prec: mean(rs.iter().map(|r| r.report.precision)),
            recall: mean(rs.iter().map(|r| r.report.recall)),
            ap: mean(rs.iter().map(|r| r.report.ap)),
        })
        .collect();
    means.sort_by(|a, b| a.init.cmp(&b.init).then(a.fraction.total_cmp(&b.fraction)));
    Summary {
        label_reduction: label_reduction(&means),
        means,
    }
}

fn label_reduction(means: &[CellMean]) -> Option<LabelReduction> {
    let arm = |name: &str| -> Vec<(f64, f64)> {
        means
            .iter()
            .filter(|m| m.init == name)
            .filter_map(|m| m.acc.map(|a| (m.fraction, a)))
            .collect()
    };
    // Best accuracy; among equals the smallest fraction (means are sorted).
    let (f_s, a_s) = arm("scratch")
        .into_iter()
        .fold(None::<(f64, f64)>, |best, (f, a)| match best {
            Some((_, ba)) if ba >= a => best,
            _ => Some((f, a)),
        })?;
    let (f_p, a_p) = arm("pretrained").into_iter().find(|&(_, a)| a >= a_s)?;
    Some(LabelReduction {
        best_scratch_fraction: f_s,
        best_scratch_acc: a_s,
        pretrained_fraction: f_p,
        pretrained_acc: a_p,
        reduction: (f_s - f_p) / f_s,
    })
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(init: &str, fraction: f64, seed: u64, acc: f64) -> SweepRow {
        SweepRow {
            task: "binary".into(),
            init: init.into(),
            fraction,
            seed,
            report: MetricReport {
                acc: Some(acc),
                auroc: None,
                f1: None,
                precision: None,
                recall: None,
                ap: None,
                n_samples: 10,
                per_class: Vec::new(),
                warnings: Vec::new(),
            },
        }
    }

    #[test]
    fn reduction_uses_best_scratch_fraction() {
        let rows = vec![
            row("scratch", 0.05, 0, 0.70),
            row("scratch", 0.3, 0, 0.90),
            row("scratch", 1.0, 0, 0.89),
            row("pretrained", 0.005, 0, 0.80),
            row("pretrained", 0.05, 0, 0.91),
            row("pretrained", 0.3, 0, 0.95),
        ];
        let r = summarize(&rows).label_reduction.unwrap();
        assert_eq!(r.best_scratch_fraction, 0.3);
        assert_eq!(r.pretrained_fraction, 0.05);
        assert!((r.reduction - (0.3 - 0.05) / 0.3).abs() < 1e-15);
    }

    #[test]
    fn no_reduction_without_a_qualifying_fraction() {
        let rows = vec![row("scratch", 1.0, 0, 0.9), row("pretrained", 0.1, 0, 0.8)];
        assert_eq!(summarize(&rows).label_reduction, None);
    }

    #[test]
    fn means_average_seeds() {
        let rows = vec![row("scratch", 0.1, 0, 0.6), row("scratch", 0.1, 1, 0.8)];
        let s = summarize(&rows);
        assert_eq!(s.means.len(), 1);
        assert_eq!(s.means[0].runs, 2);
        assert!((s.means[0].acc.unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn cell_seeds_differ_per_coordinate() {
        let base = cell_seed(0, 0.05, 1, "scratch");
        assert_ne!(base, cell_seed(0, 0.1, 1, "scratch"));
        assert_ne!(base, cell_seed(0, 0.05, 2, "scratch"));
        assert_ne!(base, cell_seed(0, 0.05, 1, "pretrained"));
        assert_ne!(base, cell_seed(1, 0.05, 1, "scratch"));
    }
}
