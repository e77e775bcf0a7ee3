//! Pieces shared by the pre-training and fine-tuning loops.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{fmt_metric, MetricReport};
use crate::tensor::{AdamState, ParamStore, Real, Tape, Var};

/// Backward pass, one Adam update, then gradient reset and commit of the
/// running statistics staged during the forward pass.
pub fn optimizer_step<T: Real>(
    tape: &mut Tape<T>,
    loss: Var,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
) -> Result<()> {
    tape.backward(loss, store)?;
    adam.step(store)?;
    store.zero_grad();
    tape.commit_buffers(store);
    Ok(())
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metrics: MetricReport,
}

pub const LOG_HEADER: [&str; 9] = ["epoch", "split", "loss", "acc", "auroc", "f1", "prec", "recall", "ap"];

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    w.write_record(LOG_HEADER)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.split.clone(), fmt_metric(Some(r.loss))];
        rec.extend(r.metrics.csv_cells());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean of per-batch losses weighted by batch size.
#[derive(Debug, Default)]
pub(crate) struct LossMeter {
    total: f64,
    count: usize,
}

impl LossMeter {
    pub(crate) fn add(&mut self, batch_mean: f64, n: usize) {
        self.total += batch_mean * n as f64;
        self.count += n;
    }

    pub(crate) fn mean(&self) -> f64 {
        self.total / self.count.max(1) as f64
    }
}
