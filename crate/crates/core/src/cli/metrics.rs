//! Per-epoch metrics CSV.
//!
//! Columns, in this order: `epoch, phase, ff, lr, train_loss, train_acc,
//! val_loss, val_acc, wall_time_s`. In deterministic mode `wall_time_s` is
//! written as 0 so that reruns are byte-identical; measured times then go to
//! a separate `timing.csv` (`epoch, wall_time_s`).

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpr::EpochRecord;

pub const METRICS_COLUMNS: [&str; 9] = [
    "epoch",
    "phase",
    "ff",
    "lr",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "wall_time_s",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub phase: String,
    pub ff: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub fn from_record(r: &EpochRecord) -> Self {
        MetricsRow {
            epoch: r.epoch,
            phase: r.phase.to_string(),
            ff: r.ff,
            lr: r.lr,
            train_loss: r.train_loss,
            train_acc: r.train_acc,
            val_loss: r.val_loss,
            val_acc: r.val_acc,
            wall_time_s: r.wall_time_s,
        }
    }
}

#[derive(Serialize)]
struct TimingRow {
    epoch: u64,
    wall_time_s: f64,
}

pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    timing: Option<csv::Writer<File>>,
}

impl MetricsWriter {
    /// Creates `metrics.csv` (and `timing.csv` when deterministic) in `dir`.
    pub fn create(dir: &Path, deterministic: bool) -> Result<Self> {
        let open = |name: &str| {
            let path = dir.join(name);
            File::create(&path).map_err(|e| Error::io(&path, e))
        };
        let mut metrics = csv::WriterBuilder::new().has_headers(false).from_writer(open("metrics.csv")?);
        metrics.write_record(METRICS_COLUMNS)?;
        metrics.flush().map_err(|e| Error::io(dir, e))?;
        let timing = if deterministic {
            Some(csv::Writer::from_writer(open("timing.csv")?))
        } else {
            None
        };
        Ok(MetricsWriter { metrics, timing })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let mut row = row.clone();
        if let Some(t) = &mut self.timing {
            t.serialize(TimingRow {
                epoch: row.epoch,
                wall_time_s: row.wall_time_s,
            })?;
            t.flush().map_err(|e| Error::io("timing.csv", e))?;
            row.wall_time_s = 0.0;
        }
        self.metrics.serialize(row)?;
        self.metrics.flush().map_err(|e| Error::io("metrics.csv", e))
    }
}

/// Reads a metrics CSV, checking the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Dataset(format!("{}: unexpected header {header:?}", path.display())));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}
