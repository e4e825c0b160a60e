//! Per-epoch metrics log written as comma-delimited text.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{contract, Result};

pub const METRICS_HEADER: &str = "run_id,epoch,train_loss,ce_loss,kd_loss,top1,top5,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub seconds: f64,
}

/// Append-only log. Rows of one run are contiguous with increasing epochs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if last.run_id == row.run_id {
                if row.epoch <= last.epoch {
                    return Err(contract(format!(
                        "run {} epoch {} after epoch {}",
                        row.run_id, row.epoch, last.epoch
                    )));
                }
            } else if self.rows.iter().any(|r| r.run_id == row.run_id) {
                return Err(contract(format!("run {} resumed out of order", row.run_id)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = MetricsRow>) -> Result<()> {
        rows.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{},{},{:.3}",
                r.run_id,
                r.epoch,
                r.train_loss,
                r.ce_loss,
                r.kd_loss,
                opt(r.top1),
                opt(r.top5),
                r.seconds
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: &str, epoch: usize) -> MetricsRow {
        MetricsRow {
            run_id: run.into(),
            epoch,
            train_loss: 1.0,
            ce_loss: 0.5,
            kd_loss: 0.25,
            top1: Some(0.5),
            top5: None,
            seconds: 0.1,
        }
    }

    #[test]
    fn ordering_is_enforced() {
        let mut log = MetricsLog::new();
        log.push(row("aux", 1)).unwrap();
        log.push(row("aux", 2)).unwrap();
        assert!(log.push(row("aux", 2)).is_err());
        log.push(row("des", 1)).unwrap();
        assert!(log.push(row("aux", 3)).is_err());
    }

    #[test]
    fn csv_has_fixed_header() {
        let mut log = MetricsLog::new();
        log.push(row("t", 1)).unwrap();
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.next(), Some("t,1,1.000000,0.500000,0.250000,0.500000,,0.100"));
    }
}
