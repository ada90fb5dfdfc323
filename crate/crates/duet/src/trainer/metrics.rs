//! Append-only training metrics: one key-value text line per step, written
//! with shortest round-trip float formatting so identical runs produce
//! identical files.

use std::fmt;
use std::path::Path;

use crate::objectives::LossReport;
use crate::trainer::{Result, TrainError};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// Global step, 1-based.
    pub step: u64,
    /// Epoch the step belongs to, 0-based.
    pub epoch: usize,
    pub report: LossReport,
    /// EMA coefficient in effect.
    pub momentum: Scalar,
    /// Queue fill level after the step.
    pub queue_fill: usize,
    /// Key-tower layers dropped this step.
    pub dropped_layers: usize,
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        write!(
            f,
            "step {} epoch {} mlm {} matching {} contrast {} regression {} label {} \
             total {} rank_acc {} momentum {} queue {} dropped {}",
            self.step,
            self.epoch,
            r.mlm,
            r.matching,
            r.contrast,
            r.regression,
            r.label,
            r.total,
            r.positive_rank_acc,
            self.momentum,
            self.queue_fill,
            self.dropped_layers
        )
    }
}

impl MetricsRow {
    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut parts = line.split_whitespace();
        while let Some(key) = parts.next() {
            let value = parts.next().ok_or_else(|| {
                TrainError::Validation(format!("metrics line {line_no}: key {key:?} has no value"))
            })?;
            fields.insert(key.to_string(), value.to_string());
        }
        let grab = |key: &str| -> Result<Scalar> {
            fields
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| {
                    TrainError::Validation(format!("metrics line {line_no}: missing {key}"))
                })
        };
        Ok(MetricsRow {
            step: grab("step")? as u64,
            epoch: grab("epoch")? as usize,
            report: LossReport {
                mlm: grab("mlm")?,
                matching: grab("matching")?,
                contrast: grab("contrast")?,
                regression: grab("regression")?,
                label: grab("label")?,
                total: grab("total")?,
                positive_rank_acc: grab("rank_acc")?,
            },
            momentum: grab("momentum")?,
            queue_fill: grab("queue")? as usize,
            dropped_layers: grab("dropped")? as usize,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricsRow::parse(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row() -> MetricsRow {
        MetricsRow {
            step: 42,
            epoch: 3,
            report: LossReport {
                mlm: 3.0625,
                matching: 0.125,
                contrast: 5.5,
                regression: 0.0,
                label: 0.0,
                total: 8.6875,
                positive_rank_acc: 0.4375,
            },
            momentum: 0.96,
            queue_fill: 288,
            dropped_layers: 1,
        }
    }

    #[test]
    fn display_parse_roundtrip_is_exact() {
        let row = sample_row();
        let line = row.to_string();
        let back = MetricsRow::parse(&line, 1).unwrap();
        assert_eq!(row, back);
        // Non-dyadic values survive via shortest round-trip formatting.
        let mut odd = row;
        odd.report.mlm = 0.1 + 0.2;
        odd.report.total = 1.0 / 3.0;
        let back = MetricsRow::parse(&odd.to_string(), 1).unwrap();
        assert_eq!(odd, back);
    }

    #[test]
    fn missing_keys_are_named() {
        let err = MetricsRow::parse("step 1 epoch 0", 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4"), "{msg}");
        assert!(msg.contains("mlm"), "{msg}");
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.txt");
        let rows = vec![sample_row(), {
            let mut r = sample_row();
            r.step = 43;
            r
        }];
        let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
        std::fs::write(&path, text).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }
}
