//! Training records and their CSV serialization.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// One optimizer step's worth of telemetry. `diag` carries per-layer
/// diagnostics as name/value pairs; every record of a run must use the same
/// names in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    /// Milliseconds spent on this step. Written as 0 unless timing was
    /// explicitly enabled, keeping run output byte-reproducible.
    pub wall_ms: u64,
    pub diag: Vec<(String, f64)>,
}

impl TrainRecord {
    pub fn new(step: u64, epoch: u64, loss: f64) -> Self {
        TrainRecord {
            step,
            epoch,
            loss,
            wall_ms: 0,
            diag: Vec::new(),
        }
    }
}

/// Renders records as CSV with a `step,epoch,loss,wall_ms,...` header. The
/// diagnostic columns come from the first record; all records must agree.
pub fn records_to_csv(records: &[TrainRecord]) -> Result<String> {
    let mut out = String::new();
    let diag_names: Vec<&str> = records
        .first()
        .map(|r| r.diag.iter().map(|(n, _)| n.as_str()).collect())
        .unwrap_or_default();
    out.push_str("step,epoch,loss,wall_ms");
    for name in &diag_names {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::Format(format!(
                "diagnostic name {name:?} not CSV-safe"
            )));
        }
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in records {
        if r.diag.len() != diag_names.len()
            || r.diag
                .iter()
                .zip(&diag_names)
                .any(|((n, _), want)| n != want)
        {
            return Err(Error::Format(format!(
                "record at step {} has diagnostics inconsistent with the header",
                r.step
            )));
        }
        write!(out, "{},{},{},{}", r.step, r.epoch, r.loss, r.wall_ms).expect("string write");
        for (_, v) in &r.diag {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
    std::fs::write(path, records_to_csv(records)?)?;
    Ok(())
}

/// Mean loss over the records of the last epoch present; the headline
/// number of a finished run.
pub fn final_epoch_loss(records: &[TrainRecord]) -> Option<f64> {
    let last = records.last()?.epoch;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in records.iter().rev().take_while(|r| r.epoch == last) {
        sum += r.loss;
        count += 1;
    }
    Some(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, loss: f64) -> TrainRecord {
        TrainRecord {
            step,
            epoch: step / 2,
            loss,
            wall_ms: 0,
            diag: vec![("fc1.gnorm".into(), 0.5), ("fc1.dead".into(), 0.0)],
        }
    }

    #[test]
    fn header_and_rows() {
        let csv = records_to_csv(&[rec(0, 2.40625), rec(1, 1.5)]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,epoch,loss,wall_ms,fc1.gnorm,fc1.dead"
        );
        assert_eq!(lines.next().unwrap(), "0,0,2.40625,0,0.5,0");
        assert_eq!(lines.next().unwrap(), "1,0,1.5,0,0.5,0");
        assert!(lines.next().is_none());
    }

    #[test]
    fn serialization_is_deterministic() {
        let records = vec![rec(0, 1.0 / 3.0), rec(1, std::f64::consts::PI)];
        let a = records_to_csv(&records).unwrap();
        let b = records_to_csv(&records).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("0.3333333333333333"));
    }

    #[test]
    fn inconsistent_diagnostics_are_rejected() {
        let mut r1 = rec(0, 1.0);
        r1.diag.pop();
        assert!(records_to_csv(&[rec(0, 1.0), r1]).is_err());
    }
}
