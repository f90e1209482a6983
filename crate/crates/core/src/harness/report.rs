//! CSV tables written by `run` and `sweep`.
//!
//! Numbers use Rust's shortest round-trip formatting, so a value read back
//! from a file is bit-identical to the one written.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{delta_forgetting, Metrics};
use crate::training::{EpochLog, Mode};

pub const REPORT_HEADER: [&str; 6] = ["mode", "seed", "acc_old_star", "acc_old", "acc_new", "delta"];
pub const LOG_HEADER: [&str; 6] = ["epoch", "loss_total", "loss_ce", "loss_kd", "acc_old", "acc_new"];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Per-epoch log of one training stage of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub mode: Mode,
    pub seed: u64,
    pub stage: u8,
    pub epochs: Vec<EpochLog>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

/// Fails unless `delta` is exactly what the accuracies give.
pub fn check_consistent(m: &Metrics) -> Result<()> {
    let expect = delta_forgetting(m.acc_old_star, m.acc_old)?;
    if expect.to_bits() != m.delta.to_bits() {
        return Err(Error::Contract(format!(
            "reported delta {} does not match accuracies ({} -> {})",
            m.delta, m.acc_old_star, m.acc_old
        )));
    }
    Ok(())
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        check_consistent(&r.metrics)?;
        let m = &r.metrics;
        w.write_record([
            r.mode.to_string(),
            r.seed.to_string(),
            m.acc_old_star.to_string(),
            m.acc_old.to_string(),
            m.acc_new.to_string(),
            m.delta.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Parse {
            line: 0,
            message: format!("bad {what} {field:?}"),
        })
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != REPORT_HEADER.len() {
            return Err(Error::Parse {
                line: out.len() + 2,
                message: format!("expected {} fields", REPORT_HEADER.len()),
            });
        }
        let metrics = Metrics {
            acc_old_star: parse(&rec[2], "accuracy")?,
            acc_old: parse(&rec[3], "accuracy")?,
            acc_new: parse(&rec[4], "accuracy")?,
            delta: parse(&rec[5], "delta")?,
        };
        out.push(ReportRow {
            mode: rec[0].parse()?,
            seed: parse(&rec[1], "seed")?,
            metrics,
        });
    }
    Ok(out)
}

fn log_record(e: &EpochLog) -> [String; 6] {
    [
        e.epoch.to_string(),
        e.loss_total.to_string(),
        e.loss_ce.to_string(),
        e.loss_kd.to_string(),
        opt(e.acc_old),
        opt(e.acc_new),
    ]
}

/// `epoch,loss_total,loss_ce,loss_kd,acc_old,acc_new`; unevaluated
/// accuracies are empty.
pub fn write_stage_log(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(LOG_HEADER)?;
    for e in epochs {
        w.write_record(log_record(e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_stage_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let acc = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                parse(&rec[i], "accuracy").map(Some)
            }
        };
        out.push(EpochLog {
            epoch: parse(&rec[0], "epoch")?,
            loss_total: parse(&rec[1], "loss")?,
            loss_ce: parse(&rec[2], "loss")?,
            loss_kd: parse(&rec[3], "loss")?,
            acc_old: acc(4)?,
            acc_new: acc(5)?,
        });
    }
    Ok(out)
}

/// All stage logs in one long table: `mode,seed,stage` then the log columns.
pub fn write_curves(path: &Path, curves: &[Curve]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["mode", "seed", "stage"];
    header.extend(LOG_HEADER);
    w.write_record(&header)?;
    for c in curves {
        for e in &c.epochs {
            let mut rec = vec![c.mode.to_string(), c.seed.to_string(), c.stage.to_string()];
            rec.extend(log_record(e));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
