use std::fmt::Write as _;

use super::PointCloud;
use crate::error::{Error, Result};

/// Reads one whitespace-separated `x y z` triple per line; blank lines are skipped.
pub fn load_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("invalid number {f:?}"),
            })?;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

/// Writes coordinates with 17 significant digits, which round-trips `f64`.
pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in &cloud.points {
        let _ = writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
    }
    out
}
