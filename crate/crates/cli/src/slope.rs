//! `cvp slope`: log-log slope of two CSV columns.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cvp_core::fit::{fit_loglog, LogLogFit};

pub const MIN_ROWS: usize = 4;

pub fn slope_from_csv(path: &Path, x: &str, y: &str) -> Result<LogLogFit> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).with_context(|| format!("column {name:?} not found in {}", path.display()))
    };
    let (ix, iy) = (column(x)?, column(y)?);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |i: usize, name: &str| -> Result<f64> {
            let cell = record.get(i).unwrap_or("").trim();
            cell.parse().with_context(|| format!("row {}: {name} = {cell:?} is not a number", row + 1))
        };
        xs.push(parse(ix, x)?);
        ys.push(parse(iy, y)?);
    }
    if xs.len() < MIN_ROWS {
        bail!("degenerate fit: need at least {MIN_ROWS} rows, got {}", xs.len());
    }
    Ok(fit_loglog(&xs, &ys)?)
}
