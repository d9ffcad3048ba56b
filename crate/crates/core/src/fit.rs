//! Least-squares fits of `log y` against `log x`.

use serde::Serialize;

use crate::error::{CvpError, Result};

/// Values below this are treated as exact zeros by the slope estimators.
pub const RESIDUAL_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Largest absolute deviation of `log y` from the fitted line.
    pub max_residual: f64,
    pub points_used: usize,
}

pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    if xs.len() != ys.len() {
        return Err(CvpError::ShapeError("x and y columns differ in length".into()));
    }
    if xs.len() < 2 {
        return Err(CvpError::DegenerateFit(format!("need at least 2 points, got {}", xs.len())));
    }
    if let Some(v) = xs.iter().chain(ys).find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(CvpError::DegenerateFit(format!("non-positive value {v} in log-log fit")));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(CvpError::DegenerateFit("all x values coincide".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid: Vec<f64> = lx.iter().zip(&ly).map(|(x, y)| y - (intercept + slope * x)).collect();
    let ss_res: f64 = resid.iter().map(|r| r * r).sum();
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    let max_residual = resid.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(LogLogFit { slope, intercept, r_squared, max_residual, points_used: xs.len() })
}

/// Slope of a residual table where exact zeros are expected at high orders.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeReport {
    /// `f64::INFINITY` when every residual is below [`RESIDUAL_FLOOR`].
    pub slope: f64,
    pub fit: Option<LogLogFit>,
    pub table: Vec<(f64, f64)>,
}

impl SlopeReport {
    pub fn is_degenerate(&self) -> bool {
        self.fit.is_none()
    }

    pub fn to_csv(&self, order: usize) -> String {
        let mut s = String::from("lambda,residual,order\n");
        for (l, r) in &self.table {
            s.push_str(&format!("{l:e},{r:e},{order}\n"));
        }
        s
    }
}

/// Fits the decay exponent of `residuals` against `lambdas`, dropping entries below the floor.
pub fn residual_exponent(lambdas: &[f64], residuals: &[f64]) -> Result<SlopeReport> {
    if lambdas.len() != residuals.len() {
        return Err(CvpError::ShapeError("grid and residuals differ in length".into()));
    }
    let table: Vec<(f64, f64)> = lambdas.iter().copied().zip(residuals.iter().copied()).collect();
    let kept: Vec<(f64, f64)> = table.iter().copied().filter(|(_, r)| *r >= RESIDUAL_FLOOR).collect();
    if kept.is_empty() {
        return Ok(SlopeReport { slope: f64::INFINITY, fit: None, table });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = kept.into_iter().unzip();
    let fit = fit_loglog(&xs, &ys)?;
    Ok(SlopeReport { slope: fit.slope, fit: Some(fit), table })
}

/// Geometric grid from `hi` down to `lo` with `count` points.
pub fn geometric_grid(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let ratio = (lo / hi).powf(1.0 / (count - 1) as f64);
    (0..count).map(|k| hi * ratio.powi(k as i32)).collect()
}
