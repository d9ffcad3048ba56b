//! The function `ℓ` and the weak Euler-Lagrange equations.

use nalgebra::{DMatrix, DVector};

use crate::error::{CvpError, Result};
use crate::jet::{DualJet, TestBasis};
use crate::lagrangian::LagrangianModel;
use crate::measure::DiscreteMeasure;

fn check_dim(measure: &DiscreteMeasure, lag: &LagrangianModel, x: &[f64]) -> Result<()> {
    if measure.dim() != lag.dim() || x.len() != lag.dim() {
        return Err(CvpError::ShapeError(format!(
            "measure dim {}, Lagrangian dim {}, point dim {}",
            measure.dim(),
            lag.dim(),
            x.len()
        )));
    }
    Ok(())
}

/// `ℓ(x) = Σ_j ρ_j ℒ(x, y_j) − ν/2`.
pub fn ell(measure: &DiscreteMeasure, lag: &LagrangianModel, nu: f64, x: &[f64]) -> Result<f64> {
    check_dim(measure, lag, x)?;
    let mut s = 0.0;
    for (y, w) in measure.points().iter().zip(measure.weights()) {
        s += w * lag.value(x, y)?;
    }
    Ok(s - nu / 2.0)
}

/// Gradient of `ℓ` at `x`.
pub fn ell_gradient(measure: &DiscreteMeasure, lag: &LagrangianModel, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(measure, lag, x)?;
    let m = lag.dim();
    let zero = vec![0u32; m];
    let mut g = vec![0.0; m];
    for (y, w) in measure.points().iter().zip(measure.weights()) {
        for (a, ga) in g.iter_mut().enumerate() {
            let mut alpha = zero.clone();
            alpha[a] = 1;
            *ga += w * lag.partial(x, y, &alpha, &zero)?;
        }
    }
    Ok(g)
}

/// Hessian of `ℓ` at `x`.
pub fn ell_hessian(measure: &DiscreteMeasure, lag: &LagrangianModel, x: &[f64]) -> Result<DMatrix<f64>> {
    check_dim(measure, lag, x)?;
    let m = lag.dim();
    let zero = vec![0u32; m];
    let mut h = DMatrix::zeros(m, m);
    for (y, w) in measure.points().iter().zip(measure.weights()) {
        for a in 0..m {
            for b in a..m {
                let mut alpha = zero.clone();
                alpha[a] += 1;
                alpha[b] += 1;
                let v = w * lag.partial(x, y, &alpha, &zero)?;
                h[(a, b)] += v;
                if a != b {
                    h[(b, a)] += v;
                }
            }
        }
    }
    Ok(h)
}

/// `ν = 2 · mean_i Σ_j ρ_j ℒ(x_i, y_j)`, requiring the per-point values to agree within `tol`.
pub fn calibrate_nu(measure: &DiscreteMeasure, lag: &LagrangianModel, tol: f64) -> Result<f64> {
    let vals = measure
        .points()
        .iter()
        .map(|x| ell(measure, lag, 0.0, x))
        .collect::<Result<Vec<_>>>()?;
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let deviation = vals.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if deviation > tol {
        return Err(CvpError::NotCritical { deviation });
    }
    Ok(2.0 * mean)
}

/// `(ℓ(x_i), ∇ℓ(x_i))` at every support point.
pub fn ell_dual_jet(measure: &DiscreteMeasure, lag: &LagrangianModel, nu: f64) -> Result<DualJet> {
    let mut d = DualJet::zeros(measure.len(), measure.dim());
    for (i, x) in measure.points().iter().enumerate() {
        d.set_scalar(i, ell(measure, lag, nu, x)?);
        d.set_vector(i, &ell_gradient(measure, lag, x)?);
    }
    Ok(d)
}

/// Values `∇_𝔲 ℓ(x_i) = a_i ℓ(x_i) + u_i·∇ℓ(x_i)`, one row per test jet and one column per point.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakElResidual {
    pub values: DMatrix<f64>,
}

impl WeakElResidual {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Residual of one test jet, integrated against the measure weights.
    pub fn integrated(&self, weights: &[f64]) -> DVector<f64> {
        &self.values * DVector::from_column_slice(weights)
    }
}

pub fn weak_el_residual(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    basis: &TestBasis,
) -> Result<WeakElResidual> {
    lag.require_order(1)?;
    let dual = ell_dual_jet(measure, lag, nu)?;
    let mut values = DMatrix::zeros(basis.len(), measure.len());
    for (k, jet) in basis.jets().iter().enumerate() {
        let row = crate::jet::pairing(&dual, jet)?;
        for (i, v) in row.into_iter().enumerate() {
            values[(k, i)] = v;
        }
    }
    Ok(WeakElResidual { values })
}
