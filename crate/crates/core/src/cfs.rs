//! Finite-dimensional causal fermion systems.
//!
//! Points are Hermitian `f×f` matrices of signature `(n, n)` and fixed trace. The spin space
//! is `ℂ²ⁿ` with signature `s = diag(1ₙ, −1ₙ)`, so the adjoint of a spin map `ψ: ℂᶠ → ℂ²ⁿ`
//! is `ψ* = ψ† s`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CvpError, Result};
use crate::lagrangian::{FiniteDifference, LagrangianModel, PairFn};
use crate::measure::DiscreteMeasure;

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;

/// Relative threshold for counting non-trivial eigenvalues.
pub const TOL_EIG: f64 = 1e-10;
/// Moduli closer than this make the Lagrangian non-smooth.
pub const CROSSING_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfsParams {
    pub hilbert_dim: usize,
    pub spin_dim: usize,
    pub trace_constant: f64,
    #[serde(default)]
    pub kappa: f64,
}

impl CfsParams {
    pub fn new(hilbert_dim: usize, spin_dim: usize, trace_constant: f64, kappa: f64) -> Result<Self> {
        let p = Self { hilbert_dim, spin_dim, trace_constant, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spin_dim == 0 || self.hilbert_dim < 2 * self.spin_dim {
            return Err(CvpError::ArgError(format!(
                "need f ≥ 2n ≥ 2, got f = {}, n = {}",
                self.hilbert_dim, self.spin_dim
            )));
        }
        if !(self.trace_constant > 0.0 && self.trace_constant.is_finite()) {
            return Err(CvpError::ArgError("trace constant must be positive".into()));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(CvpError::ArgError("kappa must be non-negative".into()));
        }
        Ok(())
    }

    /// `s = diag(1ₙ, −1ₙ)`.
    pub fn spin_signature(&self) -> CMatrix {
        let n = self.spin_dim;
        CMatrix::from_diagonal(&DVector::from_fn(2 * n, |i, _| C64::new(if i < n { 1.0 } else { -1.0 }, 0.0)))
    }

    /// `diag(2c/n, …, −c/n, …, 0, …)` with `n` entries of each sign.
    pub fn default_center(&self) -> CfsPoint {
        let (n, c) = (self.spin_dim, self.trace_constant);
        let diag = DVector::from_fn(self.hilbert_dim, |i, _| {
            let v = if i < n {
                2.0 * c / n as f64
            } else if i < 2 * n {
                -c / n as f64
            } else {
                0.0
            };
            C64::new(v, 0.0)
        });
        CfsPoint { matrix: CMatrix::from_diagonal(&diag) }
    }
}

pub fn real_matrix(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| C64::new(v, 0.0))
}

fn hermitian_defect(m: &CMatrix) -> f64 {
    (m - m.adjoint()).iter().fold(0.0, |a, v| a.max(v.norm()))
}

/// Numbers of positive and negative eigenvalues above `TOL_EIG · ‖m‖`.
pub fn signature(m: &CMatrix) -> (usize, usize) {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let scale = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = TOL_EIG * scale;
    (eig.iter().filter(|v| **v > tol).count(), eig.iter().filter(|v| **v < -tol).count())
}

/// A Hermitian operator of signature `(n, n)` with trace `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CfsPoint {
    matrix: CMatrix,
}

impl CfsPoint {
    pub fn new(matrix: CMatrix, params: &CfsParams) -> Result<Self> {
        let f = params.hilbert_dim;
        if matrix.shape() != (f, f) {
            return Err(CvpError::ShapeError(format!("expected {f}×{f}, got {:?}", matrix.shape())));
        }
        let defect = hermitian_defect(&matrix);
        if defect > 1e-12 * (1.0 + matrix.norm()) {
            return Err(CvpError::InvalidPoint(format!("not self-adjoint (defect {defect:e})")));
        }
        let sig = signature(&matrix);
        if sig != (params.spin_dim, params.spin_dim) {
            return Err(CvpError::InvalidPoint(format!(
                "signature {sig:?}, expected ({0}, {0})",
                params.spin_dim
            )));
        }
        let tr = matrix.trace().re;
        if (tr - params.trace_constant).abs() > 1e-10 {
            return Err(CvpError::InvalidPoint(format!("trace {tr}, expected {}", params.trace_constant)));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn signature(&self) -> (usize, usize) {
        signature(&self.matrix)
    }

    /// `U x U*`.
    pub fn conjugated(&self, unitary: &CMatrix) -> Self {
        Self { matrix: unitary * &self.matrix * unitary.adjoint() }
    }
}

/// A map `ψ: ℂᶠ → ℂ²ⁿ` with adjoint `ψ† s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinMap {
    pub psi: CMatrix,
}

impl SpinMap {
    pub fn new(psi: CMatrix, params: &CfsParams) -> Result<Self> {
        if psi.shape() != (2 * params.spin_dim, params.hilbert_dim) {
            return Err(CvpError::ShapeError(format!(
                "spin map must be {}×{}, got {:?}",
                2 * params.spin_dim,
                params.hilbert_dim,
                psi.shape()
            )));
        }
        Ok(Self { psi })
    }

    /// `ψ* = ψ† s`.
    pub fn adjoint(&self, params: &CfsParams) -> CMatrix {
        self.psi.adjoint() * params.spin_signature()
    }

    /// `ψ* ψ`, a Hermitian `f×f` matrix.
    pub fn square(&self, params: &CfsParams) -> CMatrix {
        self.adjoint(params) * &self.psi
    }

    /// The spin map with `−ψ*ψ = x`, read off an eigen-decomposition of `x`.
    ///
    /// The `n` largest eigenvalues fill the lower spin block, the `n` smallest the upper one;
    /// eigenvalues of the wrong sign are clamped to zero.
    pub fn from_point(x: &CMatrix, params: &CfsParams) -> Self {
        let n = params.spin_dim;
        let eig = x.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
        let mut psi = CMatrix::zeros(2 * n, x.ncols());
        for k in 0..n {
            let neg = order[k];
            let pos = order[order.len() - 1 - k];
            let row_neg = eig.eigenvectors.column(neg).adjoint() * C64::new((-eig.eigenvalues[neg]).max(0.0).sqrt(), 0.0);
            let row_pos = eig.eigenvectors.column(pos).adjoint() * C64::new(eig.eigenvalues[pos].max(0.0).sqrt(), 0.0);
            psi.row_mut(k).copy_from(&row_neg);
            psi.row_mut(n + k).copy_from(&row_pos);
        }
        Self { psi }
    }
}

/// `R(ψ) = c ψ*ψ / tr(ψ*ψ)`.
pub fn local_correlation(psi: &SpinMap, params: &CfsParams) -> Result<CfsPoint> {
    let sq = psi.square(params);
    let tr = sq.trace().re;
    let scale = psi.psi.norm_squared();
    if tr.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) || scale == 0.0 {
        return Err(CvpError::VanishingLocalTrace { trace: tr });
    }
    Ok(CfsPoint { matrix: sq * C64::new(params.trace_constant / tr, 0.0) })
}

/// Derivative of `R` at `ψ` along `dψ`.
fn correlation_derivative(psi: &CMatrix, dpsi: &CMatrix, s: &CMatrix, c: f64) -> CMatrix {
    let sq = psi.adjoint() * s * psi;
    let tr = sq.trace().re;
    let dsq = dpsi.adjoint() * s * psi + psi.adjoint() * s * dpsi;
    let dtr = dsq.trace().re;
    (dsq * C64::new(c / tr, 0.0)) - sq * C64::new(c * dtr / (tr * tr), 0.0)
}

fn real_coords(m: &CMatrix) -> DVector<f64> {
    DVector::from_iterator(2 * m.len(), m.iter().flat_map(|v| [v.re, v.im]))
}

fn unit_spin_direction(rows: usize, cols: usize, k: usize) -> CMatrix {
    let mut d = CMatrix::zeros(rows, cols);
    let entry = k / 2;
    // column-major entry index, matching `real_coords`
    d[(entry % rows, entry / rows)] = if k % 2 == 0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 1.0) };
    d
}

/// Real Jacobian of `R` at `ψ`: rows are real/imaginary parts of the `f×f` output.
pub fn correlation_jacobian(psi: &SpinMap, params: &CfsParams) -> DMatrix<f64> {
    let s = params.spin_signature();
    let (rows, cols) = psi.psi.shape();
    let f = params.hilbert_dim;
    let mut jac = DMatrix::zeros(2 * f * f, 2 * rows * cols);
    for k in 0..2 * rows * cols {
        let d = unit_spin_direction(rows, cols, k);
        jac.set_column(k, &real_coords(&correlation_derivative(&psi.psi, &d, &s, params.trace_constant)));
    }
    jac
}

/// Eigenvalues of `A_xy` with `|xy| = Σ|λᵢ|` and `|(xy)²| = Σ|λᵢ|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralWeights {
    pub eigenvalues: Vec<C64>,
    pub abs_sum: f64,
    pub abs_sq_sum: f64,
}

impl SpectralWeights {
    fn from_eigenvalues(mut eigenvalues: Vec<C64>) -> Self {
        eigenvalues.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.re.total_cmp(&a.re)).then(b.im.total_cmp(&a.im)));
        let abs_sum = eigenvalues.iter().map(|l| l.norm()).sum();
        let abs_sq_sum = eigenvalues.iter().map(|l| l.norm_sqr()).sum();
        Self { eigenvalues, abs_sum, abs_sq_sum }
    }

    pub fn moduli(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| l.norm()).collect()
    }

    /// Smallest gap between two moduli, relative to the largest modulus.
    pub fn min_relative_gap(&self) -> f64 {
        let m = self.moduli();
        let scale = m.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut gap = f64::INFINITY;
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                gap = gap.min((m[i] - m[j]).abs() / scale);
            }
        }
        gap
    }
}

/// Eigenvalues of a general complex matrix.
pub fn complex_eigenvalues(m: &CMatrix) -> Result<Vec<C64>> {
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| CvpError::NumericalFailure { x: vec![], y: vec![] })?;
    let t = schur.unpack().1;
    Ok(t.diagonal().iter().copied().collect())
}

/// Closed chain `A_xy = P(x,y) P(y,x)` with `P(x,y) = −Ψ(x)Ψ(y)*`.
pub fn closed_chain(x: &CMatrix, y: &CMatrix, params: &CfsParams) -> CMatrix {
    let psi_x = SpinMap::from_point(x, params);
    let psi_y = SpinMap::from_point(y, params);
    let kxy = -(&psi_x.psi * psi_y.adjoint(params));
    let kyx = -(&psi_y.psi * psi_x.adjoint(params));
    kxy * kyx
}

pub fn spectral_weights_of(x: &CMatrix, y: &CMatrix, params: &CfsParams) -> Result<SpectralWeights> {
    let chain = closed_chain(x, y, params);
    complex_eigenvalues(&chain)
        .map_err(|_| CvpError::NumericalFailure { x: real_coords(x).as_slice().to_vec(), y: real_coords(y).as_slice().to_vec() })
        .map(SpectralWeights::from_eigenvalues)
}

pub fn spectral_weights(x: &CfsPoint, y: &CfsPoint, params: &CfsParams) -> Result<SpectralWeights> {
    spectral_weights_of(&x.matrix, &y.matrix, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalClass {
    Spacelike,
    Timelike,
    Lightlike,
}

pub fn causal_class(sw: &SpectralWeights) -> CausalClass {
    let moduli = sw.moduli();
    let scale = moduli.iter().copied().fold(1.0, f64::max);
    let tol = 1e-9 * scale;
    let (lo, hi) = moduli.iter().fold((f64::INFINITY, 0.0f64), |(a, b), m| (a.min(*m), b.max(*m)));
    if hi - lo <= tol {
        CausalClass::Spacelike
    } else if sw.eigenvalues.iter().all(|l| l.im.abs() <= tol) {
        CausalClass::Timelike
    } else {
        CausalClass::Lightlike
    }
}

/// `|(xy)²| − (1/2n)|xy|² + κ|xy|²`.
pub fn lagrangian_from_weights(sw: &SpectralWeights, n: usize, kappa: f64) -> f64 {
    sw.abs_sq_sum - sw.abs_sum * sw.abs_sum / (2.0 * n as f64) + kappa * sw.abs_sum * sw.abs_sum
}

/// `(1/4n) Σᵢⱼ (|λᵢ| − |λⱼ|)²`, the `κ = 0` Lagrangian written as a sum of squares.
pub fn lagrangian_quarter_sum(sw: &SpectralWeights, n: usize) -> f64 {
    let m = sw.moduli();
    let mut s = 0.0;
    for a in &m {
        for b in &m {
            s += (a - b) * (a - b);
        }
    }
    s / (4.0 * n as f64)
}

/// `L_κ(x, y)` and the causal type of the pair.
pub fn causal_lagrangian(x: &CfsPoint, y: &CfsPoint, params: &CfsParams) -> Result<(f64, CausalClass)> {
    let sw = spectral_weights(x, y, params)?;
    Ok((lagrangian_value(&sw, params), causal_class(&sw)))
}

fn lagrangian_value(sw: &SpectralWeights, params: &CfsParams) -> f64 {
    lagrangian_quarter_sum(sw, params.spin_dim) + params.kappa * sw.abs_sum * sw.abs_sum
}

/// Points with weights, as a measure on the space of operators.
#[derive(Debug, Clone, PartialEq)]
pub struct CfsSystem {
    pub params: CfsParams,
    pub points: Vec<CfsPoint>,
    pub weights: Vec<f64>,
}

impl CfsSystem {
    pub fn new(params: CfsParams, points: Vec<CfsPoint>, weights: Vec<f64>) -> Result<Self> {
        params.validate()?;
        if points.len() != weights.len() {
            return Err(CvpError::ShapeError("points and weights differ in length".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(CvpError::ArgError("weights must be positive".into()));
        }
        Ok(Self { params, points, weights })
    }

    pub fn to_json(&self) -> Value {
        json!({
            "params": self.params,
            "points": self.points.iter().map(|p| complex_matrix_to_json(p.matrix())).collect::<Vec<_>>(),
            "weights": self.weights,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |m: &str| CvpError::ArgError(format!("CFS system JSON: {m}"));
        let params: CfsParams = serde_json::from_value(v.get("params").cloned().ok_or_else(|| bad("missing params"))?)
            .map_err(|e| bad(&e.to_string()))?;
        let points = v
            .get("points")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing points"))?
            .iter()
            .map(|p| CfsPoint::new(complex_matrix_from_json(p)?, &params))
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = serde_json::from_value(v.get("weights").cloned().ok_or_else(|| bad("missing weights"))?)
            .map_err(|e| bad(&e.to_string()))?;
        Self::new(params, points, weights)
    }
}

/// `𝒮 = ΣΣ ρᵢρⱼ L₀(xᵢ, xⱼ)` and `𝒯 = ΣΣ ρᵢρⱼ |xᵢxⱼ|²`.
pub fn causal_action(system: &CfsSystem) -> Result<(f64, f64)> {
    let n = system.params.spin_dim;
    let (mut action, mut constraint) = (0.0, 0.0);
    for (x, wx) in system.points.iter().zip(&system.weights) {
        for (y, wy) in system.points.iter().zip(&system.weights) {
            let sw = spectral_weights(x, y, &system.params)?;
            action += wx * wy * lagrangian_quarter_sum(&sw, n);
            constraint += wx * wy * sw.abs_sum * sw.abs_sum;
        }
    }
    Ok((action, constraint))
}

/// Rows of `[re, im]` pairs.
pub fn complex_matrix_to_json(m: &CMatrix) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|r| Value::Array((0..m.ncols()).map(|c| json!([m[(r, c)].re, m[(r, c)].im])).collect()))
            .collect(),
    )
}

pub fn complex_matrix_from_json(v: &Value) -> Result<CMatrix> {
    let bad = || CvpError::ArgError("complex matrix must be rows of [re, im] pairs".into());
    let rows = v.as_array().ok_or_else(bad)?;
    let ncols = rows.first().and_then(Value::as_array).map_or(0, Vec::len);
    let mut m = CMatrix::zeros(rows.len(), ncols);
    for (r, row) in rows.iter().enumerate() {
        let row = row.as_array().filter(|x| x.len() == ncols).ok_or_else(bad)?;
        for (c, e) in row.iter().enumerate() {
            let pair = e.as_array().filter(|p| p.len() == 2).ok_or_else(bad)?;
            m[(r, c)] = C64::new(pair[0].as_f64().ok_or_else(bad)?, pair[1].as_f64().ok_or_else(bad)?);
        }
    }
    Ok(m)
}

/// Spin maps `Ψ(xᵢ)` of a system.
#[derive(Debug, Clone)]
pub struct WaveEvaluation {
    pub params: CfsParams,
    pub maps: Vec<SpinMap>,
}

impl WaveEvaluation {
    pub fn from_system(system: &CfsSystem) -> Self {
        let maps = system.points.iter().map(|p| SpinMap::from_point(p.matrix(), &system.params)).collect();
        Self { params: system.params, maps }
    }

    /// `P(xᵢ, xⱼ) = −Ψ(xᵢ) Ψ(xⱼ)*`.
    pub fn kernel(&self, i: usize, j: usize) -> Result<CMatrix> {
        let (a, b) = (self.maps.get(i), self.maps.get(j));
        match (a, b) {
            (Some(a), Some(b)) => Ok(-(&a.psi * b.adjoint(&self.params))),
            _ => Err(CvpError::IndexError(format!("point index ({i}, {j}) out of {}", self.maps.len()))),
        }
    }

    /// `−Ψ(xᵢ)*Ψ(xᵢ)`.
    pub fn operator(&self, i: usize) -> CMatrix {
        -self.maps[i].square(&self.params)
    }
}

/// Replaces `Ψ(xᵢ)` by `Ψ(xᵢ) + δᵢ` and rescales to the trace constraint.
pub fn perturb_wave_evaluation(
    weo: &WaveEvaluation,
    delta: &[CMatrix],
    weights: &[f64],
) -> Result<CfsSystem> {
    if delta.len() != weo.maps.len() || weights.len() != weo.maps.len() {
        return Err(CvpError::ShapeError("one increment and weight per point required".into()));
    }
    let points = weo
        .maps
        .iter()
        .zip(delta)
        .map(|(psi, d)| {
            let moved = SpinMap::new(&psi.psi + d, &weo.params)?;
            let point = local_correlation(&moved, &weo.params)?;
            CfsPoint::new(point.matrix, &weo.params)
        })
        .collect::<Result<Vec<_>>>()?;
    CfsSystem::new(weo.params, points, weights.to_vec())
}

/// Chart `coords ↦ R(ψ + Σ cₐ Eₐ)` around a point.
#[derive(Debug, Clone)]
pub struct Chart {
    pub params: CfsParams,
    pub center: CfsPoint,
    pub psi: SpinMap,
    pub directions: Vec<CMatrix>,
    pub condition: f64,
}

impl Chart {
    /// Uses the directions on which `dR` is injective, orthogonal to its kernel.
    pub fn new(center: &CfsPoint, params: &CfsParams) -> Result<Self> {
        let psi = SpinMap::from_point(center.matrix(), params);
        let jac = correlation_jacobian(&psi, params);
        let svd = jac.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| CvpError::Numerical("SVD failed".into()))?;
        let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let (rows, cols) = psi.psi.shape();
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
        let directions = idx
            .into_iter()
            .filter(|k| svd.singular_values[*k] > 1e-10 * smax)
            .map(|k| {
                let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
                let pivot = v.iter().copied().fold(0.0, |a: f64, x| if x.abs() > a.abs() + 1e-12 { x } else { a });
                if pivot < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                let mut d = CMatrix::zeros(rows, cols);
                for (e, pair) in v.chunks(2).enumerate() {
                    d[(e % rows, e / rows)] = C64::new(pair[0], pair[1]);
                }
                d
            })
            .collect();
        Self::with_directions(center, params, directions)
    }

    pub fn with_directions(center: &CfsPoint, params: &CfsParams, directions: Vec<CMatrix>) -> Result<Self> {
        let psi = SpinMap::from_point(center.matrix(), params);
        let mut chart = Self { params: *params, center: center.clone(), psi, directions, condition: f64::NAN };
        let jac = chart.restricted_jacobian(&chart.psi.psi);
        let sv = jac.singular_values();
        let smax = sv.iter().copied().fold(0.0, f64::max);
        let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if chart.directions.is_empty() || smax == 0.0 || smin <= 1e-10 * smax {
            return Err(CvpError::SingularChart(format!(
                "restricted differential has singular values in [{smin:e}, {smax:e}]"
            )));
        }
        chart.condition = smax / smin;
        Ok(chart)
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    fn spin_at(&self, coords: &[f64]) -> CMatrix {
        let mut psi = self.psi.psi.clone();
        for (c, d) in coords.iter().zip(&self.directions) {
            psi += d * C64::new(*c, 0.0);
        }
        psi
    }

    fn restricted_jacobian(&self, psi: &CMatrix) -> DMatrix<f64> {
        let s = self.params.spin_signature();
        let cols: Vec<DVector<f64>> = self
            .directions
            .iter()
            .map(|d| real_coords(&correlation_derivative(psi, d, &s, self.params.trace_constant)))
            .collect();
        DMatrix::from_columns(&cols)
    }

    /// Operator with the given chart coordinates; the signature is not enforced.
    pub fn matrix_at(&self, coords: &[f64]) -> Result<CMatrix> {
        if coords.len() != self.dim() {
            return Err(CvpError::ShapeError(format!("chart has {} coordinates, got {}", self.dim(), coords.len())));
        }
        let spin = SpinMap { psi: self.spin_at(coords) };
        Ok(local_correlation(&spin, &self.params)?.matrix)
    }

    pub fn point(&self, coords: &[f64]) -> Result<CfsPoint> {
        CfsPoint::new(self.matrix_at(coords)?, &self.params)
    }

    /// Gauss-Newton inversion of [`Self::point`].
    pub fn coords(&self, target: &CfsPoint) -> Result<Vec<f64>> {
        let goal = real_coords(target.matrix());
        let mut coords = vec![0.0; self.dim()];
        for _ in 0..100 {
            let current = self.matrix_at(&coords)?;
            let resid = real_coords(&current) - &goal;
            if resid.amax() < 1e-14 * (1.0 + goal.amax()) {
                return Ok(coords);
            }
            let jac = self.restricted_jacobian(&self.spin_at(&coords));
            let step = jac
                .svd(true, true)
                .solve(&resid, 1e-14)
                .map_err(|e| CvpError::Numerical(format!("chart inversion: {e}")))?;
            for (c, s) in coords.iter_mut().zip(step.iter()) {
                *c -= s;
            }
            if step.amax() < 1e-15 * (1.0 + coords.iter().fold(0.0f64, |a, c| a.max(c.abs()))) {
                break;
            }
        }
        let resid = (real_coords(&self.matrix_at(&coords)?) - &goal).amax();
        if resid > 1e-8 {
            return Err(CvpError::Numerical(format!("chart inversion did not converge (residual {resid:e})")));
        }
        Ok(coords)
    }
}

/// The causal Lagrangian in chart coordinates, differentiated numerically.
pub fn cfs_as_lagrangian(chart: &Chart) -> LagrangianModel {
    let dim = chart.dim();
    let chart = Arc::new(chart.clone());
    let warned = Arc::new(AtomicBool::new(false));
    let params = chart.params;
    let f: PairFn = Arc::new(move |a: &[f64], b: &[f64]| {
        let (Ok(x), Ok(y)) = (chart.matrix_at(a), chart.matrix_at(b)) else {
            return f64::NAN;
        };
        let Ok(sw) = spectral_weights_of(&x, &y, &params) else {
            return f64::NAN;
        };
        if sw.min_relative_gap() < CROSSING_GAP && !warned.swap(true, Ordering::Relaxed) {
            log::warn!("causal Lagrangian probed near an eigenvalue-modulus crossing; derivatives may be unreliable");
        }
        lagrangian_value(&sw, &params)
    });
    let mut map = BTreeMap::new();
    map.insert("hilbert_dim".to_string(), params.hilbert_dim as f64);
    map.insert("spin_dim".to_string(), params.spin_dim as f64);
    map.insert("trace".to_string(), params.trace_constant);
    map.insert("kappa".to_string(), params.kappa);
    LagrangianModel::new("cfs", map, Arc::new(FiniteDifference::new(dim, 2, f)), true)
}

/// `4nf − 4n² − 1`, the dimension of the space of admissible operators.
pub fn chart_dim_hint(params: &CfsParams) -> usize {
    let (n, f) = (params.spin_dim, params.hilbert_dim);
    4 * n * f - 4 * n * n - 1
}

/// Registry entry `cfs`: the chart around the default center.
pub fn registry_model(params: &BTreeMap<String, f64>) -> Result<LagrangianModel> {
    let allowed = ["hilbert_dim", "spin_dim", "trace", "kappa"];
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(CvpError::ArgError(format!("unknown parameter {k} for cfs")));
    }
    let int = |k: &str, d: f64| -> Result<usize> {
        let v = params.get(k).copied().unwrap_or(d);
        if v < 1.0 || v.fract() != 0.0 {
            return Err(CvpError::ArgError(format!("{k} must be a positive integer")));
        }
        Ok(v as usize)
    };
    let p = CfsParams::new(
        int("hilbert_dim", 2.0)?,
        int("spin_dim", 1.0)?,
        params.get("trace").copied().unwrap_or(1.0),
        params.get("kappa").copied().unwrap_or(0.0),
    )?;
    let chart = Chart::new(&p.default_center(), &p)?;
    Ok(cfs_as_lagrangian(&chart))
}

/// Two-point system `{x, U x U*}` in chart coordinates around `x`, with equal weights.
pub fn two_point_chart_measure(chart: &Chart, unitary: &CMatrix) -> Result<DiscreteMeasure> {
    let y = chart.center.conjugated(unitary);
    let cy = chart.coords(&y)?;
    DiscreteMeasure::new(vec![vec![0.0; chart.dim()], cy], vec![0.5, 0.5])
}
