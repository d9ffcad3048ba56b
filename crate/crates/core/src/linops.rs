//! Multilinear operators `Δ_ℓ`, the linearized operator `Δ`, its kernel and Green's operators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CvpError, Result};
use crate::jet::{DualJet, Jet, TestBasis};
use crate::lagrangian::{Direction, LagrangianModel};
use crate::measure::DiscreteMeasure;

pub const TOL_RANK: f64 = 1e-8;
pub const TOL_SOLVE: f64 = 1e-8;

/// Which form of the expansion operators is used.
///
/// `Standard` lets the scalar part of a jet act in both slots and carries the `ν`-term;
/// `Breve` differentiates only the vector part in the `x`-slot and drops the `ν`-term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    #[default]
    Standard,
    Breve,
}

/// Jet component `(c, u)` at one point.
pub(crate) type JetAt<'a> = (f64, &'a [f64]);

#[derive(Clone, Copy)]
enum Pick {
    XScalar,
    YScalar,
    XVector,
    YVector,
}

/// Value and `x`-gradient at a single point `x` of
/// `(1/ℓ!) Σ_j w_j Π_k (c_k(x) + c_k(y_j) + u_k(x)·∂₁ + u_k(y_j)·∂₂) ℒ(x, y_j)` minus the `ν`-term.
///
/// `x_jets[k]` is factor `k` at `x`; `y_jets[k][j]` is factor `k` at `y_j`.
/// The gradient differentiates `ℒ` in its first argument only; jets are frozen.
pub(crate) fn lifted_product(
    lag: &LagrangianModel,
    conv: Convention,
    nu: f64,
    x: &[f64],
    x_jets: &[JetAt<'_>],
    ys: &[(&[f64], f64)],
    y_jets: &[Vec<JetAt<'_>>],
    with_gradient: bool,
) -> Result<(f64, Vec<f64>)> {
    let order = x_jets.len();
    let m = x.len();
    let picks: &[Pick] = match conv {
        Convention::Standard => &[Pick::XScalar, Pick::YScalar, Pick::XVector, Pick::YVector],
        Convention::Breve => &[Pick::YScalar, Pick::XVector, Pick::YVector],
    };
    let nchoice = picks.len();
    let total = nchoice.pow(order as u32);
    let units: Vec<Vec<f64>> = (0..m)
        .map(|a| {
            let mut e = vec![0.0; m];
            e[a] = 1.0;
            e
        })
        .collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; m];
    let mut dirs: Vec<Direction<'_>> = Vec::with_capacity(order + 1);
    for (j, (y, w)) in ys.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        'assign: for code in 0..total {
            let mut rest = code;
            let mut coef = *w;
            dirs.clear();
            for k in 0..order {
                let pick = picks[rest % nchoice];
                rest /= nchoice;
                let (cx, ux) = x_jets[k];
                let (cy, uy) = y_jets[k][j];
                match pick {
                    Pick::XScalar => coef *= cx,
                    Pick::YScalar => coef *= cy,
                    Pick::XVector => {
                        if ux.iter().all(|v| *v == 0.0) {
                            continue 'assign;
                        }
                        dirs.push(Direction::x(ux));
                    }
                    Pick::YVector => {
                        if uy.iter().all(|v| *v == 0.0) {
                            continue 'assign;
                        }
                        dirs.push(Direction::y(uy));
                    }
                }
                if coef == 0.0 {
                    continue 'assign;
                }
            }
            value += coef * lag.directional(x, y, &dirs)?;
            if with_gradient {
                for (a, e) in units.iter().enumerate() {
                    dirs.push(Direction::x(e));
                    grad[a] += coef * lag.directional(x, y, &dirs)?;
                    dirs.pop();
                }
            }
        }
    }
    if order == 0 || conv == Convention::Standard {
        let cprod: f64 = x_jets.iter().map(|(c, _)| c).product();
        value -= nu / 2.0 * cprod;
    }
    let fact: f64 = (1..=order).map(|k| k as f64).product();
    Ok((value / fact, grad.into_iter().map(|g| g / fact).collect()))
}

fn check_jets(measure: &DiscreteMeasure, jets: &[&Jet]) -> Result<()> {
    for j in jets {
        if j.points() != measure.len() || j.dim() != measure.dim() {
            return Err(CvpError::ShapeError(format!(
                "jet shape ({}, {}) does not match measure ({}, {})",
                j.points(),
                j.dim(),
                measure.len(),
                measure.dim()
            )));
        }
    }
    Ok(())
}

/// `Δ_ℓ[w_1, …, w_ℓ]` lifted to a dual jet: value and gradient at each support point.
pub fn delta_ell_lifted(
    conv: Convention,
    jets: &[&Jet],
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
) -> Result<DualJet> {
    check_jets(measure, jets)?;
    lifted_on_atoms(conv, jets, measure.points(), measure.weights(), lag, nu)
}

/// [`delta_ell_lifted`] on a raw list of weighted atoms; points may coincide.
pub fn lifted_on_atoms(
    conv: Convention,
    jets: &[&Jet],
    points: &[Vec<f64>],
    weights: &[f64],
    lag: &LagrangianModel,
    nu: f64,
) -> Result<DualJet> {
    let (n, m) = (points.len(), lag.dim());
    if weights.len() != n || jets.iter().any(|j| j.points() != n || j.dim() != m) {
        return Err(CvpError::ShapeError("atoms, weights and jets differ in shape".into()));
    }
    lag.require_order(jets.len() + 1)?;
    let ys: Vec<(&[f64], f64)> = points.iter().map(|p| p.as_slice()).zip(weights.iter().copied()).collect();
    let y_jets: Vec<Vec<JetAt<'_>>> =
        jets.iter().map(|w| (0..n).map(|j| (w.scalar(j), w.vector(j))).collect()).collect();
    let mut out = DualJet::zeros(n, m);
    for (i, x) in points.iter().enumerate() {
        let x_jets: Vec<JetAt<'_>> = jets.iter().map(|w| (w.scalar(i), w.vector(i))).collect();
        let (v, g) = lifted_product(lag, conv, nu, x, &x_jets, &ys, &y_jets, true)?;
        out.set_scalar(i, v);
        out.set_vector(i, &g);
    }
    Ok(out)
}

/// Matrix of `Σ_i τ_i ⟨𝔲^k, Δ₁ e_c⟩(x_i)` over weighted atoms, rows `k` from `tests`, columns
/// the unit jets; `τ` are the test weights.
pub fn bilinear_on_atoms(
    conv: Convention,
    points: &[Vec<f64>],
    weights: &[f64],
    test_weights: &[f64],
    lag: &LagrangianModel,
    nu: f64,
    tests: &[Jet],
) -> Result<DMatrix<f64>> {
    lag.require_order(2)?;
    let (np, m) = (points.len(), lag.dim());
    if test_weights.len() != np || tests.iter().any(|j| j.points() != np || j.dim() != m) {
        return Err(CvpError::ShapeError("test jets do not match the atoms".into()));
    }
    let n = np * (1 + m);
    let mut matrix = DMatrix::zeros(tests.len(), n);
    for c in 0..n {
        let unit = Jet::unit(np, m, c);
        let col = lifted_on_atoms(conv, &[&unit], points, weights, lag, nu)?;
        for (k, u) in tests.iter().enumerate() {
            let per_point = crate::jet::pairing(&col, u)?;
            matrix[(k, c)] = per_point.iter().zip(test_weights).map(|(p, w)| p * w).sum();
        }
    }
    Ok(matrix)
}

fn delta_ell_values(
    conv: Convention,
    order: usize,
    jets: &[&Jet],
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
) -> Result<Vec<f64>> {
    if jets.len() != order {
        return Err(CvpError::ArgError(format!("order {order} needs {order} jets, got {}", jets.len())));
    }
    check_jets(measure, jets)?;
    lag.require_order(order)?;
    let ys: Vec<(&[f64], f64)> =
        measure.points().iter().map(|p| p.as_slice()).zip(measure.weights().iter().copied()).collect();
    let y_jets: Vec<Vec<JetAt<'_>>> = jets
        .iter()
        .map(|w| (0..measure.len()).map(|j| (w.scalar(j), w.vector(j))).collect())
        .collect();
    measure
        .points()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let x_jets: Vec<JetAt<'_>> = jets.iter().map(|w| (w.scalar(i), w.vector(i))).collect();
            lifted_product(lag, conv, nu, x, &x_jets, &ys, &y_jets, false).map(|(v, _)| v)
        })
        .collect()
}

/// `Δ₀(x_i) = ℓ(x_i)`.
pub fn delta_zero(measure: &DiscreteMeasure, lag: &LagrangianModel, nu: f64) -> Result<Vec<f64>> {
    delta_ell_values(Convention::Standard, 0, &[], measure, lag, nu)
}

/// `Δ_ℓ[w_1, …, w_ℓ](x_i)` in the standard convention.
pub fn delta_ell(
    order: usize,
    jets: &[&Jet],
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
) -> Result<Vec<f64>> {
    if order == 0 {
        return Err(CvpError::ArgError("delta_ell needs order ≥ 1; use delta_zero".into()));
    }
    delta_ell_values(Convention::Standard, order, jets, measure, lag, nu)
}

/// `Δ̆_ℓ[w_1, …, w_ℓ](x_i)`: vector derivative only in the `x`-slot, no `ν`-term.
pub fn delta_ell_breve(
    order: usize,
    jets: &[&Jet],
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
) -> Result<Vec<f64>> {
    if order == 0 {
        return Err(CvpError::ArgError("delta_ell_breve needs order ≥ 1".into()));
    }
    delta_ell_values(Convention::Breve, order, jets, measure, lag, 0.0)
}

/// The linearized operator as the bilinear form `Σ_i ρ_i ⟨𝔲, Δ𝔳⟩(x_i)`.
///
/// Rows are test-basis jets, columns the flat jet layout. On the full jet space
/// the matrix is symmetric.
#[derive(Debug, Clone)]
pub struct DeltaMatrix {
    pub matrix: DMatrix<f64>,
    pub nu: f64,
    pub convention: Convention,
    pub fingerprint: u64,
    basis: TestBasis,
    weights: Vec<f64>,
    dim: usize,
}

impl DeltaMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.weights.len()
    }

    pub fn basis(&self) -> &TestBasis {
        &self.basis
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Test-space representation `v_k = Σ_i ρ_i ⟨𝔲^k, v⟩(x_i)` of a dual jet.
    pub fn dual_to_form(&self, v: &DualJet) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.basis.len());
        for (k, u) in self.basis.jets().iter().enumerate() {
            let per_point = crate::jet::pairing(v, u)?;
            out[k] = per_point.iter().zip(&self.weights).map(|(p, w)| p * w).sum();
        }
        Ok(out)
    }

    pub fn apply(&self, jet: &Jet) -> DVector<f64> {
        &self.matrix * jet.to_vector()
    }

    pub fn spectral_norm(&self) -> f64 {
        self.matrix.singular_values().max()
    }

    /// `max |Δ − Δᵀ|` on the full jet space, `None` for restricted test spaces.
    pub fn symmetry_defect(&self) -> Option<f64> {
        if !self.basis.is_full_space() || self.matrix.nrows() != self.matrix.ncols() {
            return None;
        }
        Some((&self.matrix - self.matrix.transpose()).amax())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<f64>> =
            (0..self.matrix.nrows()).map(|r| self.matrix.row(r).iter().copied().collect()).collect();
        serde_json::json!({
            "rows": self.matrix.nrows(),
            "cols": self.matrix.ncols(),
            "nu": self.nu,
            "convention": self.convention,
            "fingerprint": format!("{:016x}", self.fingerprint),
            "full_space": self.basis.is_full_space(),
            "matrix": rows,
        })
    }
}

pub fn assemble_delta(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    basis: &TestBasis,
) -> Result<DeltaMatrix> {
    assemble_delta_with(Convention::Standard, measure, lag, nu, basis)
}

pub fn assemble_delta_with(
    conv: Convention,
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    basis: &TestBasis,
) -> Result<DeltaMatrix> {
    if basis.jets().iter().any(|j| j.points() != measure.len() || j.dim() != measure.dim()) {
        return Err(CvpError::ShapeError("test basis does not match the measure".into()));
    }
    let matrix = bilinear_on_atoms(
        conv,
        measure.points(),
        measure.weights(),
        measure.weights(),
        lag,
        nu,
        basis.jets(),
    )?;
    Ok(DeltaMatrix {
        matrix,
        nu,
        convention: conv,
        fingerprint: measure.fingerprint(),
        basis: basis.clone(),
        weights: measure.weights().to_vec(),
        dim: measure.dim(),
    })
}

/// Thin SVD of `a`, padded with zero rows so that `V` spans the whole column space.
fn full_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (r, c) = a.shape();
    let padded = if r < c {
        let mut p = DMatrix::zeros(c, c);
        p.view_mut((0, 0), (r, c)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    // nalgebra returns singular values unsorted; sort descending with their vectors.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|x, y| svd.singular_values[*y].total_cmp(&svd.singular_values[*x]));
    let s = DVector::from_iterator(order.len(), order.iter().map(|k| svd.singular_values[*k]));
    let u_sorted = DMatrix::from_columns(&order.iter().map(|k| u.column(*k).into_owned()).collect::<Vec<_>>());
    let v_sorted = DMatrix::from_columns(&order.iter().map(|k| vt.row(*k).transpose()).collect::<Vec<_>>());
    let u_trim = u_sorted.rows(0, r).into_owned();
    (u_trim, s, v_sorted)
}

/// Orthonormal basis of `ker Δ`.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    pub jets: Vec<Jet>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

impl KernelBasis {
    pub fn len(&self) -> usize {
        self.jets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jets.is_empty()
    }

    /// Orthogonal projection of a jet onto the kernel.
    pub fn project(&self, jet: &Jet) -> Jet {
        let mut out = Jet::zeros(jet.points(), jet.dim());
        for k in &self.jets {
            out.axpy(k.dot(jet), k).expect("kernel jets share the shape");
        }
        out
    }

    pub fn singular_values_csv(&self) -> String {
        let mut s = String::from("index,singular_value\n");
        for (i, v) in self.singular_values.iter().enumerate() {
            s.push_str(&format!("{i},{v:e}\n"));
        }
        s
    }
}

pub fn kernel_basis(delta: &DeltaMatrix, tol_rank: f64) -> KernelBasis {
    let n = delta.matrix.ncols();
    let (_, s, v) = full_svd(&delta.matrix);
    let smax = s.iter().copied().fold(0.0, f64::max);
    let rank = if smax == 0.0 { 0 } else { s.iter().filter(|x| **x > tol_rank * smax).count() };
    let jets = (rank..n)
        .map(|k| Jet::from_vector(delta.dim(), &v.column(k).into_owned()).expect("layout matches"))
        .collect();
    KernelBasis { jets, singular_values: s.iter().copied().collect(), rank }
}

/// Gauge choice for a Green's operator.
#[derive(Debug, Clone, PartialEq)]
pub enum Gauge {
    MinNorm,
    /// Kernel jet added to every solution.
    Offset(Jet),
}

/// Off-range parts below this multiple of `max(σ_max, 1)` are rounding noise.
pub const RANGE_ROUNDOFF: f64 = 1e-12;

/// Rank-revealing pseudo-inverse `A⁺` with the orthonormal range of `A`.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub pinv: DMatrix<f64>,
    pub range: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl PseudoInverse {
    pub fn new(a: &DMatrix<f64>, tol_rank: f64) -> Self {
        let (u, s, v) = full_svd(a);
        let smax = s.iter().copied().fold(0.0, f64::max);
        let rank = if smax == 0.0 { 0 } else { s.iter().filter(|x| **x > tol_rank * smax).count() };
        let (k, n) = a.shape();
        let mut pinv = DMatrix::zeros(n, k);
        for r in 0..rank {
            pinv += v.column(r) * u.column(r).transpose() / s[r];
        }
        let range = u.columns(0, rank).into_owned();
        Self { pinv, range, singular_values: s.iter().copied().collect() }
    }

    pub fn rank(&self) -> usize {
        self.range.ncols()
    }

    pub fn project_range(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.range * (self.range.transpose() * b)
    }

    /// `‖b − proj_range b‖ / ‖b‖`, zero when the off-range part is at roundoff level of `‖A‖`.
    pub fn out_of_range(&self, b: &DVector<f64>) -> f64 {
        let off = (b - self.project_range(b)).norm();
        let smax = self.singular_values.iter().copied().fold(0.0, f64::max);
        if off <= RANGE_ROUNDOFF * smax.max(1.0) {
            0.0
        } else {
            off / b.norm()
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.pinv * b
    }
}

/// `S = −Δ⁺` with a range check.
#[derive(Debug, Clone)]
pub struct GreensOperator {
    delta: DeltaMatrix,
    inverse: PseudoInverse,
    pub gauge: Gauge,
    pub tol_solve: f64,
    pub strict: bool,
}

/// Result of applying a Green's operator.
#[derive(Debug, Clone)]
pub struct GreenSolution {
    pub jet: Jet,
    /// `‖v − proj_range v‖ / ‖v‖` (zero for `v = 0`).
    pub out_of_range: f64,
}

impl GreensOperator {
    pub fn new(delta: &DeltaMatrix, tol_rank: f64, tol_solve: f64, strict: bool, gauge: Gauge) -> Result<Self> {
        if let Gauge::Offset(k) = &gauge {
            if k.points() != delta.points() || k.dim() != delta.dim() {
                return Err(CvpError::ShapeError("gauge offset does not match the jet space".into()));
            }
            let r = (&delta.matrix * k.to_vector()).amax();
            if r > tol_rank * delta.spectral_norm().max(1.0) {
                return Err(CvpError::NotLinearized { residual: r });
            }
        }
        let inverse = PseudoInverse::new(&delta.matrix, tol_rank);
        Ok(Self { delta: delta.clone(), inverse, gauge, tol_solve, strict })
    }

    pub fn min_norm(delta: &DeltaMatrix) -> Result<Self> {
        Self::new(delta, TOL_RANK, TOL_SOLVE, false, Gauge::MinNorm)
    }

    pub fn delta(&self) -> &DeltaMatrix {
        &self.delta
    }

    pub fn rank(&self) -> usize {
        self.inverse.rank()
    }

    /// Orthogonal projection onto `range(Δ)` in the test-space representation.
    pub fn project_range(&self, b: &DVector<f64>) -> DVector<f64> {
        self.inverse.project_range(b)
    }

    /// Solves in the test-space representation.
    pub fn apply_form(&self, b: &DVector<f64>) -> Result<GreenSolution> {
        let out_of_range = self.inverse.out_of_range(b);
        if self.strict && out_of_range > self.tol_solve {
            return Err(CvpError::OutOfRange { residual: out_of_range });
        }
        if out_of_range > self.tol_solve {
            log::warn!("discarding out-of-range component (relative {out_of_range:e})");
        }
        let mut jet = Jet::from_vector(self.delta.dim(), &(-self.inverse.solve(b)))?;
        if let Gauge::Offset(k) = &self.gauge {
            jet.axpy(1.0, k)?;
        }
        Ok(GreenSolution { jet, out_of_range })
    }

    pub fn apply(&self, v: &DualJet) -> Result<GreenSolution> {
        self.apply_form(&self.delta.dual_to_form(v)?)
    }
}

/// `greens_apply(S, v)`: `w = S v` with `Δ S v = −proj_range(v)`.
pub fn greens_apply(greens: &GreensOperator, v: &DualJet) -> Result<GreenSolution> {
    greens.apply(v)
}
