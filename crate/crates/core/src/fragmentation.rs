//! Measures split into `L` differently perturbed subsystems.
//!
//! Multi-jets are flattened subsystem-major: the jet of subsystem `a` at support point `i`
//! sits at flat point index `a·N + i`. All fragmented operators use the breve convention,
//! so scalar jet components act only through the weights of the integrated points.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::el::ell_hessian;
use crate::error::{CvpError, Result};
use crate::expansion::compositions;
use crate::fit::{residual_exponent, SlopeReport, RESIDUAL_FLOOR};
use crate::jet::{DualJet, Jet, TestBasis};
use crate::lagrangian::LagrangianModel;
use crate::linops::{assemble_delta, bilinear_on_atoms, lifted_on_atoms, Convention, DeltaMatrix, PseudoInverse};
use crate::linops::TOL_RANK;
use crate::measure::DiscreteMeasure;

/// One jet per subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiJet {
    jets: Vec<Jet>,
}

impl MultiJet {
    pub fn new(jets: Vec<Jet>) -> Result<Self> {
        let Some(first) = jets.first() else {
            return Err(CvpError::ArgError("a multi-jet needs at least one subsystem".into()));
        };
        if jets.iter().any(|j| j.points() != first.points() || j.dim() != first.dim()) {
            return Err(CvpError::ShapeError("subsystem jets differ in shape".into()));
        }
        Ok(Self { jets })
    }

    pub fn zeros(subsystems: usize, points: usize, dim: usize) -> Self {
        Self { jets: vec![Jet::zeros(points, dim); subsystems] }
    }

    /// The same jet in every subsystem.
    pub fn replicated(jet: &Jet, subsystems: usize) -> Self {
        Self { jets: vec![jet.clone(); subsystems] }
    }

    /// `pattern[a] · jet` in subsystem `a`.
    pub fn patterned(pattern: &[f64], jet: &Jet) -> Self {
        Self { jets: pattern.iter().map(|s| jet.scaled(*s)).collect() }
    }

    pub fn subsystems(&self) -> usize {
        self.jets.len()
    }

    pub fn points(&self) -> usize {
        self.jets[0].points()
    }

    pub fn dim(&self) -> usize {
        self.jets[0].dim()
    }

    pub fn jets(&self) -> &[Jet] {
        &self.jets
    }

    pub fn jet(&self, a: usize) -> &Jet {
        &self.jets[a]
    }

    pub fn flatten(&self) -> Jet {
        let data: Vec<f64> = self.jets.iter().flat_map(|j| j.as_slice().iter().copied()).collect();
        Jet::from_flat(self.dim(), data).expect("subsystem jets share the layout")
    }

    pub fn from_flat(subsystems: usize, flat: &Jet) -> Result<Self> {
        if subsystems == 0 || flat.points() % subsystems != 0 {
            return Err(CvpError::ShapeError(format!(
                "{} flat points do not split into {subsystems} subsystems",
                flat.points()
            )));
        }
        let chunk = flat.as_slice().len() / subsystems;
        let jets = flat
            .as_slice()
            .chunks(chunk)
            .map(|c| Jet::from_flat(flat.dim(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(jets)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.subsystems() != other.subsystems() {
            return Err(CvpError::ShapeError("multi-jets differ in subsystem count".into()));
        }
        let jets = self.jets.iter().zip(&other.jets).map(|(a, b)| a.add(b)).collect::<Result<Vec<_>>>()?;
        Ok(Self { jets })
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { jets: self.jets.iter().map(|j| j.scaled(s)).collect() }
    }

    /// Multiplies every vector component by `s`, leaving scalar components untouched.
    pub fn vectors_scaled(&self, s: f64) -> Self {
        let jets = self
            .jets
            .iter()
            .map(|j| {
                let mut out = j.clone();
                for i in 0..j.points() {
                    let v: Vec<f64> = j.vector(i).iter().map(|x| x * s).collect();
                    out.set_vector(i, &v);
                }
                out
            })
            .collect();
        Self { jets }
    }

    pub fn is_zero(&self) -> bool {
        self.jets.iter().all(Jet::is_zero)
    }

    pub fn has_zero_scalars(&self) -> bool {
        self.jets.iter().all(Jet::has_zero_scalars)
    }

    pub fn max_abs(&self) -> f64 {
        self.jets.iter().map(Jet::max_abs).fold(0.0, f64::max)
    }
}

/// `𝔲 = ū + 𝔲_F` with `ū` the subsystem average.
pub fn split_mean_fluct(mj: &MultiJet) -> (Jet, MultiJet) {
    let l = mj.subsystems() as f64;
    let mut mean = Jet::zeros(mj.points(), mj.dim());
    for j in mj.jets() {
        mean.axpy(1.0 / l, j).expect("subsystem jets share the layout");
    }
    let fluct = mj.jets().iter().map(|j| j.sub(&mean).expect("same layout")).collect();
    (mean, MultiJet { jets: fluct })
}

/// Orthonormal zero-sum patterns on `L` subsystems (Helmert contrasts).
pub fn fluctuation_patterns(subsystems: usize) -> Vec<Vec<f64>> {
    (1..subsystems)
        .map(|k| {
            let norm = ((k * (k + 1)) as f64).sqrt();
            (0..subsystems)
                .map(|a| match a.cmp(&k) {
                    std::cmp::Ordering::Less => 1.0 / norm,
                    std::cmp::Ordering::Equal => -(k as f64) / norm,
                    std::cmp::Ordering::Greater => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Prescribed leading orders of a fragmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentationAnsatz {
    /// Unperturbed subsystem weights with mean one.
    pub weights: Vec<f64>,
    /// Order at which the mean and complement parts enter.
    pub mean_order: u32,
    /// Order at which the linearized fluctuation enters.
    pub fluct_order: u32,
    pub mean_lin: Jet,
    pub complement: MultiJet,
    pub lin_fluct: MultiJet,
}

impl FragmentationAnsatz {
    /// Unit weights and vanishing jets.
    pub fn trivial(subsystems: usize, points: usize, dim: usize) -> Self {
        Self {
            weights: vec![1.0; subsystems],
            mean_order: 1,
            fluct_order: 1,
            mean_lin: Jet::zeros(points, dim),
            complement: MultiJet::zeros(subsystems, points, dim),
            lin_fluct: MultiJet::zeros(subsystems, points, dim),
        }
    }

    pub fn subsystems(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self, measure: &DiscreteMeasure) -> Result<()> {
        let l = self.subsystems();
        if l == 0 {
            return Err(CvpError::ArgError("at least one subsystem is required".into()));
        }
        if self.weights.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(CvpError::ArgError("subsystem weights must be non-negative".into()));
        }
        let mean = self.weights.iter().sum::<f64>() / l as f64;
        if (mean - 1.0).abs() > 1e-14 {
            return Err(CvpError::ArgError(format!("subsystem weights average to {mean}, not 1")));
        }
        if self.mean_order == 0 || self.fluct_order == 0 || self.mean_order.min(self.fluct_order) != 1 {
            return Err(CvpError::ArgError(format!(
                "orders ({}, {}) must be positive with minimum 1",
                self.mean_order, self.fluct_order
            )));
        }
        let shape_ok = |j: &Jet| j.points() == measure.len() && j.dim() == measure.dim();
        if !shape_ok(&self.mean_lin)
            || self.complement.subsystems() != l
            || self.lin_fluct.subsystems() != l
            || !self.complement.jets().iter().all(shape_ok)
            || !self.lin_fluct.jets().iter().all(shape_ok)
        {
            return Err(CvpError::ShapeError("ansatz jets do not match the measure and subsystem count".into()));
        }
        for (name, mj) in [("complement", &self.complement), ("linearized fluctuation", &self.lin_fluct)] {
            if !mj.has_zero_scalars() {
                return Err(CvpError::ArgError(format!("{name} jet must have vanishing scalar part")));
            }
            let (mean, _) = split_mean_fluct(mj);
            if mean.max_abs() > 1e-12 * (1.0 + mj.max_abs()) {
                return Err(CvpError::ArgError(format!("{name} jet must have zero subsystem mean")));
            }
        }
        Ok(())
    }

    /// `λ^{mean_order}(v̄ + v_c) + λ^{fluct_order} v_F` per subsystem.
    pub fn first_order(&self, lambda: f64) -> MultiJet {
        let lp = lambda.powi(self.mean_order as i32);
        let lq = lambda.powi(self.fluct_order as i32);
        let mean = MultiJet::replicated(&self.mean_lin, self.subsystems());
        mean.add(&self.complement)
            .expect("validated shapes")
            .scaled(lp)
            .add(&self.lin_fluct.scaled(lq))
            .expect("validated shapes")
    }
}

/// `ρ̃ = (1/L) Σ_a (F_a)_*(f_a ρ)` as a list of weighted atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentedMeasure {
    base: DiscreteMeasure,
    subsystem_weights: Vec<f64>,
    config: MultiJet,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    test_weights: Vec<f64>,
}

impl FragmentedMeasure {
    /// `config` holds per subsystem the log-weight (scalar) and shift (vector) fields.
    pub fn new(base: &DiscreteMeasure, subsystem_weights: &[f64], config: MultiJet) -> Result<Self> {
        let l = subsystem_weights.len();
        if config.subsystems() != l || config.points() != base.len() || config.dim() != base.dim() {
            return Err(CvpError::ShapeError("configuration does not match the base measure".into()));
        }
        let mut points = Vec::with_capacity(l * base.len());
        let mut weights = Vec::with_capacity(l * base.len());
        let mut test_weights = Vec::with_capacity(l * base.len());
        for (a, f) in subsystem_weights.iter().enumerate() {
            let jet = config.jet(a);
            for i in 0..base.len() {
                let w = f * base.weight(i) * jet.scalar(i).exp() / l as f64;
                if !w.is_finite() {
                    return Err(CvpError::Numerical(format!("weight overflow in subsystem {a} at point {i}")));
                }
                points.push(base.point(i).iter().zip(jet.vector(i)).map(|(x, s)| x + s).collect());
                weights.push(w);
                test_weights.push(base.weight(i) / l as f64);
            }
        }
        Ok(Self {
            base: base.clone(),
            subsystem_weights: subsystem_weights.to_vec(),
            config,
            points,
            weights,
            test_weights,
        })
    }

    pub fn base(&self) -> &DiscreteMeasure {
        &self.base
    }

    pub fn subsystems(&self) -> usize {
        self.subsystem_weights.len()
    }

    pub fn subsystem_weights(&self) -> &[f64] {
        &self.subsystem_weights
    }

    pub fn config(&self) -> &MultiJet {
        &self.config
    }

    /// Atom positions `F_a(x_i)`, subsystem-major.
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Atom weights `f_a(x_i) ρ_i / L`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights `ρ_i / L` of the test side of the weak EL equations.
    pub fn test_weights(&self) -> &[f64] {
        &self.test_weights
    }

    pub fn total_volume(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Merged point measure; atoms of zero weight are dropped.
    pub fn flatten(&self) -> Result<DiscreteMeasure> {
        let (p, w): (Vec<Vec<f64>>, Vec<f64>) = self
            .points
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(p, w)| (p.clone(), *w))
            .unzip();
        DiscreteMeasure::merged(p, w)
    }

    /// `ℓ̃(z) = Σ_atoms w ℒ(z, ·) − ν/2`.
    pub fn ell(&self, lag: &LagrangianModel, nu: f64, z: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for (y, w) in self.points.iter().zip(&self.weights) {
            if *w != 0.0 {
                s += w * lag.value(z, y)?;
            }
        }
        Ok(s - nu / 2.0)
    }

    pub fn ell_gradient(&self, lag: &LagrangianModel, z: &[f64]) -> Result<Vec<f64>> {
        let m = lag.dim();
        let zero = vec![0u32; m];
        let mut g = vec![0.0; m];
        for (y, w) in self.points.iter().zip(&self.weights) {
            if *w == 0.0 {
                continue;
            }
            for (k, gk) in g.iter_mut().enumerate() {
                let mut alpha = zero.clone();
                alpha[k] = 1;
                *gk += w * lag.partial(z, y, &alpha, &zero)?;
            }
        }
        Ok(g)
    }

    pub fn ell_hessian(&self, lag: &LagrangianModel, z: &[f64]) -> Result<DMatrix<f64>> {
        let m = lag.dim();
        let zero = vec![0u32; m];
        let mut h = DMatrix::zeros(m, m);
        for (y, w) in self.points.iter().zip(&self.weights) {
            if *w == 0.0 {
                continue;
            }
            for r in 0..m {
                for c in r..m {
                    let mut alpha = zero.clone();
                    alpha[r] += 1;
                    alpha[c] += 1;
                    let v = w * lag.partial(z, y, &alpha, &zero)?;
                    h[(r, c)] += v;
                    if r != c {
                        h[(c, r)] += v;
                    }
                }
            }
        }
        Ok(h)
    }

    /// `(ℓ̃, ∇ℓ̃)` at every atom.
    pub fn ell_dual_jet(&self, lag: &LagrangianModel, nu: f64) -> Result<DualJet> {
        let mut d = DualJet::zeros(self.points.len(), self.base.dim());
        for (k, z) in self.points.iter().enumerate() {
            d.set_scalar(k, self.ell(lag, nu, z)?);
            d.set_vector(k, &self.ell_gradient(lag, z)?);
        }
        Ok(d)
    }

    /// `Σ_{a,i} (ρ_i/L) (a ℓ̃ + u·∇ℓ̃)(F_a(x_i))` for each test multi-jet.
    pub fn residuals(&self, lag: &LagrangianModel, nu: f64, tests: &[MultiJet]) -> Result<Vec<f64>> {
        let dual = self.ell_dual_jet(lag, nu)?;
        tests
            .iter()
            .map(|t| {
                let per = crate::jet::pairing(&dual, &t.flatten())?;
                Ok(per.iter().zip(&self.test_weights).map(|(p, w)| p * w).sum())
            })
            .collect()
    }

    /// Derivative of [`Self::residuals`] under `log f += t b`, `F += t v` for every unit
    /// configuration direction; rows follow `tests`, columns the flat multi-jet layout.
    pub fn jacobian(&self, lag: &LagrangianModel, nu: f64, tests: &[MultiJet]) -> Result<DMatrix<f64>> {
        let flat: Vec<Jet> = tests.iter().map(MultiJet::flatten).collect();
        bilinear_on_atoms(Convention::Breve, &self.points, &self.weights, &self.test_weights, lag, nu, &flat)
    }

    /// `⟨𝔲, Δ̃ 𝔳⟩` for all pairs from `tests`.
    pub fn form(&self, lag: &LagrangianModel, nu: f64, tests: &[MultiJet]) -> Result<DMatrix<f64>> {
        let jac = self.jacobian(lag, nu, tests)?;
        let cols: Vec<DVector<f64>> = tests.iter().map(|t| t.flatten().to_vector()).collect();
        if cols.is_empty() {
            return Ok(DMatrix::zeros(0, 0));
        }
        Ok(jac * DMatrix::from_columns(&cols))
    }

    /// Atom table `subsystem, x_1..x_m, weight, lambda`.
    pub fn support_csv(&self, lambda: f64) -> String {
        let m = self.base.dim();
        let mut s = String::from("subsystem");
        for k in 0..m {
            s.push_str(&format!(",x{}", k + 1));
        }
        s.push_str(",weight,lambda\n");
        let n = self.base.len();
        for (k, (p, w)) in self.points.iter().zip(&self.weights).enumerate() {
            s.push_str(&format!("{}", k / n + 1));
            for v in p {
                s.push_str(&format!(",{v:e}"));
            }
            s.push_str(&format!(",{w:e},{lambda:e}\n"));
        }
        s
    }

    /// Values of `ℓ̃` along `anchor + t e_axis` for `t` on a uniform grid in `[lo, hi]`.
    pub fn ell_profile(
        &self,
        lag: &LagrangianModel,
        nu: f64,
        anchor: &[f64],
        axis: usize,
        lo: f64,
        hi: f64,
        samples: usize,
    ) -> Result<Vec<(f64, f64)>> {
        if axis >= anchor.len() || samples < 2 {
            return Err(CvpError::ArgError("profile needs a valid axis and at least 2 samples".into()));
        }
        (0..samples)
            .map(|k| {
                let t = lo + (hi - lo) * k as f64 / (samples - 1) as f64;
                let mut z = anchor.to_vec();
                z[axis] = t;
                Ok((t, self.ell(lag, nu, &z)?))
            })
            .collect()
    }
}

/// `fragment_measure`: push-forward of each subsystem by the first-order ansatz at `λ`.
pub fn fragment_measure(measure: &DiscreteMeasure, ansatz: &FragmentationAnsatz, lambda: f64) -> Result<FragmentedMeasure> {
    ansatz.validate(measure)?;
    FragmentedMeasure::new(measure, &ansatz.weights, ansatz.first_order(lambda))
}

/// The mean-sector operator, identical to the unfragmented one.
pub fn assemble_delta_bar(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    basis: &TestBasis,
) -> Result<DeltaMatrix> {
    assemble_delta(measure, lag, nu, basis)
}

/// Block-diagonal form `(1/L) Σ_a ρ_i D_u D_v ℓ(x_i)` on vector fluctuations.
#[derive(Debug, Clone)]
pub struct FluctuationOperator {
    /// Square, size `L·N·m`, subsystem-major then point then coordinate.
    pub matrix: DMatrix<f64>,
    /// Hessian of `ℓ` at each support point.
    pub hessians: Vec<DMatrix<f64>>,
    pub subsystems: usize,
}

pub fn assemble_delta_f(measure: &DiscreteMeasure, lag: &LagrangianModel, subsystems: usize) -> Result<FluctuationOperator> {
    if subsystems == 0 {
        return Err(CvpError::ArgError("at least one subsystem is required".into()));
    }
    lag.require_order(2)?;
    let hessians = measure.points().iter().map(|x| ell_hessian(measure, lag, x)).collect::<Result<Vec<_>>>()?;
    let (n, m) = (measure.len(), measure.dim());
    let mut matrix = DMatrix::zeros(subsystems * n * m, subsystems * n * m);
    for a in 0..subsystems {
        for (i, h) in hessians.iter().enumerate() {
            let off = (a * n + i) * m;
            let block = h * (measure.weight(i) / subsystems as f64);
            matrix.view_mut((off, off), (m, m)).copy_from(&block);
        }
    }
    Ok(FluctuationOperator { matrix, hessians, subsystems })
}

/// Orthonormal bases of the mean, complement and linearized-fluctuation sectors.
#[derive(Debug, Clone)]
pub struct SectorBases {
    pub mean: Vec<MultiJet>,
    pub complement: Vec<MultiJet>,
    /// Scalar fluctuations first, then vector fluctuations along Hessian null directions.
    pub lin_fluct: Vec<MultiJet>,
    /// Number of scalar elements at the start of `lin_fluct`.
    pub lin_fluct_scalars: usize,
    /// Hessian null directions per support point.
    pub null_directions: Vec<Vec<Vec<f64>>>,
}

pub fn sector_bases(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    subsystems: usize,
    tol_rank: f64,
) -> Result<SectorBases> {
    let op = assemble_delta_f(measure, lag, subsystems)?;
    let (n, m) = (measure.len(), measure.dim());
    let eigens: Vec<_> = op.hessians.iter().map(|h| h.clone().symmetric_eigen()).collect();
    let scale = eigens.iter().flat_map(|e| e.eigenvalues.iter().map(|v| v.abs())).fold(0.0, f64::max);
    let mut null_directions = Vec::with_capacity(n);
    let mut range_directions = Vec::with_capacity(n);
    for e in &eigens {
        let (mut null, mut range) = (Vec::new(), Vec::new());
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|a, b| e.eigenvalues[*a].abs().total_cmp(&e.eigenvalues[*b].abs()));
        for k in order {
            let mut v: Vec<f64> = e.eigenvectors.column(k).iter().copied().collect();
            if let Some(pivot) = v.iter().copied().find(|x| x.abs() > 1e-12) {
                if pivot < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            if e.eigenvalues[k].abs() <= tol_rank * scale {
                null.push(v);
            } else {
                range.push(v);
            }
        }
        null_directions.push(null);
        range_directions.push(range);
    }
    let vector_jet = |i: usize, dir: &[f64]| {
        let mut j = Jet::zeros(n, m);
        j.set_vector(i, dir);
        j
    };
    let patterns = fluctuation_patterns(subsystems);
    let inv = 1.0 / (subsystems as f64).sqrt();
    let mean = (0..n * (1 + m))
        .map(|c| MultiJet::replicated(&Jet::unit(n, m, c).scaled(inv), subsystems))
        .collect();
    let mut lin_fluct = Vec::new();
    for h in &patterns {
        for i in 0..n {
            lin_fluct.push(MultiJet::patterned(h, &Jet::unit(n, m, i * (1 + m))));
        }
    }
    let lin_fluct_scalars = lin_fluct.len();
    let mut complement = Vec::new();
    for h in &patterns {
        for i in 0..n {
            for d in &null_directions[i] {
                lin_fluct.push(MultiJet::patterned(h, &vector_jet(i, d)));
            }
            for d in &range_directions[i] {
                complement.push(MultiJet::patterned(h, &vector_jet(i, d)));
            }
        }
    }
    Ok(SectorBases { mean, complement, lin_fluct, lin_fluct_scalars, null_directions })
}

/// Orthonormal basis of the linearized fluctuations.
pub fn lin_fluct_basis(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    subsystems: usize,
    tol_rank: f64,
) -> Result<Vec<MultiJet>> {
    Ok(sector_bases(measure, lag, subsystems, tol_rank)?.lin_fluct)
}

/// Everything needed to study one fragmentation.
#[derive(Debug, Clone)]
pub struct FragmentationScenario {
    pub measure: DiscreteMeasure,
    pub lagrangian: LagrangianModel,
    pub nu: f64,
    pub ansatz: FragmentationAnsatz,
    pub tol_rank: f64,
}

impl FragmentationScenario {
    pub fn new(measure: DiscreteMeasure, lagrangian: LagrangianModel, nu: f64, ansatz: FragmentationAnsatz) -> Result<Self> {
        ansatz.validate(&measure)?;
        if lagrangian.dim() != measure.dim() {
            return Err(CvpError::ShapeError("Lagrangian and measure dimensions differ".into()));
        }
        Ok(Self { measure, lagrangian, nu, ansatz, tol_rank: TOL_RANK })
    }

    pub fn subsystems(&self) -> usize {
        self.ansatz.subsystems()
    }

    pub fn fragment(&self, lambda: f64) -> Result<FragmentedMeasure> {
        fragment_measure(&self.measure, &self.ansatz, lambda)
    }

    pub fn bases(&self) -> Result<SectorBases> {
        sector_bases(&self.measure, &self.lagrangian, self.subsystems(), self.tol_rank)
    }
}

/// The two-subsystem fragmentation of the Dirac measure at the origin in the plane model.
///
/// Subsystem weights are `(f, 2 − f)` and the support moves to `λ(±spread, 1)`.
pub fn example52_scenario(first_weight: f64, spread: f64, regularized: bool) -> Result<FragmentationScenario> {
    let name = if regularized { "example52_regularized" } else { "example52" };
    let lag = LagrangianModel::named(name)?;
    let measure = DiscreteMeasure::dirac(vec![0.0, 0.0])?;
    let mean_lin = Jet::from_parts(&[0.0], &[vec![0.0, 1.0]])?;
    let lin = Jet::from_parts(&[0.0], &[vec![spread, 0.0]])?;
    let ansatz = FragmentationAnsatz {
        weights: vec![first_weight, 2.0 - first_weight],
        mean_order: 1,
        fluct_order: 1,
        mean_lin,
        complement: MultiJet::zeros(2, 1, 2),
        lin_fluct: MultiJet::patterned(&[1.0, -1.0], &lin),
    };
    FragmentationScenario::new(measure, lag, 0.0, ansatz)
}

/// The coordinates `𝔲_1 = −𝔲_2 = (a, u¹, 0)` of the plane example, unnormalized.
pub fn example52_lin_fluct_coordinates() -> Vec<MultiJet> {
    let scalar = Jet::from_parts(&[1.0], &[vec![0.0, 0.0]]).expect("static shape");
    let vector = Jet::from_parts(&[0.0], &[vec![1.0, 0.0]]).expect("static shape");
    vec![MultiJet::patterned(&[1.0, -1.0], &scalar), MultiJet::patterned(&[1.0, -1.0], &vector)]
}

/// `⟨𝔲, Δ̃ 𝔳⟩` on `basis` for the first-order fragmented measure at `λ`.
pub fn perturbed_laplacian_lin_fluct(
    scenario: &FragmentationScenario,
    lambda: f64,
    basis: &[MultiJet],
) -> Result<DMatrix<f64>> {
    scenario.fragment(lambda)?.form(&scenario.lagrangian, scenario.nu, basis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    WellPosed,
    IllPosed,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct WellPosednessRow {
    pub lambda: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WellPosednessReport {
    /// Fitted order of the smallest singular value of the rescaled form.
    pub definiteness_order: f64,
    /// Fitted order of the largest singular value.
    pub largest_order: f64,
    pub fit_residual: f64,
    /// Fitted order of the rescaled EL error; infinite if it vanishes.
    pub error_exponent: f64,
    pub error_fit_residual: f64,
    pub verdict: Verdict,
    pub reason: String,
    pub table: Vec<WellPosednessRow>,
}

impl WellPosednessReport {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        for key in ["definiteness_order", "largest_order", "error_exponent"] {
            let x = v[key].as_f64();
            if x.is_none() {
                let raw = match key {
                    "definiteness_order" => self.definiteness_order,
                    "largest_order" => self.largest_order,
                    _ => self.error_exponent,
                };
                v[key] = serde_json::Value::String(format!("{raw}"));
            }
        }
        v
    }
}

/// Rescaled form `⟨(a, λ^q u), Δ̃ (b, λ^q v)⟩` and rescaled EL error on `basis`.
fn rescaled_at(
    scenario: &FragmentationScenario,
    fm: &FragmentedMeasure,
    lambda: f64,
    basis: &[MultiJet],
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let scale = lambda.powi(scenario.ansatz.fluct_order as i32);
    let scaled: Vec<MultiJet> = basis.iter().map(|b| b.vectors_scaled(scale)).collect();
    let form = fm.form(&scenario.lagrangian, scenario.nu, &scaled)?;
    let err = fm.residuals(&scenario.lagrangian, scenario.nu, &scaled)?;
    Ok((form, err))
}

const ORDER_BAND: f64 = 0.2;
const FIT_LIMIT: f64 = 0.1;

/// Fits the order of definiteness and the EL error exponent on `grid`.
pub fn wellposedness_check(scenario: &FragmentationScenario, grid: &[f64]) -> Result<WellPosednessReport> {
    let basis = scenario.bases()?.lin_fluct;
    wellposedness_check_on(scenario, grid, &basis)
}

pub fn wellposedness_check_on(
    scenario: &FragmentationScenario,
    grid: &[f64],
    basis: &[MultiJet],
) -> Result<WellPosednessReport> {
    if grid.len() < 4 || grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(CvpError::ArgError("well-posedness grid needs at least 4 positive points".into()));
    }
    let fluct_order = scenario.ansatz.fluct_order as f64;
    let mut table = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let fm = scenario.fragment(lambda)?;
        let (form, err) = rescaled_at(scenario, &fm, lambda, basis)?;
        let sv = if form.is_empty() { DVector::zeros(0) } else { form.singular_values() };
        table.push(WellPosednessRow {
            lambda,
            sigma_min: sv.iter().copied().fold(f64::INFINITY, f64::min),
            sigma_max: sv.iter().copied().fold(0.0, f64::max),
            error: err.iter().fold(0.0, |m, e| m.max(e.abs())),
        });
    }
    let inconclusive = |reason: &str, table: Vec<WellPosednessRow>| WellPosednessReport {
        definiteness_order: f64::NAN,
        largest_order: f64::NAN,
        fit_residual: f64::NAN,
        error_exponent: f64::NAN,
        error_fit_residual: f64::NAN,
        verdict: Verdict::Inconclusive,
        reason: reason.to_string(),
        table,
    };
    if basis.is_empty() {
        return Ok(inconclusive("no linearized fluctuation directions", table));
    }
    if table.iter().all(|r| r.sigma_max < RESIDUAL_FLOOR) {
        return Ok(inconclusive("the form on the linearized fluctuations vanishes", table));
    }
    if table.iter().any(|r| r.sigma_min < RESIDUAL_FLOOR) {
        return Ok(inconclusive("the form on the linearized fluctuations is degenerate", table));
    }
    let lambdas: Vec<f64> = table.iter().map(|r| r.lambda).collect();
    let smin: Vec<f64> = table.iter().map(|r| r.sigma_min).collect();
    let smax: Vec<f64> = table.iter().map(|r| r.sigma_max).collect();
    let errs: Vec<f64> = table.iter().map(|r| r.error).collect();
    let fit_min = residual_exponent(&lambdas, &smin)?;
    let fit_max = residual_exponent(&lambdas, &smax)?;
    let fit_residual = [&fit_min, &fit_max]
        .iter()
        .filter_map(|f| f.fit.as_ref().map(|x| x.max_residual))
        .fold(0.0, f64::max);
    if fit_residual > FIT_LIMIT {
        return Err(CvpError::InconclusiveFit { residual: fit_residual });
    }
    let err_fit: SlopeReport = residual_exponent(&lambdas, &errs)?;
    let error_fit_residual = err_fit.fit.as_ref().map_or(0.0, |f| f.max_residual);
    if error_fit_residual > FIT_LIMIT {
        return Err(CvpError::InconclusiveFit { residual: error_fit_residual });
    }
    let order = fit_min.slope;
    let (verdict, reason) = if (fit_max.slope - order).abs() > ORDER_BAND {
        (Verdict::IllPosed, format!("singular values scale with different orders {order:.3} and {:.3}", fit_max.slope))
    } else if order <= fluct_order {
        (Verdict::IllPosed, format!("order {order:.3} does not exceed the fluctuation order {fluct_order}"))
    } else if err_fit.slope < order + 1.0 - ORDER_BAND {
        (Verdict::IllPosed, format!("error exponent {:.3} is below {:.3}", err_fit.slope, order + 1.0))
    } else {
        (Verdict::WellPosed, format!("definite of order {order:.3}, error exponent {:.3}", err_fit.slope))
    };
    Ok(WellPosednessReport {
        definiteness_order: order,
        largest_order: fit_max.slope,
        fit_residual,
        error_exponent: err_fit.slope,
        error_fit_residual,
        verdict,
        reason,
        table,
    })
}

/// Settings of the fragmented expansion.
#[derive(Debug, Clone)]
pub struct FragmentOptions {
    pub strict: bool,
    pub tol_solve: f64,
    /// Correction sweeps along the linearized fluctuations when evaluating.
    pub sweeps: usize,
}

impl Default for FragmentOptions {
    fn default() -> Self {
        Self { strict: false, tol_solve: 1e-8, sweeps: 4 }
    }
}

/// Fragmented series: subsystem jets per formal order plus the fluctuation corrector.
#[derive(Debug, Clone)]
pub struct FragmentedSeries {
    pub scenario: FragmentationScenario,
    pub jets: Vec<MultiJet>,
    /// Relative out-of-range part discarded per order, lin-F directions excluded.
    pub out_of_range: Vec<f64>,
    pub bases: SectorBases,
    pub wellposedness: Option<WellPosednessReport>,
    /// `T_F`: inverse of the rescaled form at the reference coupling, divided by `λ_ref^{-r}`.
    pub corrector: Option<DMatrix<f64>>,
    pub reference_lambda: f64,
    pub options: FragmentOptions,
}

/// Per-sector sup-norm residuals of the weak EL equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SectorResiduals {
    pub mean: f64,
    pub complement: f64,
    pub lin_fluct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SectorSlopes {
    pub mean: SlopeReport,
    pub complement: SlopeReport,
    pub lin_fluct: SlopeReport,
}

fn error_term_on_atoms(
    n: usize,
    jets: &[Jet],
    points: &[Vec<f64>],
    weights: &[f64],
    lag: &LagrangianModel,
    nu: f64,
) -> Result<DualJet> {
    let m = lag.dim();
    let mut total = DualJet::zeros(points.len(), m);
    for parts in 2..=n {
        for comp in compositions(n, parts)? {
            let args: Vec<&Jet> = comp.iter().map(|q| &jets[q - 1]).collect();
            if args.iter().any(|j| j.is_zero()) {
                continue;
            }
            total.axpy(1.0, &lifted_on_atoms(Convention::Breve, &args, points, weights, lag, nu)?)?;
        }
    }
    Ok(total)
}

/// Builds the fragmented expansion to formal order `order`.
///
/// Orders above the mean order are solved with the pseudo-inverse of the fragmented
/// operator at `λ = 0`; the linearized fluctuations are corrected at evaluation time
/// with `T_F`, which needs a well-posed fragmentation.
pub fn fragment_expand(
    scenario: &FragmentationScenario,
    order: usize,
    grid: &[f64],
    options: &FragmentOptions,
) -> Result<FragmentedSeries> {
    let ansatz = &scenario.ansatz;
    let (l, n, m) = (scenario.subsystems(), scenario.measure.len(), scenario.measure.dim());
    let lag = &scenario.lagrangian;
    let bases = scenario.bases()?;
    let mut wellposedness = None;
    let mut corrector = None;
    let reference_lambda = if grid.is_empty() { 0.0 } else { grid[grid.len() / 2] };
    if !bases.lin_fluct.is_empty() && !ansatz.lin_fluct.is_zero() {
        let report = wellposedness_check_on(scenario, grid, &bases.lin_fluct)?;
        match report.verdict {
            Verdict::IllPosed => return Err(CvpError::NotWellPosed(report.reason)),
            Verdict::Inconclusive => log::warn!("fragmentation well-posedness inconclusive: {}", report.reason),
            Verdict::WellPosed => {
                let fm = scenario.fragment(reference_lambda)?;
                let (form, _) = rescaled_at(scenario, &fm, reference_lambda, &bases.lin_fluct)?;
                let scaled = form / reference_lambda.powf(report.definiteness_order);
                let inv = scaled
                    .try_inverse()
                    .ok_or_else(|| CvpError::Numerical("rescaled fluctuation form is singular".into()))?;
                corrector = Some(inv);
            }
        }
        wellposedness = Some(report);
    }

    let zero_fm = FragmentedMeasure::new(&scenario.measure, &ansatz.weights, MultiJet::zeros(l, n, m))?;
    let units: Vec<MultiJet> = (0..l * n * (1 + m))
        .map(|c| MultiJet::from_flat(l, &Jet::unit(l * n, m, c)).expect("flat layout"))
        .collect();
    let jac0 = zero_fm.jacobian(lag, scenario.nu, &units)?;
    let inverse = PseudoInverse::new(&jac0, scenario.tol_rank);
    let lin_cols: Vec<DVector<f64>> = bases.lin_fluct.iter().map(|b| b.flatten().to_vector()).collect();

    let p = ansatz.mean_order as usize;
    let q = ansatz.fluct_order as usize;
    let prescribed_mean = MultiJet::replicated(&ansatz.mean_lin, l).add(&ansatz.complement)?;
    let mut jets: Vec<MultiJet> = Vec::with_capacity(order);
    let mut flat: Vec<Jet> = Vec::with_capacity(order);
    let mut out_of_range = Vec::with_capacity(order);
    for k in 1..=order {
        let mut w = MultiJet::zeros(l, n, m);
        let mut oor = 0.0;
        if k == p {
            w = w.add(&prescribed_mean)?;
        } else if k > p {
            let e = error_term_on_atoms(k, &flat, zero_fm.points(), zero_fm.weights(), lag, scenario.nu)?;
            let mut b = DVector::zeros(e.as_slice().len());
            for (idx, v) in e.as_slice().iter().enumerate() {
                b[idx] = v * zero_fm.test_weights()[idx / (1 + m)];
            }
            let mut checked = b.clone();
            for u in &lin_cols {
                checked -= u * u.dot(&b);
            }
            oor = inverse.out_of_range(&checked);
            if oor > options.tol_solve {
                if options.strict {
                    return Err(CvpError::OutOfRange { residual: oor });
                }
                log::warn!("fragmented order {k}: discarding out-of-range component (relative {oor:e})");
            }
            let sol = Jet::from_vector(m, &(-inverse.solve(&b)))?;
            w = w.add(&MultiJet::from_flat(l, &sol)?)?;
        }
        if k == q {
            w = w.add(&ansatz.lin_fluct)?;
        }
        flat.push(w.flatten());
        jets.push(w);
        out_of_range.push(oor);
    }
    Ok(FragmentedSeries {
        scenario: scenario.clone(),
        jets,
        out_of_range,
        bases,
        wellposedness,
        corrector,
        reference_lambda,
        options: options.clone(),
    })
}

impl FragmentedSeries {
    pub fn order(&self) -> usize {
        self.jets.len()
    }

    /// `Σ_k λ^k W^(k)` before fluctuation corrections.
    pub fn config_at(&self, lambda: f64) -> MultiJet {
        let s = &self.scenario;
        let mut acc = MultiJet::zeros(s.subsystems(), s.measure.len(), s.measure.dim());
        let mut pow = 1.0;
        for w in &self.jets {
            pow *= lambda;
            acc = acc.add(&w.scaled(pow)).expect("series shapes agree");
        }
        acc
    }

    /// Fragmented measure at `λ` after the fluctuation correction sweeps.
    pub fn evaluate(&self, lambda: f64) -> Result<FragmentedMeasure> {
        let s = &self.scenario;
        let mut config = self.config_at(lambda);
        let mut fm = FragmentedMeasure::new(&s.measure, &s.ansatz.weights, config.clone())?;
        let (Some(corrector), Some(report)) = (&self.corrector, &self.wellposedness) else {
            return Ok(fm);
        };
        let scale = lambda.powi(s.ansatz.fluct_order as i32);
        let scaled: Vec<MultiJet> = self.bases.lin_fluct.iter().map(|b| b.vectors_scaled(scale)).collect();
        let denom = lambda.powf(report.definiteness_order);
        for _ in 0..self.options.sweeps {
            let err = DVector::from_vec(fm.residuals(&s.lagrangian, s.nu, &scaled)?);
            if err.amax() == 0.0 {
                break;
            }
            let delta = -(corrector * err) / denom;
            for (d, b) in delta.iter().zip(&scaled) {
                config = config.add(&b.scaled(*d))?;
            }
            fm = FragmentedMeasure::new(&s.measure, &s.ansatz.weights, config.clone())?;
        }
        Ok(fm)
    }

    pub fn sector_residuals(&self, lambda: f64) -> Result<SectorResiduals> {
        let s = &self.scenario;
        let fm = self.evaluate(lambda)?;
        let scale = lambda.powi(s.ansatz.fluct_order as i32);
        let scaled: Vec<MultiJet> = self.bases.lin_fluct.iter().map(|b| b.vectors_scaled(scale)).collect();
        let sup = |v: Vec<f64>| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Ok(SectorResiduals {
            mean: sup(fm.residuals(&s.lagrangian, s.nu, &self.bases.mean)?),
            complement: sup(fm.residuals(&s.lagrangian, s.nu, &self.bases.complement)?),
            lin_fluct: sup(fm.residuals(&s.lagrangian, s.nu, &scaled)?),
        })
    }

    pub fn sector_slopes(&self, grid: &[f64]) -> Result<SectorSlopes> {
        let rows = grid.iter().map(|l| self.sector_residuals(*l)).collect::<Result<Vec<_>>>()?;
        let col = |f: fn(&SectorResiduals) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        Ok(SectorSlopes {
            mean: residual_exponent(grid, &col(|r| r.mean))?,
            complement: residual_exponent(grid, &col(|r| r.complement))?,
            lin_fluct: residual_exponent(grid, &col(|r| r.lin_fluct))?,
        })
    }
}
