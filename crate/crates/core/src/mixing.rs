//! Microscopic mixing: subsystem unitaries acting on the wave evaluation operator, and the
//! minimization of `Σ_a |(Uv)_a|⁴` over groups of unitaries.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cfs::{complex_matrix_to_json, CMatrix, CfsSystem, WaveEvaluation, C64};
use crate::error::{CvpError, Result};

pub type CVector = DVector<C64>;

/// Tolerance for unitarity of inputs to the functional.
pub const TOL_UNITARY: f64 = 1e-8;
/// Tolerance for `|(Uv)_a| = 1` in the decomposition.
pub const TOL_STRATUM: f64 = 1e-8;
/// Number of group elements sampled to probe an orbit.
pub const ORBIT_SAMPLES: usize = 64;

/// `max |U†U − 1|`.
pub fn unitary_defect(u: &CMatrix) -> f64 {
    if !u.is_square() {
        return f64::INFINITY;
    }
    let id = CMatrix::identity(u.nrows(), u.ncols());
    (u.adjoint() * u - id).iter().fold(0.0, |a, v| a.max(v.norm()))
}

pub fn check_unitary(u: &CMatrix, tol: f64) -> Result<()> {
    let defect = unitary_defect(u);
    if defect > tol {
        return Err(CvpError::NotUnitary { defect });
    }
    Ok(())
}

fn skew_part(m: &CMatrix) -> CMatrix {
    (m - m.adjoint()) * C64::new(0.5, 0.0)
}

/// Haar-distributed unitary from the QR decomposition of a complex Gaussian matrix.
pub fn haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) / 2f64.sqrt()
    });
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let phases = CVector::from_fn(dim, |i, _| {
        let d = r[(i, i)];
        if d.norm() == 0.0 {
            C64::new(1.0, 0.0)
        } else {
            d / d.norm()
        }
    });
    q * CMatrix::from_diagonal(&phases)
}

/// Random anti-Hermitian matrix with Gaussian entries, unit Frobenius norm.
pub fn random_anti_hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let k = skew_part(&g);
    let norm = k.norm();
    k / C64::new(norm, 0.0)
}

/// `v = (1, …, 1)`.
pub fn reference_vector(subsystems: usize) -> CVector {
    CVector::from_element(subsystems, C64::new(1.0, 0.0))
}

/// `x ↦ V x V*` on every point.
pub fn unitary_pushforward(system: &CfsSystem, v: &CMatrix) -> Result<CfsSystem> {
    check_unitary(v, 1e-10)?;
    if v.nrows() != system.params.hilbert_dim {
        return Err(CvpError::ShapeError("unitary does not act on the Hilbert space".into()));
    }
    let points = system.points.iter().map(|p| p.conjugated(v)).collect();
    Ok(CfsSystem { params: system.params, points, weights: system.weights.clone() })
}

/// Subsystem unitaries `V_a` twisting a wave evaluation operator.
#[derive(Debug, Clone)]
pub struct MixingSystem {
    pub unitaries: Vec<CMatrix>,
    pub wave: WaveEvaluation,
}

impl MixingSystem {
    pub fn new(unitaries: Vec<CMatrix>, wave: WaveEvaluation) -> Result<Self> {
        if unitaries.is_empty() {
            return Err(CvpError::ArgError("at least one subsystem is required".into()));
        }
        let f = wave.params.hilbert_dim;
        for u in &unitaries {
            if u.shape() != (f, f) {
                return Err(CvpError::ShapeError(format!("subsystem unitaries must be {f}×{f}")));
            }
            check_unitary(u, 1e-10)?;
        }
        Ok(Self { unitaries, wave })
    }

    pub fn subsystems(&self) -> usize {
        self.unitaries.len()
    }

    /// `P^{a,b}(xᵢ, xⱼ) = −Ψ(xᵢ) V_a V_b* Ψ(xⱼ)*`.
    pub fn mixed_kernel(&self, a: usize, b: usize, i: usize, j: usize) -> Result<CMatrix> {
        let l = self.subsystems();
        let points = self.wave.maps.len();
        if a >= l || b >= l || i >= points || j >= points {
            return Err(CvpError::IndexError(format!(
                "subsystems ({a}, {b}) of {l}, points ({i}, {j}) of {points}"
            )));
        }
        let params = &self.wave.params;
        let twist = &self.unitaries[a] * self.unitaries[b].adjoint();
        Ok(-(&self.wave.maps[i].psi * twist * self.wave.maps[j].adjoint(params)))
    }
}

fn functional_value(u: &CMatrix) -> f64 {
    let w = u * reference_vector(u.ncols());
    w.iter().map(|x| x.norm_sqr() * x.norm_sqr()).sum()
}

/// `Σ_a |(Uv)_a|⁴`.
pub fn mixing_functional(u: &CMatrix) -> Result<f64> {
    check_unitary(u, TOL_UNITARY)?;
    Ok(functional_value(u))
}

/// `max_a ||(Uv)_a| − 1|`.
pub fn stratum_defect(u: &CMatrix) -> f64 {
    let w = u * reference_vector(u.ncols());
    w.iter().fold(0.0, |a, x| a.max((x.norm() - 1.0).abs()))
}

/// Descent direction `skew(4 D w w†)` with `w = Uv`, `D = diag|w|²`.
fn descent_direction(u: &CMatrix) -> CMatrix {
    let w = u * reference_vector(u.ncols());
    let d = CMatrix::from_diagonal(&w.map(|x| C64::new(4.0 * x.norm_sqr(), 0.0)));
    skew_part(&(&w * w.adjoint() * d))
}

/// A compact group of `L×L` unitaries given by generators or by its elements.
#[derive(Debug, Clone)]
pub enum SubgroupSample {
    /// Anti-Hermitian generators of a connected subgroup.
    Generators(Vec<CMatrix>),
    /// An explicit finite list of unitaries.
    Elements(Vec<CMatrix>),
}

impl SubgroupSample {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Self::Generators(gens) => {
                for g in gens {
                    if g.shape() != (dim, dim) {
                        return Err(CvpError::ShapeError(format!("generators must be {dim}×{dim}")));
                    }
                    let defect = (g + g.adjoint()).iter().fold(0.0f64, |a, v| a.max(v.norm()));
                    if defect > 1e-10 {
                        return Err(CvpError::ArgError(format!("generator is not anti-Hermitian (defect {defect:e})")));
                    }
                    check_unitary(&g.clone().exp(), 1e-10)?;
                }
            }
            Self::Elements(elems) => {
                if elems.is_empty() {
                    return Err(CvpError::ArgError("element list is empty".into()));
                }
                for e in elems {
                    if e.shape() != (dim, dim) {
                        return Err(CvpError::ShapeError(format!("elements must be {dim}×{dim}")));
                    }
                    check_unitary(e, 1e-10)?;
                }
            }
        }
        Ok(())
    }

    /// A random element, `exp(Σ cₖ Gₖ)` with standard normal `cₖ` or a uniform pick.
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> CMatrix {
        match self {
            Self::Generators(gens) => {
                let mut x = CMatrix::zeros(dim, dim);
                for g in gens {
                    x += g * C64::new(rng.sample::<f64, _>(StandardNormal), 0.0);
                }
                x.exp()
            }
            Self::Elements(elems) => elems[rng.gen_range(0..elems.len())].clone(),
        }
    }
}

/// The full unitary group or a subgroup.
#[derive(Debug, Clone)]
pub enum Group {
    Full,
    Sub(SubgroupSample),
}

impl Group {
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> CMatrix {
        match self {
            Self::Full => haar_unitary(dim, rng),
            Self::Sub(s) => s.sample(dim, rng),
        }
    }
}

/// Orthogonal projection onto the real span of anti-Hermitian generators.
struct GeneratorProjector {
    gens: Vec<CMatrix>,
    gram_inv: DMatrix<f64>,
}

impl GeneratorProjector {
    fn new(gens: &[CMatrix]) -> Self {
        let k = gens.len();
        let gram = DMatrix::from_fn(k, k, |i, j| real_inner(&gens[i], &gens[j]));
        let gram_inv = gram.pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(k, k));
        Self { gens: gens.to_vec(), gram_inv }
    }

    fn project(&self, m: &CMatrix) -> CMatrix {
        let rhs = DVector::from_iterator(self.gens.len(), self.gens.iter().map(|g| real_inner(g, m)));
        let coef = &self.gram_inv * rhs;
        let mut out = CMatrix::zeros(m.nrows(), m.ncols());
        for (c, g) in coef.iter().zip(&self.gens) {
            out += g * C64::new(*c, 0.0);
        }
        out
    }
}

fn real_inner(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct RestartTrace {
    pub restart: usize,
    pub start_value: f64,
    pub final_value: f64,
    pub iterations: usize,
    pub kicks: usize,
}

#[derive(Debug, Clone)]
pub struct MixingResult {
    pub subsystems: usize,
    pub min_value: f64,
    pub argmin: CMatrix,
    pub restarts: usize,
    pub traces: Vec<RestartTrace>,
}

impl MixingResult {
    pub fn to_json(&self) -> Value {
        json!({
            "L": self.subsystems,
            "min_value": self.min_value,
            "argmin": complex_matrix_to_json(&self.argmin),
            "restarts": self.restarts,
            "per_restart": self.traces,
        })
    }
}

/// Budget of the unitary descent.
#[derive(Debug, Clone, Copy)]
pub struct MixingOptions {
    pub restarts: usize,
    pub iters: usize,
    pub seed: u64,
    pub max_kicks: usize,
    pub grad_tol: f64,
}

impl Default for MixingOptions {
    fn default() -> Self {
        Self { restarts: 50, iters: 2000, seed: 0, max_kicks: 5, grad_tol: 1e-9 }
    }
}

/// `t ↦ exp(tK)` for anti-Hermitian `K`, from one eigen-decomposition of the Hermitian `−iK`.
struct SkewExponential {
    vectors: CMatrix,
    values: DVector<f64>,
}

impl SkewExponential {
    fn new(k: &CMatrix) -> Self {
        let herm = k * C64::new(0.0, -1.0);
        let herm = (&herm + herm.adjoint()) * C64::new(0.5, 0.0);
        let eig = herm.symmetric_eigen();
        Self { vectors: eig.eigenvectors, values: eig.eigenvalues }
    }

    fn at(&self, t: f64) -> CMatrix {
        let phases = self.values.map(|l| C64::from_polar(1.0, t * l));
        &self.vectors * CMatrix::from_diagonal(&phases) * self.vectors.adjoint()
    }
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Armijo descent along `U ↦ exp(tK)U`; stalls are followed by random kicks kept only if
/// they lead to a lower value.
fn descend<R: Rng>(
    start: CMatrix,
    project: &dyn Fn(&CMatrix) -> CMatrix,
    opts: &MixingOptions,
    rng: &mut R,
) -> (CMatrix, f64, usize, usize) {
    let dim = start.nrows();
    let mut u = start;
    let mut value = functional_value(&u);
    let mut best = (u.clone(), value);
    let (mut iterations, mut kicks) = (0, 0);
    while iterations < opts.iters {
        iterations += 1;
        let k = project(&descent_direction(&u));
        let slope = k.norm_squared();
        if slope.sqrt() < opts.grad_tol {
            if value < best.1 {
                best = (u.clone(), value);
            }
            if kicks >= opts.max_kicks {
                break;
            }
            kicks += 1;
            let kick = project(&random_anti_hermitian(dim, rng));
            u = SkewExponential::new(&kick).at(1e-3) * &u;
            value = functional_value(&u);
            continue;
        }
        let mut t = 1.0 / (1.0 + k.camax());
        let mut accepted = false;
        let flow = SkewExponential::new(&k);
        for _ in 0..60 {
            let trial = flow.at(t) * &u;
            let tv = functional_value(&trial);
            if tv <= value - 1e-4 * t * slope {
                u = trial;
                value = tv;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if value < best.1 {
                best = (u.clone(), value);
            }
            if kicks >= opts.max_kicks {
                break;
            }
            kicks += 1;
            let kick = project(&random_anti_hermitian(dim, rng));
            u = SkewExponential::new(&kick).at(1e-3) * &u;
            value = functional_value(&u);
        }
    }
    if value < best.1 {
        best = (u, value);
    }
    (best.0, best.1, iterations, kicks)
}

/// Minimizes the mixing functional over `group` from random starts.
pub fn minimize_mixing(subsystems: usize, group: &Group, opts: &MixingOptions) -> Result<MixingResult> {
    if subsystems == 0 || opts.restarts == 0 {
        return Err(CvpError::ArgError("need at least one subsystem and one restart".into()));
    }
    if let Group::Sub(s) = group {
        s.validate(subsystems)?;
    }
    if let Group::Sub(SubgroupSample::Elements(elems)) = group {
        let (idx, min_value) = elems
            .iter()
            .map(functional_value)
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        let traces = vec![RestartTrace { restart: 0, start_value: min_value, final_value: min_value, iterations: elems.len(), kicks: 0 }];
        return Ok(MixingResult { subsystems, min_value, argmin: elems[idx].clone(), restarts: 1, traces });
    }
    let projector = match group {
        Group::Sub(SubgroupSample::Generators(gens)) => Some(GeneratorProjector::new(gens)),
        _ => None,
    };
    let project = |m: &CMatrix| match &projector {
        Some(p) => p.project(m),
        None => m.clone(),
    };
    let mut best: Option<(CMatrix, f64)> = None;
    let mut traces = Vec::with_capacity(opts.restarts);
    for restart in 0..opts.restarts {
        let mut rng = restart_rng(opts.seed, restart);
        let start = group.sample(subsystems, &mut rng);
        let start_value = functional_value(&start);
        let (u, value, iterations, kicks) = descend(start, &project, opts, &mut rng);
        traces.push(RestartTrace { restart, start_value, final_value: value, iterations, kicks });
        if best.as_ref().is_none_or(|b| value < b.1) {
            best = Some((u, value));
        }
    }
    let (argmin, min_value) = best.expect("at least one restart");
    Ok(MixingResult { subsystems, min_value, argmin, restarts: opts.restarts, traces })
}

/// `U_t = exp((it/2) [[1, 1], [1, 1]])`.
pub fn u_t_family(t: f64) -> CMatrix {
    let gen = CMatrix::from_element(2, 2, C64::new(0.0, t / 2.0));
    gen.exp()
}

/// `U = U_d U_⊥` with `U_d` diagonal and `U_⊥` fixing the orbit.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub diagonal: CMatrix,
    pub orthogonal: CMatrix,
    pub reassembly_defect: f64,
    /// Largest `|U_⊥ g − g| / |g|` over the orbit sample.
    pub orbit_defect: f64,
    pub orbit_fixed: bool,
}

pub fn decompose_diagonal_orthogonal(u: &CMatrix, orbit: &[CVector]) -> Result<Decomposition> {
    check_unitary(u, TOL_UNITARY)?;
    let defect = stratum_defect(u);
    if defect > TOL_STRATUM {
        return Err(CvpError::NotOnMinimalStratum { defect });
    }
    let w = u * reference_vector(u.ncols());
    let phases = w.map(|x| x / x.norm());
    let diagonal = CMatrix::from_diagonal(&phases);
    let orthogonal = diagonal.adjoint() * u;
    let reassembly_defect = (&diagonal * &orthogonal - u).camax();
    let orbit_defect = orbit
        .iter()
        .map(|g| (&orthogonal * g - g).norm() / g.norm().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(Decomposition { diagonal, orthogonal, reassembly_defect, orbit_defect, orbit_fixed: orbit_defect <= 1e-8 })
}

/// `g v` for `count` sampled group elements `g`.
pub fn sample_orbit(group: &Group, subsystems: usize, count: usize, seed: u64) -> Vec<CVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = reference_vector(subsystems);
    (0..count).map(|_| group.sample(subsystems, &mut rng) * &v).collect()
}

/// Numerical rank of the orbit sample; `v` is cyclic when it equals `L`.
pub fn orbit_rank(orbit: &[CVector], tol: f64) -> usize {
    if orbit.is_empty() {
        return 0;
    }
    let m = CMatrix::from_columns(orbit);
    let sv = m.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|s| **s > tol * smax).count()
}

/// A unitary fixing `v`: `B diag(1, W) B†` with `B` an orthonormal basis starting at `v/|v|`.
pub fn random_v_fixing<R: Rng + ?Sized>(subsystems: usize, rng: &mut R) -> CMatrix {
    let l = subsystems;
    let mut seed = CMatrix::identity(l, l);
    seed.set_column(0, &(reference_vector(l) / C64::new((l as f64).sqrt(), 0.0)));
    let basis = seed.qr().q();
    let mut block = CMatrix::identity(l, l);
    if l > 1 {
        block.view_mut((1, 1), (l - 1, l - 1)).copy_from(&haar_unitary(l - 1, rng));
    }
    &basis * block * basis.adjoint()
}

/// How a stratum probe was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratumSample {
    OnStratum,
    Haar,
    Perturbed,
}

/// Draws a probe of the requested kind; perturbations have size log-uniform in `[1e-3, 1e-1]`.
pub fn stratum_sample<R: Rng + ?Sized>(kind: StratumSample, subsystems: usize, rng: &mut R) -> CMatrix {
    match kind {
        StratumSample::Haar => haar_unitary(subsystems, rng),
        StratumSample::OnStratum | StratumSample::Perturbed => {
            let phases = CVector::from_fn(subsystems, |_, _| C64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)));
            let base = CMatrix::from_diagonal(&phases) * random_v_fixing(subsystems, rng);
            if kind == StratumSample::OnStratum {
                return base;
            }
            let eps = 10f64.powf(rng.gen_range(-3.0..-1.0));
            (random_anti_hermitian(subsystems, rng) * C64::new(eps, 0.0)).exp() * base
        }
    }
}
