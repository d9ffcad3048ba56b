//! Jets `(a, u)` and dual jets `(g, φ)` on the support of a measure.
//!
//! Both are stored flat with the layout used by every assembled operator:
//! for each support point, the scalar slot followed by the `m` vector slots.

use std::marker::PhantomData;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{CvpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Primal;
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dual;

/// Per-point (scalar, vector) field.
#[derive(Debug, Clone, PartialEq)]
pub struct JetField<K> {
    dim: usize,
    data: Vec<f64>,
    kind: PhantomData<K>,
}

pub type Jet = JetField<Primal>;
pub type DualJet = JetField<Dual>;

impl<K> JetField<K> {
    pub fn zeros(points: usize, dim: usize) -> Self {
        Self { dim, data: vec![0.0; points * (1 + dim)], kind: PhantomData }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() % (1 + dim) != 0 {
            return Err(CvpError::ShapeError(format!(
                "flat length {} is not a multiple of {}",
                data.len(),
                1 + dim
            )));
        }
        Ok(Self { dim, data, kind: PhantomData })
    }

    pub fn from_parts(scalars: &[f64], vectors: &[Vec<f64>]) -> Result<Self> {
        if scalars.len() != vectors.len() {
            return Err(CvpError::ShapeError("scalar and vector parts differ in length".into()));
        }
        let dim = vectors.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(scalars.len() * (1 + dim));
        for (a, u) in scalars.iter().zip(vectors) {
            if u.len() != dim {
                return Err(CvpError::ShapeError("vector parts differ in dimension".into()));
            }
            data.push(*a);
            data.extend_from_slice(u);
        }
        Ok(Self { dim, data, kind: PhantomData })
    }

    pub fn from_vector(dim: usize, v: &DVector<f64>) -> Result<Self> {
        Self::from_flat(dim, v.iter().copied().collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.data.len() / (1 + self.dim)
    }

    pub fn scalar(&self, i: usize) -> f64 {
        self.data[i * (1 + self.dim)]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        let s = i * (1 + self.dim) + 1;
        &self.data[s..s + self.dim]
    }

    pub fn set_scalar(&mut self, i: usize, a: f64) {
        self.data[i * (1 + self.dim)] = a;
    }

    pub fn set_vector(&mut self, i: usize, u: &[f64]) {
        let s = i * (1 + self.dim) + 1;
        self.data[s..s + self.dim].copy_from_slice(u);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    pub fn scalars(&self) -> Vec<f64> {
        (0..self.points()).map(|i| self.scalar(i)).collect()
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        (0..self.points()).map(|i| self.vector(i).to_vec()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn has_zero_scalars(&self) -> bool {
        (0..self.points()).all(|i| self.scalar(i) == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|v| v * s).collect(), kind: PhantomData }
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.data.len() != other.data.len() {
            return Err(CvpError::ShapeError("jet shapes differ".into()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { dim: self.dim, data, kind: PhantomData })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(-1.0))
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Euclidean inner product of the flat layouts.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Unit jet with a single non-zero flat component.
    pub fn unit(points: usize, dim: usize, flat_index: usize) -> Self {
        let mut j = Self::zeros(points, dim);
        j.data[flat_index] = 1.0;
        j
    }
}

#[derive(Serialize, Deserialize)]
struct JetJson {
    c: Vec<f64>,
    #[serde(rename = "F")]
    f: Vec<Vec<f64>>,
}

impl Jet {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(JetJson { c: self.scalars(), f: self.vectors() }).expect("jet serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let j: JetJson = serde_json::from_value(v.clone())
            .map_err(|e| CvpError::ArgError(format!("bad jet JSON: {e}")))?;
        Self::from_parts(&j.c, &j.f)
    }
}

/// Per-point pairing `g_i a_i + φ_i · u_i`.
pub fn pairing(dual: &DualJet, jet: &Jet) -> Result<Vec<f64>> {
    if dual.dim != jet.dim || dual.data.len() != jet.data.len() {
        return Err(CvpError::ShapeError(format!(
            "dual jet has {} points, jet has {}",
            dual.points(),
            jet.points()
        )));
    }
    Ok((0..jet.points())
        .map(|i| {
            let s = i * (1 + jet.dim);
            (0..=jet.dim).map(|k| dual.data[s + k] * jet.data[s + k]).sum()
        })
        .collect())
}

/// Spanning set of test jets.
#[derive(Debug, Clone, PartialEq)]
pub struct TestBasis {
    jets: Vec<Jet>,
    full_space: bool,
}

impl TestBasis {
    /// All unit jets: the full jet space.
    pub fn full(points: usize, dim: usize) -> Self {
        let n = points * (1 + dim);
        let jets = (0..n).map(|k| Jet::unit(points, dim, k)).collect();
        Self { jets, full_space: true }
    }

    /// Scalar test jets only.
    pub fn scalar_only(points: usize, dim: usize) -> Self {
        let jets = (0..points).map(|i| Jet::unit(points, dim, i * (1 + dim))).collect();
        Self { jets, full_space: false }
    }

    pub fn from_jets(jets: Vec<Jet>) -> Result<Self> {
        let Some(first) = jets.first() else {
            return Err(CvpError::ArgError("test basis is empty".into()));
        };
        let (n, m) = (first.points(), first.dim());
        if jets.iter().any(|j| j.points() != n || j.dim() != m) {
            return Err(CvpError::ShapeError("test jets differ in shape".into()));
        }
        let k = jets.len();
        let gram = nalgebra::DMatrix::from_fn(k, k, |a, b| jets[a].dot(&jets[b]));
        let sv = gram.singular_values();
        let smax = sv.max();
        let rank = sv.iter().filter(|s| **s > 1e-12 * smax.max(f64::MIN_POSITIVE)).count();
        if rank != k {
            return Err(CvpError::ArgError(format!("test jets are dependent (rank {rank} < {k})")));
        }
        let full_space = k == n * (1 + m);
        if full_space {
            for i in 0..n {
                if jets.iter().all(|j| j.scalar(i) == 0.0) {
                    return Err(CvpError::ArgError(format!("no scalar test component at point {i}")));
                }
            }
        }
        Ok(Self { jets, full_space })
    }

    pub fn jets(&self) -> &[Jet] {
        &self.jets
    }

    pub fn len(&self) -> usize {
        self.jets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jets.is_empty()
    }

    pub fn is_full_space(&self) -> bool {
        self.full_space
    }
}

/// Test-space family that can be instantiated on any measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TestSpace {
    #[default]
    Full,
    ScalarOnly,
}

impl TestSpace {
    pub fn basis(self, points: usize, dim: usize) -> TestBasis {
        match self {
            TestSpace::Full => TestBasis::full(points, dim),
            TestSpace::ScalarOnly => TestBasis::scalar_only(points, dim),
        }
    }
}
