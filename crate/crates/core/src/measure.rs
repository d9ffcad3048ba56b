//! Finite weighted point measures in a single global chart.

use serde::{Deserialize, Serialize};

use crate::error::{CvpError, Result};

/// Points closer than this (max-norm, chart units) are treated as one point.
pub const TOL_PT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Atom {
    point: Vec<f64>,
    weight: f64,
}

/// Weighted point masses `ρ = Σ ρ_i δ_{x_i}` in an `m`-dimensional chart.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(CvpError::ArgError("measure needs at least one point".into()));
        }
        if points.len() != weights.len() {
            return Err(CvpError::ShapeError(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(CvpError::ArgError("chart dimension must be at least 1".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(CvpError::ShapeError(format!("point {i} has dimension {}", p.len())));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CvpError::ArgError(format!("point {i} has non-finite coordinates")));
            }
        }
        for (i, w) in weights.iter().enumerate() {
            if !(w.is_finite() && *w > 0.0) {
                return Err(CvpError::ArgError(format!("weight {i} = {w} is not positive")));
            }
        }
        for i in 0..points.len() {
            for j in 0..i {
                if max_dist(&points[i], &points[j]) <= TOL_PT {
                    return Err(CvpError::ArgError(format!("points {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { dim, points, weights })
    }

    /// Builds a measure, merging points that coincide within [`TOL_PT`].
    pub fn merged(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(CvpError::ShapeError("points and weights differ in length".into()));
        }
        let mut out_p: Vec<Vec<f64>> = Vec::new();
        let mut out_w: Vec<f64> = Vec::new();
        for (p, w) in points.into_iter().zip(weights) {
            match out_p.iter().position(|q| max_dist(q, &p) <= TOL_PT) {
                Some(k) => out_w[k] += w,
                None => {
                    out_p.push(p);
                    out_w.push(w);
                }
            }
        }
        Self::new(out_p, out_w)
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn total_volume(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Number of jet components `N(1+m)`.
    pub fn jet_len(&self) -> usize {
        self.len() * (1 + self.dim)
    }

    /// Push-forward `F_*(e^c ρ)` with `F(x_i) = x_i + shift_i`.
    pub fn push_forward(&self, log_weight: &[f64], shift: &[Vec<f64>]) -> Result<Self> {
        if log_weight.len() != self.len() || shift.len() != self.len() {
            return Err(CvpError::ShapeError("push-forward fields must match the support".into()));
        }
        let mut pts = Vec::with_capacity(self.len());
        let mut ws = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            if shift[i].len() != self.dim {
                return Err(CvpError::ShapeError(format!("shift {i} has wrong dimension")));
            }
            let w = self.weights[i] * log_weight[i].exp();
            if !w.is_finite() {
                return Err(CvpError::Numerical(format!("weight overflow at point {i}")));
            }
            pts.push(self.points[i].iter().zip(&shift[i]).map(|(x, s)| x + s).collect());
            ws.push(w);
        }
        Self::merged(pts, ws)
    }

    /// Cheap content hash used to tag assembled operators.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (p, w) in self.points.iter().zip(&self.weights) {
            p.iter().for_each(|v| eat(*v));
            eat(*w);
        }
        h
    }

    pub fn to_json(&self) -> serde_json::Value {
        let atoms: Vec<Atom> = self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| Atom { point: p.clone(), weight: *w })
            .collect();
        serde_json::to_value(atoms).expect("atoms serialize")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let atoms: Vec<Atom> = serde_json::from_value(value.clone())
            .map_err(|e| CvpError::ArgError(format!("bad measure JSON: {e}")))?;
        let (p, w) = atoms.into_iter().map(|a| (a.point, a.weight)).unzip();
        Self::new(p, w)
    }
}

impl Serialize for DiscreteMeasure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for DiscreteMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        Self::from_json(&v).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
