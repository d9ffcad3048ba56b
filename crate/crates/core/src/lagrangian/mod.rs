//! Two-point Lagrangians `ℒ(x, y)` with a derivative provider.

mod numeric;
mod polynomial;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

pub use numeric::{fd_step, FiniteDifference, PairFn};
pub use polynomial::Polynomial;

use crate::error::{CvpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    X,
    Y,
}

/// A directional derivative acting on one argument of `ℒ`.
#[derive(Debug, Clone, Copy)]
pub struct Direction<'a> {
    pub slot: Slot,
    pub vector: &'a [f64],
}

impl<'a> Direction<'a> {
    pub fn x(vector: &'a [f64]) -> Self {
        Self { slot: Slot::X, vector }
    }

    pub fn y(vector: &'a [f64]) -> Self {
        Self { slot: Slot::Y, vector }
    }
}

/// Derivative provider for a two-point function on `ℝᵐ × ℝᵐ`.
pub trait Lagrangian: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Highest total derivative order the backend supports reliably.
    fn max_order(&self) -> usize;

    fn value(&self, x: &[f64], y: &[f64]) -> f64;

    /// Mixed partial with multi-index `alpha` on `x` and `beta` on `y`.
    fn partial(&self, x: &[f64], y: &[f64], alpha: &[u32], beta: &[u32]) -> f64;

    /// Iterated directional derivative, expanded into coordinate partials by default.
    fn directional(&self, x: &[f64], y: &[f64], dirs: &[Direction<'_>]) -> f64 {
        let m = self.dim();
        let mut alpha = vec![0u32; m];
        let mut beta = vec![0u32; m];
        expand_directional(self, x, y, dirs, 1.0, &mut alpha, &mut beta)
    }
}

fn expand_directional<L: Lagrangian + ?Sized>(
    lag: &L,
    x: &[f64],
    y: &[f64],
    dirs: &[Direction<'_>],
    coef: f64,
    alpha: &mut [u32],
    beta: &mut [u32],
) -> f64 {
    let Some((d, rest)) = dirs.split_first() else {
        return coef * lag.partial(x, y, alpha, beta);
    };
    let mut total = 0.0;
    for (k, c) in d.vector.iter().enumerate() {
        if *c == 0.0 {
            continue;
        }
        let idx = match d.slot {
            Slot::X => &mut alpha[k],
            Slot::Y => &mut beta[k],
        };
        *idx += 1;
        total += expand_directional(lag, x, y, rest, coef * c, alpha, beta);
        let idx = match d.slot {
            Slot::X => &mut alpha[k],
            Slot::Y => &mut beta[k],
        };
        *idx -= 1;
    }
    total
}

/// Polynomial Lagrangian in the variables `(x_1..x_m, y_1..y_m)`.
#[derive(Debug, Clone)]
pub struct PolynomialLagrangian {
    dim: usize,
    poly: Polynomial,
}

impl PolynomialLagrangian {
    pub fn new(dim: usize, poly: Polynomial) -> Result<Self> {
        if poly.nvars() != 2 * dim {
            return Err(CvpError::ShapeError(format!(
                "polynomial has {} variables, expected {}",
                poly.nvars(),
                2 * dim
            )));
        }
        Ok(Self { dim, poly })
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }

    fn vars(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.dim);
        v.extend_from_slice(x);
        v.extend_from_slice(y);
        v
    }
}

impl Lagrangian for PolynomialLagrangian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_order(&self) -> usize {
        usize::MAX
    }

    fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        self.poly.eval(&self.vars(x, y))
    }

    fn partial(&self, x: &[f64], y: &[f64], alpha: &[u32], beta: &[u32]) -> f64 {
        let mut orders = Vec::with_capacity(2 * self.dim);
        orders.extend_from_slice(alpha);
        orders.extend_from_slice(beta);
        self.poly.partial_eval(&self.vars(x, y), &orders)
    }
}

/// Named Lagrangian with its derivative backend.
#[derive(Clone)]
pub struct LagrangianModel {
    name: String,
    params: BTreeMap<String, f64>,
    backend: Arc<dyn Lagrangian>,
    nonnegative: bool,
}

impl fmt::Debug for LagrangianModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LagrangianModel")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("dim", &self.dim())
            .finish()
    }
}

/// Names accepted by [`LagrangianModel::from_registry`], sorted.
pub const REGISTRY: &[&str] = &[
    "cfs",
    "example52",
    "example52_regularized",
    "quartic_distance",
    "quartic_pair",
    "square_distance",
    "warped_pair",
    "zero",
];

impl LagrangianModel {
    pub fn new(
        name: impl Into<String>,
        params: BTreeMap<String, f64>,
        backend: Arc<dyn Lagrangian>,
        nonnegative: bool,
    ) -> Self {
        Self { name: name.into(), params, backend, nonnegative }
    }

    /// Builds a registered polynomial model. The `cfs` model lives in [`crate::cfs`].
    pub fn from_registry(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str, default: f64| params.get(k).copied().unwrap_or(default);
        let dim_param = || -> Result<usize> {
            let d = get("dim", 1.0);
            if d < 1.0 || d.fract() != 0.0 {
                return Err(CvpError::ArgError(format!("dim must be a positive integer, got {d}")));
            }
            Ok(d as usize)
        };
        let allowed: &[&str] = match name {
            "zero" | "square_distance" | "quartic_distance" => &["dim", "offset"],
            "example52" | "example52_regularized" => &["offset"],
            "quartic_pair" => &["sextic", "quadratic", "offset"],
            "warped_pair" => &["warp", "offset"],
            "cfs" => return crate::cfs::registry_model(params),
            _ => return Err(CvpError::UnknownModel(name.to_string())),
        };
        if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CvpError::ArgError(format!("model {name} has no parameter {k}")));
        }
        let offset = get("offset", 0.0);
        let (dim, poly, nonneg) = match name {
            "zero" => {
                let m = dim_param()?;
                (m, Polynomial::constant(2 * m, offset), offset >= 0.0)
            }
            "square_distance" | "quartic_distance" => {
                let m = dim_param()?;
                let power = if name == "square_distance" { 2 } else { 4 };
                let mut p = Polynomial::constant(2 * m, offset);
                for k in 0..m {
                    let d = &Polynomial::var(2 * m, k) - &Polynomial::var(2 * m, m + k);
                    p = &p + &d.powi(power);
                }
                (m, p, offset >= 0.0)
            }
            "example52" | "example52_regularized" => {
                let v = |k| Polynomial::var(4, k);
                let (x1, x2, y1, y2) = (v(0), v(1), v(2), v(3));
                let d1 = &x1 - &y1;
                let d2 = &x2 - &y2;
                let s2 = &x2 + &y2;
                let mut p = &(&d1.powi(4) + &d2.powi(2)) - &(&s2.powi(2) * &d1.powi(2));
                if name == "example52_regularized" {
                    for z in [&x1, &x2, &y1, &y2] {
                        p = &p + &z.powi(6);
                    }
                }
                p = &p + &Polynomial::constant(4, offset);
                (2, p, false)
            }
            "quartic_pair" => {
                let (x, y) = (Polynomial::var(2, 0), Polynomial::var(2, 1));
                let sextic = get("sextic", 1.0);
                let quadratic = get("quadratic", 0.0);
                let p = &(&(&x - &y).powi(4) + &(&x.powi(6) + &y.powi(6)).scale(sextic))
                    + &(&(&x.powi(2) + &y.powi(2)).scale(quadratic) + &Polynomial::constant(2, offset));
                (1, p, sextic >= 0.0 && quadratic >= 0.0 && offset >= 0.0)
            }
            "warped_pair" => {
                let warp = get("warp", 25.0 / 64.0);
                let off = get("offset", 1.0);
                let (x, y) = (Polynomial::var(2, 0), Polynomial::var(2, 1));
                let phi = |z: &Polynomial| z + &z.powi(3).scale(warp);
                let gap = &(&phi(&x) - &phi(&y)).powi(2) - &Polynomial::constant(2, 1.0);
                let p = &gap.powi(2) + &Polynomial::constant(2, off);
                (1, p, off >= 0.0)
            }
            _ => unreachable!(),
        };
        let backend = Arc::new(PolynomialLagrangian::new(dim, poly)?);
        Ok(Self::new(name, params.clone(), backend, nonneg))
    }

    /// Registered model with default parameters.
    pub fn named(name: &str) -> Result<Self> {
        Self::from_registry(name, &BTreeMap::new())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.backend.dim()
    }

    pub fn max_order(&self) -> usize {
        self.backend.max_order()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.nonnegative
    }

    pub fn backend(&self) -> &Arc<dyn Lagrangian> {
        &self.backend
    }

    pub fn require_order(&self, order: usize) -> Result<()> {
        if order > self.max_order() {
            return Err(CvpError::OrderUnsupported { requested: order, max: self.max_order() });
        }
        Ok(())
    }

    fn finite(&self, v: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CvpError::NumericalFailure { x: x.to_vec(), y: y.to_vec() })
        }
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.finite(self.backend.value(x, y), x, y)
    }

    pub fn partial(&self, x: &[f64], y: &[f64], alpha: &[u32], beta: &[u32]) -> Result<f64> {
        let m = self.dim();
        if alpha.len() != m || beta.len() != m {
            return Err(CvpError::ShapeError(format!("multi-indices must have length {m}")));
        }
        self.require_order((alpha.iter().chain(beta).sum::<u32>()) as usize)?;
        self.finite(self.backend.partial(x, y, alpha, beta), x, y)
    }

    pub fn directional(&self, x: &[f64], y: &[f64], dirs: &[Direction<'_>]) -> Result<f64> {
        self.require_order(dirs.len())?;
        self.finite(self.backend.directional(x, y, dirs), x, y)
    }

    /// Same function with the finite-difference backend, for cross-validation.
    pub fn numeric(&self, max_order: usize) -> Self {
        let b = self.backend.clone();
        let f: PairFn = Arc::new(move |x: &[f64], y: &[f64]| b.value(x, y));
        Self {
            name: format!("{}#fd", self.name),
            params: self.params.clone(),
            backend: Arc::new(FiniteDifference::new(self.dim(), max_order, f)),
            nonnegative: self.nonnegative,
        }
    }
}
