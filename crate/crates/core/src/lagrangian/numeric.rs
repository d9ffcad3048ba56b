use std::fmt;
use std::sync::Arc;

use super::{Direction, Lagrangian, Slot};

/// Two-point function evaluated by closure.
pub type PairFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Central-difference derivative backend.
///
/// Mixed derivatives of total order `k` use nested central differences with base
/// step `h_k = (1e-6)^{1/(k+1)}`, refined by two Richardson levels (`h`, `h/2`, `h/4`).
#[derive(Clone)]
pub struct FiniteDifference {
    dim: usize,
    max_order: usize,
    f: PairFn,
}

impl fmt::Debug for FiniteDifference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteDifference").field("dim", &self.dim).field("max_order", &self.max_order).finish()
    }
}

pub fn fd_step(order: usize) -> f64 {
    1e-6f64.powf(1.0 / (order as f64 + 1.0))
}

impl FiniteDifference {
    pub fn new(dim: usize, max_order: usize, f: PairFn) -> Self {
        Self { dim, max_order, f }
    }

    fn nested(&self, x: &mut [f64], y: &mut [f64], dirs: &[(Slot, Vec<f64>)], h: f64) -> f64 {
        let Some(((slot, v), rest)) = dirs.split_first() else {
            return (self.f)(x, y);
        };
        let target: &mut [f64] = match slot {
            Slot::X => x,
            Slot::Y => y,
        };
        for (t, d) in target.iter_mut().zip(v) {
            *t += h * d;
        }
        let plus = self.nested(x, y, rest, h);
        let target: &mut [f64] = match slot {
            Slot::X => x,
            Slot::Y => y,
        };
        for (t, d) in target.iter_mut().zip(v) {
            *t -= 2.0 * h * d;
        }
        let minus = self.nested(x, y, rest, h);
        let target: &mut [f64] = match slot {
            Slot::X => x,
            Slot::Y => y,
        };
        for (t, d) in target.iter_mut().zip(v) {
            *t += h * d;
        }
        (plus - minus) / (2.0 * h)
    }

    fn derivative(&self, x: &[f64], y: &[f64], dirs: Vec<(Slot, Vec<f64>)>) -> f64 {
        if dirs.is_empty() {
            return (self.f)(x, y);
        }
        let mut scale = 1.0;
        let mut unit = Vec::with_capacity(dirs.len());
        for (slot, v) in dirs {
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n == 0.0 {
                return 0.0;
            }
            scale *= n;
            unit.push((slot, v.iter().map(|c| c / n).collect::<Vec<_>>()));
        }
        let h = fd_step(unit.len());
        let mut xs = x.to_vec();
        let mut ys = y.to_vec();
        let mut at = |h: f64| self.nested(&mut xs, &mut ys, &unit, h);
        let d0 = at(h);
        let d1 = at(h / 2.0);
        let d2 = at(h / 4.0);
        let r1 = (4.0 * d1 - d0) / 3.0;
        let r2 = (4.0 * d2 - d1) / 3.0;
        scale * (16.0 * r2 - r1) / 15.0
    }
}

impl Lagrangian for FiniteDifference {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_order(&self) -> usize {
        self.max_order
    }

    fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.f)(x, y)
    }

    fn partial(&self, x: &[f64], y: &[f64], alpha: &[u32], beta: &[u32]) -> f64 {
        let mut dirs = Vec::new();
        for (slot, orders) in [(Slot::X, alpha), (Slot::Y, beta)] {
            for (k, o) in orders.iter().enumerate() {
                let mut e = vec![0.0; self.dim];
                e[k] = 1.0;
                for _ in 0..*o {
                    dirs.push((slot, e.clone()));
                }
            }
        }
        self.derivative(x, y, dirs)
    }

    fn directional(&self, x: &[f64], y: &[f64], dirs: &[Direction<'_>]) -> f64 {
        self.derivative(x, y, dirs.iter().map(|d| (d.slot, d.vector.to_vec())).collect())
    }
}
