use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

/// Sparse multivariate polynomial with exact derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        if c != 0.0 {
            p.terms.insert(vec![0; nvars], c);
        }
        p
    }

    pub fn var(nvars: usize, k: usize) -> Self {
        let mut e = vec![0; nvars];
        e[k] = 1;
        let mut p = Self::zero(nvars);
        p.terms.insert(e, 1.0);
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut p = self.clone();
        p.terms.values_mut().for_each(|c| *c *= s);
        p.prune();
        p
    }

    pub fn powi(&self, n: u32) -> Self {
        let mut out = Self::constant(self.nvars, 1.0);
        for _ in 0..n {
            out = &out * self;
        }
        out
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| *c != 0.0);
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().zip(vars).map(|(k, v)| v.powi(*k as i32)).product::<f64>())
            .sum()
    }

    /// Evaluates `∂^orders p` at `vars` without building the derivative.
    pub fn partial_eval(&self, vars: &[f64], orders: &[u32]) -> f64 {
        let mut total = 0.0;
        'terms: for (e, c) in &self.terms {
            let mut t = *c;
            for ((k, d), v) in e.iter().zip(orders).zip(vars) {
                if d > k {
                    continue 'terms;
                }
                for j in 0..*d {
                    t *= (k - j) as f64;
                }
                t *= v.powi((k - d) as i32);
            }
            total += t;
        }
        total
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        let mut p = self.clone();
        for (e, c) in &rhs.terms {
            *p.terms.entry(e.clone()).or_insert(0.0) += c;
        }
        p.prune();
        p
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self + &(-rhs)
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        let mut p = Polynomial::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &rhs.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                *p.terms.entry(e).or_insert(0.0) += ca * cb;
            }
        }
        p.prune();
        p
    }
}
