//! Order-by-order perturbation series `𝔴⁽ᵖ⁾ = S E⁽ᵖ⁾` and measure reconstruction.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::el::{ell_dual_jet, weak_el_residual};
use crate::error::{CvpError, Result};
use crate::fit::{residual_exponent, SlopeReport};
use crate::jet::{DualJet, Jet, TestBasis, TestSpace};
use crate::lagrangian::LagrangianModel;
use crate::linops::{assemble_delta_with, delta_ell_lifted, Convention, DeltaMatrix, Gauge, GreensOperator};
use crate::linops::{TOL_RANK, TOL_SOLVE};
use crate::measure::DiscreteMeasure;

/// All ordered tuples `(q_1, …, q_ℓ)` with `q_k ≥ 1` summing to `p`, in lexicographic order.
pub fn compositions(p: usize, parts: usize) -> Result<Vec<Vec<usize>>> {
    if parts < 1 || parts > p {
        return Err(CvpError::ArgError(format!("cannot split {p} into {parts} positive parts")));
    }
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(parts);
    fn rec(rem: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(rem);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for q in 1..=rem - (parts - 1) {
            cur.push(q);
            rec(rem - q, parts - 1, cur, out);
            cur.pop();
        }
    }
    rec(p, parts, &mut cur, &mut out);
    Ok(out)
}

/// One contribution `Δ_ℓ[𝔴^{q_1}, …, 𝔴^{q_ℓ}]` to an error term; `ℓ = 0` marks `Δ₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerTerm {
    pub arity: usize,
    pub composition: Vec<usize>,
    pub value: DualJet,
}

/// Error-term contributions per order, index `p − 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagramLedger {
    pub orders: Vec<Vec<LedgerTerm>>,
}

impl DiagramLedger {
    /// Sum of the recorded contributions at order `p`.
    pub fn total(&self, p: usize) -> Option<DualJet> {
        let terms = self.orders.get(p.checked_sub(1)?)?;
        let first = terms.first()?;
        let mut acc = DualJet::zeros(first.value.points(), first.value.dim());
        for t in terms {
            acc.axpy(1.0, &t.value).ok()?;
        }
        Some(acc)
    }
}

/// `E⁽ᵖ⁾` as a dual jet together with its ledger entries.
pub fn error_term(
    p: usize,
    jets: &[Jet],
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    conv: Convention,
) -> Result<(DualJet, Vec<LedgerTerm>)> {
    if p == 0 {
        return Err(CvpError::ArgError("error terms start at order 1".into()));
    }
    if p == 1 {
        let value = ell_dual_jet(measure, lag, nu)?;
        return Ok((value.clone(), vec![LedgerTerm { arity: 0, composition: vec![], value }]));
    }
    if jets.len() < p - 1 {
        return Err(CvpError::ArgError(format!("order {p} needs jets up to order {}", p - 1)));
    }
    let mut total = DualJet::zeros(measure.len(), measure.dim());
    let mut terms = Vec::new();
    for parts in 2..=p {
        for comp in compositions(p, parts)? {
            let args: Vec<&Jet> = comp.iter().map(|q| &jets[q - 1]).collect();
            let value = if args.iter().any(|j| j.is_zero()) {
                DualJet::zeros(measure.len(), measure.dim())
            } else {
                delta_ell_lifted(conv, &args, measure, lag, nu)?
            };
            total.axpy(1.0, &value)?;
            terms.push(LedgerTerm { arity: parts, composition: comp, value });
        }
    }
    Ok((total, terms))
}

/// Settings shared by the expansion drivers.
#[derive(Debug, Clone)]
pub struct ExpansionOptions {
    pub convention: Convention,
    pub test_space: TestSpace,
    pub strict: bool,
    pub tol_rank: f64,
    pub tol_solve: f64,
    /// Kernel jets added to `𝔴⁽ᵖ⁾`, index `p − 1`; missing entries mean no offset.
    pub offsets: Vec<Option<Jet>>,
    pub keep_ledger: bool,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        Self {
            convention: Convention::Standard,
            test_space: TestSpace::Full,
            strict: false,
            tol_rank: TOL_RANK,
            tol_solve: TOL_SOLVE,
            offsets: Vec::new(),
            keep_ledger: true,
        }
    }
}

/// Jets `𝔴⁽¹⁾ … 𝔴⁽ᴾ⁾` over a base measure.
#[derive(Debug, Clone)]
pub struct PerturbationSeries {
    pub base: DiscreteMeasure,
    pub nu: f64,
    pub convention: Convention,
    pub test_space: TestSpace,
    pub jets: Vec<Jet>,
    pub offsets: Vec<Option<Jet>>,
    /// `E⁽ᵖ⁾` per order (empty for orders prescribed from outside).
    pub errors: Vec<Option<DualJet>>,
    /// Relative discarded out-of-range component per order.
    pub out_of_range: Vec<f64>,
    pub ledger: Option<DiagramLedger>,
}

#[derive(Serialize, Deserialize)]
struct SeriesJson {
    order: usize,
    nu: f64,
    convention: Convention,
    jets: Vec<serde_json::Value>,
    #[serde(default)]
    base: Option<serde_json::Value>,
}

impl PerturbationSeries {
    pub fn order(&self) -> usize {
        self.jets.len()
    }

    /// Partial sum `Σ_p λᵖ 𝔴⁽ᵖ⁾`.
    pub fn jet_at(&self, lambda: f64) -> Jet {
        let mut acc = Jet::zeros(self.base.len(), self.base.dim());
        let mut pow = 1.0;
        for w in &self.jets {
            pow *= lambda;
            acc.axpy(pow, w).expect("series jets share the base shape");
        }
        acc
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(SeriesJson {
            order: self.order(),
            nu: self.nu,
            convention: self.convention,
            jets: self.jets.iter().map(Jet::to_json).collect(),
            base: Some(self.base.to_json()),
        })
        .expect("series serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let s: SeriesJson = serde_json::from_value(v.clone())
            .map_err(|e| CvpError::ArgError(format!("bad series JSON: {e}")))?;
        let base = match &s.base {
            Some(b) => DiscreteMeasure::from_json(b)?,
            None => return Err(CvpError::ArgError("series JSON lacks its base measure".into())),
        };
        let jets = s.jets.iter().map(Jet::from_json).collect::<Result<Vec<_>>>()?;
        if jets.len() != s.order {
            return Err(CvpError::ArgError(format!("order {} but {} jets", s.order, jets.len())));
        }
        if jets.iter().any(|j| j.points() != base.len() || j.dim() != base.dim()) {
            return Err(CvpError::ShapeError("series jets do not match the base measure".into()));
        }
        let n = jets.len();
        Ok(Self {
            base,
            nu: s.nu,
            convention: s.convention,
            test_space: TestSpace::Full,
            jets,
            offsets: vec![None; n],
            errors: vec![None; n],
            out_of_range: vec![0.0; n],
            ledger: None,
        })
    }

    /// `max_p ‖Δ𝔴⁽ᵖ⁾ + E⁽ᵖ⁾‖` relative to `1 + ‖E⁽ᵖ⁾‖`, in the test-space representation,
    /// after removing the out-of-range part of `E⁽ᵖ⁾` that the Green's operator discards.
    pub fn order_identity_defect(&self, greens: &GreensOperator) -> Result<f64> {
        let delta = greens.delta();
        let mut worst: f64 = 0.0;
        for (w, e) in self.jets.iter().zip(&self.errors) {
            let Some(e) = e else { continue };
            let b = greens.project_range(&delta.dual_to_form(e)?);
            let r = (delta.apply(w) + &b).norm() / (1.0 + b.norm());
            worst = worst.max(r);
        }
        Ok(worst)
    }
}

fn build_greens(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    opts: &ExpansionOptions,
) -> Result<GreensOperator> {
    let basis = opts.test_space.basis(measure.len(), measure.dim());
    let delta = assemble_delta_with(opts.convention, measure, lag, nu, &basis)?;
    GreensOperator::new(&delta, opts.tol_rank, opts.tol_solve, opts.strict, Gauge::MinNorm)
}

/// Green's operator the drivers use for a measure.
pub fn series_greens(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    opts: &ExpansionOptions,
) -> Result<GreensOperator> {
    build_greens(measure, lag, nu, opts)
}

fn check_jet(measure: &DiscreteMeasure, j: &Jet, what: &str) -> Result<()> {
    if j.points() != measure.len() || j.dim() != measure.dim() {
        return Err(CvpError::ShapeError(format!("{what} does not match the measure")));
    }
    Ok(())
}

fn recursion(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    order: usize,
    opts: &ExpansionOptions,
    greens: &GreensOperator,
    prescribed: Vec<Jet>,
    inhom: &[Jet],
) -> Result<PerturbationSeries> {
    for (p, o) in opts.offsets.iter().enumerate() {
        if let Some(o) = o {
            check_jet(measure, o, &format!("gauge offset at order {}", p + 1))?;
        }
    }
    for v in inhom {
        check_jet(measure, v, "inhomogeneity")?;
    }
    let start = prescribed.len();
    let mut jets = prescribed;
    let mut errors = vec![None; start];
    let mut out_of_range = vec![0.0; start];
    let mut ledger = DiagramLedger::default();
    for _ in 0..start {
        ledger.orders.push(Vec::new());
    }
    for p in start + 1..=order {
        let (e, terms) = error_term(p, &jets, measure, lag, nu, opts.convention)?;
        let mut b: DVector<f64> = greens.delta().dual_to_form(&e)?;
        let v = inhom.get(p - 1).filter(|v| !v.is_zero());
        if let Some(v) = v {
            b += greens.delta().apply(v);
        }
        let sol = greens.apply_form(&b).map_err(|err| match err {
            CvpError::OutOfRange { residual } => {
                log::error!("order {p}: error term outside the range of the linearized operator");
                CvpError::OutOfRange { residual }
            }
            other => other,
        })?;
        let mut w = sol.jet;
        if let Some(v) = v {
            w.axpy(1.0, v)?;
        }
        if let Some(Some(o)) = opts.offsets.get(p - 1) {
            w.axpy(1.0, o)?;
        }
        jets.push(w);
        errors.push(Some(e));
        out_of_range.push(sol.out_of_range);
        ledger.orders.push(terms);
    }
    let n = jets.len();
    let mut offsets = opts.offsets.clone();
    offsets.resize(n, None);
    offsets.truncate(n);
    Ok(PerturbationSeries {
        base: measure.clone(),
        nu,
        convention: opts.convention,
        test_space: opts.test_space,
        jets,
        offsets,
        errors,
        out_of_range,
        ledger: opts.keep_ledger.then_some(ledger),
    })
}

/// `𝔴⁽ᵖ⁾ = S E⁽ᵖ⁾ (+ offset)` for `p = 1..order`.
pub fn expand(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    order: usize,
    opts: &ExpansionOptions,
) -> Result<PerturbationSeries> {
    let greens = build_greens(measure, lag, nu, opts)?;
    recursion(measure, lag, nu, order, opts, &greens, Vec::new(), &[])
}

/// `𝔴⁽ᵖ⁾ = 𝔳⁽ᵖ⁾ + S(E⁽ᵖ⁾ + Δ𝔳⁽ᵖ⁾)`; `inhom[p − 1]` is `𝔳⁽ᵖ⁾`, missing orders are zero.
pub fn expand_inhomogeneous(
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    order: usize,
    inhom: &[Jet],
    opts: &ExpansionOptions,
) -> Result<PerturbationSeries> {
    let greens = build_greens(measure, lag, nu, opts)?;
    recursion(measure, lag, nu, order, opts, &greens, Vec::new(), inhom)
}

/// Nonlinear family through a critical measure with first variation `w1 ∈ ker Δ`.
pub fn family_from_linearized(
    w1: &Jet,
    measure: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    order: usize,
    opts: &ExpansionOptions,
) -> Result<PerturbationSeries> {
    check_jet(measure, w1, "first variation")?;
    let basis = opts.test_space.basis(measure.len(), measure.dim());
    let el = weak_el_residual(measure, lag, nu, &basis)?.max_abs();
    if el > opts.tol_solve.max(1e-10) {
        return Err(CvpError::NotCritical { deviation: el });
    }
    let greens = build_greens(measure, lag, nu, opts)?;
    let delta: &DeltaMatrix = greens.delta();
    let residual = delta.apply(w1).norm();
    if residual > opts.tol_rank * delta.spectral_norm() * w1.norm() {
        return Err(CvpError::NotLinearized { residual });
    }
    let prescribed = if order == 0 { Vec::new() } else { vec![w1.clone()] };
    recursion(measure, lag, nu, order, opts, &greens, prescribed, &[])
}

/// `ρ̃ = F_*(e^c ρ)` with `(c, F − id) = Σ_p λᵖ 𝔴⁽ᵖ⁾`.
pub fn reconstruct(series: &PerturbationSeries, lambda: f64) -> Result<DiscreteMeasure> {
    if !lambda.is_finite() {
        return Err(CvpError::ArgError(format!("coupling {lambda} is not finite")));
    }
    let w = series.jet_at(lambda);
    series.base.push_forward(&w.scalars(), &w.vectors())
}

fn el_sup(measure: &DiscreteMeasure, lag: &LagrangianModel, nu: f64, space: TestSpace) -> Result<f64> {
    let basis: TestBasis = space.basis(measure.len(), measure.dim());
    Ok(weak_el_residual(measure, lag, nu, &basis)?.max_abs())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 4 {
        return Err(CvpError::ArgError(format!("slope grid needs at least 4 points, got {}", grid.len())));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(CvpError::ArgError("slope grid must be positive".into()));
    }
    Ok(())
}

/// Decay exponent of the weak EL residual of `reconstruct(series, λ)` over `grid`.
pub fn residual_slope(series: &PerturbationSeries, lag: &LagrangianModel, grid: &[f64]) -> Result<SlopeReport> {
    check_grid(grid)?;
    let res = grid
        .iter()
        .map(|l| el_sup(&reconstruct(series, *l)?, lag, series.nu, series.test_space))
        .collect::<Result<Vec<_>>>()?;
    residual_exponent(grid, &res)
}

/// Decay exponent of the weak EL residual of measures produced per grid point.
pub fn residual_slope_with<F>(
    grid: &[f64],
    lag: &LagrangianModel,
    nu: f64,
    space: TestSpace,
    mut measure_at: F,
) -> Result<SlopeReport>
where
    F: FnMut(f64) -> Result<DiscreteMeasure>,
{
    check_grid(grid)?;
    let res = grid
        .iter()
        .map(|l| el_sup(&measure_at(*l)?, lag, nu, space))
        .collect::<Result<Vec<_>>>()?;
    residual_exponent(grid, &res)
}

/// Residual slope of the order-`order` expansion started from `base` pushed by `λ·shift`,
/// reconstructed at unit coupling.
pub fn shifted_start_slope(
    base: &DiscreteMeasure,
    shift: &Jet,
    lag: &LagrangianModel,
    nu: f64,
    order: usize,
    opts: &ExpansionOptions,
    grid: &[f64],
) -> Result<SlopeReport> {
    check_jet(base, shift, "start shift")?;
    residual_slope_with(grid, lag, nu, opts.test_space, |l| {
        let s = shift.scaled(l);
        let start = base.push_forward(&s.scalars(), &s.vectors())?;
        let series = expand(&start, lag, nu, order, opts)?;
        reconstruct(&series, 1.0)
    })
}

/// Tree-diagram forest of the ledger as JSON.
pub fn export_diagrams(series: &PerturbationSeries) -> Result<serde_json::Value> {
    let ledger = series.ledger.as_ref().ok_or(CvpError::LedgerMissing)?;
    let nodes: Vec<serde_json::Value> = ledger
        .orders
        .iter()
        .enumerate()
        .filter(|(_, terms)| !terms.is_empty())
        .map(|(k, terms)| {
            let p = k + 1;
            if p == 1 {
                let norm = terms[0].value.norm();
                return serde_json::json!({"p": 1, "source": "Δ₀", "norm": norm, "children": []});
            }
            let children: Vec<serde_json::Value> = terms
                .iter()
                .map(|t| {
                    serde_json::json!({
                        "l": t.arity,
                        "composition": t.composition,
                        "norm": t.value.norm(),
                    })
                })
                .collect();
            serde_json::json!({"p": p, "source": "Δ_ℓ", "children": children})
        })
        .collect();
    Ok(serde_json::Value::Array(nodes))
}
