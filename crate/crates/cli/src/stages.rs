//! Stage runners. Each writes its artifacts under the output directory and returns metrics.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cvp_core::cfs::{
    causal_action, causal_lagrangian, cfs_as_lagrangian, two_point_chart_measure, CMatrix, CfsParams, CfsSystem, Chart, C64,
};
use cvp_core::el::{calibrate_nu, weak_el_residual};
use cvp_core::expansion::{expand, shifted_start_slope, ExpansionOptions};
use cvp_core::fit::geometric_grid;
use cvp_core::fragmentation::{
    example52_lin_fluct_coordinates, example52_scenario, perturbed_laplacian_lin_fluct, wellposedness_check, Verdict,
};
use cvp_core::jet::{Jet, TestBasis};
use cvp_core::lagrangian::LagrangianModel;
use cvp_core::measure::DiscreteMeasure;
use cvp_core::mixing::{haar_unitary, minimize_mixing, stratum_defect, unitary_pushforward, Group, MixingOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CfsStage, ExpansionStage, FragmentationStage, GridSpec, JetSpec, MixingStage, NuSpec, Stage};

/// Tolerance for `calibrate_nu` when `ν` is requested as `"calibrate"`.
const CALIBRATION_TOL: f64 = 1e-8;

pub struct StageContext<'a> {
    pub out_dir: &'a Path,
    pub seed: u64,
    pub strict: bool,
}

#[derive(Debug, Default)]
pub struct StageOutput {
    /// Non-finite values are stored as `None`.
    pub metrics: BTreeMap<String, Option<f64>>,
    pub notes: BTreeMap<String, String>,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
}

impl StageOutput {
    fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value.is_finite().then_some(value));
    }

    fn note(&mut self, key: &str, value: impl Into<String>) {
        self.notes.insert(key.to_string(), value.into());
    }

    fn write(&mut self, ctx: &StageContext, file: String, contents: &str) -> Result<()> {
        let path = ctx.out_dir.join(&file);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(file);
        Ok(())
    }

    fn write_json(&mut self, ctx: &StageContext, file: String, value: &serde_json::Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(ctx, file, &text)
    }
}

pub fn run_stage(stage: &Stage, ctx: &StageContext) -> Result<StageOutput> {
    let name = stage.name();
    match stage {
        Stage::Expansion(s) => run_expansion(&name, s, ctx),
        Stage::Fragmentation(s) => run_fragmentation(&name, s, ctx),
        Stage::Cfs(s) => run_cfs(&name, s, ctx),
        Stage::Mixing(s) => run_mixing(&name, s, ctx),
    }
}

fn grid(spec: &GridSpec) -> Result<Vec<f64>> {
    if !(spec.hi > spec.lo && spec.lo > 0.0) || spec.count < 2 {
        bail!("lambda_grid needs hi > lo > 0 and count >= 2");
    }
    Ok(geometric_grid(spec.hi, spec.lo, spec.count))
}

fn jet(spec: &JetSpec) -> Result<Jet> {
    Ok(Jet::from_parts(&spec.scalars, &spec.vectors)?)
}

fn run_expansion(name: &str, s: &ExpansionStage, ctx: &StageContext) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let measure = DiscreteMeasure::new(s.measure.points.clone(), s.measure.weights.clone())?;
    let lag = LagrangianModel::from_registry(&s.lagrangian.name, &s.lagrangian.params)?;
    let nu = match &s.nu {
        NuSpec::Value(v) => *v,
        NuSpec::Keyword(k) if k == "calibrate" => calibrate_nu(&measure, &lag, CALIBRATION_TOL)?,
        NuSpec::Keyword(k) => bail!("nu must be a number or \"calibrate\", got {k:?}"),
    };
    let opts = ExpansionOptions {
        convention: s.convention,
        test_space: s.test_space,
        strict: ctx.strict,
        offsets: s.gauge_seeds.iter().map(|j| jet(j).map(Some)).collect::<Result<_>>()?,
        ..ExpansionOptions::default()
    };
    out.metric("nu", nu);
    out.metric("order", s.order as f64);
    let basis = s.test_space.basis(measure.len(), measure.dim());
    out.metric("base_residual", weak_el_residual(&measure, &lag, nu, &basis)?.max_abs());

    let series = expand(&measure, &lag, nu, s.order, &opts)?;
    out.metric("first_order_norm", series.jets.first().map_or(0.0, Jet::norm));
    out.write_json(ctx, format!("{name}_series.json"), &series.to_json())?;

    if let Some(shift) = &s.shift {
        let lambdas = grid(&s.lambda_grid)?;
        let report = shifted_start_slope(&measure, &jet(shift)?, &lag, nu, s.order, &opts, &lambdas)?;
        out.metric("slope", report.slope);
        if let Some(fit) = &report.fit {
            out.metric("r_squared", fit.r_squared);
        }
        out.write(ctx, format!("{name}_residuals.csv"), &report.to_csv(s.order))?;
    }
    Ok(out)
}

fn run_fragmentation(name: &str, s: &FragmentationStage, ctx: &StageContext) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let scenario = example52_scenario(s.first_weight, s.spread, s.regularized)?;
    let fm = scenario.fragment(s.lambda)?;
    let points = fm.points().to_vec();
    for (a, p) in points.iter().enumerate() {
        out.metric(&format!("ell_p{}", a + 1), fm.ell(&scenario.lagrangian, scenario.nu, p)?);
        for (k, g) in fm.ell_gradient(&scenario.lagrangian, p)?.into_iter().enumerate() {
            out.metric(&format!("grad_p{}_{}", a + 1, k + 1), g);
        }
    }
    let form = perturbed_laplacian_lin_fluct(&scenario, s.lambda, &example52_lin_fluct_coordinates())?;
    for r in 0..form.nrows() {
        for c in 0..form.ncols() {
            out.metric(&format!("laplacian_{r}{c}"), form[(r, c)]);
        }
    }
    out.write(ctx, format!("{name}_support.csv"), &fm.support_csv(s.lambda))?;

    if let Some(profile) = &s.profile {
        let anchor = profile.anchor.clone().unwrap_or_else(|| points[0].clone());
        let values = fm.ell_profile(
            &scenario.lagrangian,
            scenario.nu,
            &anchor,
            profile.axis,
            profile.lo,
            profile.hi,
            profile.samples,
        )?;
        let mut csv = csv::Writer::from_writer(Vec::new());
        csv.write_record([format!("x{}", profile.axis + 1), "ell".to_string(), "lambda".to_string()])?;
        for (t, v) in &values {
            csv.write_record([format!("{t:e}"), format!("{v:e}"), format!("{:e}", s.lambda)])?;
        }
        let text = String::from_utf8(csv.into_inner()?)?;
        out.write(ctx, format!("{name}_profile.csv"), &text)?;
        let (argmin, min) = values.iter().copied().fold((f64::NAN, f64::INFINITY), |acc, (t, v)| if v < acc.1 { (t, v) } else { acc });
        let offset = points
            .iter()
            .filter(|p| p.iter().enumerate().all(|(k, x)| k == profile.axis || (x - anchor[k]).abs() < 1e-12))
            .map(|p| (p[profile.axis] - argmin).abs())
            .fold(f64::INFINITY, f64::min);
        out.metric("profile_min", min);
        out.metric("profile_argmin", argmin);
        out.metric("profile_min_offset", offset);
    }

    if let Some(spec) = &s.lambda_grid {
        let report = wellposedness_check(&scenario, &grid(spec)?)?;
        out.metric("definiteness_order", report.definiteness_order);
        out.metric("error_exponent", report.error_exponent);
        out.metric("well_posed", if report.verdict == Verdict::WellPosed { 1.0 } else { 0.0 });
        out.note("verdict", format!("{:?}", report.verdict));
        out.note("reason", report.reason.clone());
        out.write_json(ctx, format!("{name}_wellposedness.json"), &report.to_json())?;
    }
    Ok(out)
}

fn random_hermitian(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> CMatrix {
    let a = CMatrix::from_fn(dim, dim, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    (&a + a.adjoint()) * C64::new(0.5 * scale, 0.0)
}

fn run_cfs(name: &str, s: &CfsStage, ctx: &StageContext) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let params = CfsParams::new(s.hilbert_dim, s.spin_dim, s.trace, s.kappa)?;
    let center = params.default_center();
    let chart = Chart::new(&center, &params)?;
    let lag = cfs_as_lagrangian(&chart);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let generator = random_hermitian(s.hilbert_dim, s.generator_scale, &mut rng);
    let unitary = (generator * C64::new(0.0, 1.0)).exp();

    let measure = two_point_chart_measure(&chart, &unitary)?;
    let nu = calibrate_nu(&measure, &lag, CALIBRATION_TOL)?;
    let basis = TestBasis::scalar_only(measure.len(), chart.dim());
    out.metric("chart_dim", chart.dim() as f64);
    out.metric("nu", nu);
    out.metric("weak_el_residual", weak_el_residual(&measure, &lag, nu, &basis)?.max_abs());

    let partner = center.conjugated(&unitary);
    out.metric("lagrangian_xy", causal_lagrangian(&center, &partner, &params)?.0);
    let system = CfsSystem::new(params, vec![center, partner], vec![0.5, 0.5])?;
    let (action, constraint) = causal_action(&system)?;
    out.metric("action", action);
    out.metric("boundedness", constraint);
    let moved = unitary_pushforward(&system, &haar_unitary(s.hilbert_dim, &mut rng))?;
    let (moved_action, moved_constraint) = causal_action(&moved)?;
    out.metric("invariance_defect", (moved_action - action).abs().max((moved_constraint - constraint).abs()));
    out.write_json(ctx, format!("{name}_system.json"), &system.to_json())?;
    Ok(out)
}

fn run_mixing(name: &str, s: &MixingStage, ctx: &StageContext) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let opts = MixingOptions { restarts: s.restarts, seed: ctx.seed, ..MixingOptions::default() };
    let result = minimize_mixing(s.subsystems, &Group::Full, &opts)?;
    out.metric("min_value", result.min_value);
    out.metric("restarts", result.restarts as f64);
    out.metric("stratum_defect", stratum_defect(&result.argmin));
    out.write_json(ctx, format!("{name}_result.json"), &result.to_json())?;
    Ok(out)
}
