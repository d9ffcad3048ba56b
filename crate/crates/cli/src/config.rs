//! Scenario configuration, schema version 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cvp_core::jet::TestSpace;
use cvp_core::linops::Convention;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    /// Builtin whose stages and expectations run before the ones listed here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub expectations: Vec<Expectation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ScenarioConfig {
    pub fn empty() -> Self {
        Self { schema_version: SCHEMA_VERSION, builtin: None, stages: Vec::new(), expectations: Vec::new(), output: None, seed: None }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version);
        }
        let mut seen = std::collections::BTreeSet::new();
        for stage in &self.stages {
            if !seen.insert(stage.name()) {
                bail!("duplicate stage name {:?}", stage.name());
            }
        }
        for e in &self.expectations {
            e.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stage {
    Expansion(ExpansionStage),
    Fragmentation(FragmentationStage),
    Cfs(CfsStage),
    Mixing(MixingStage),
}

impl Stage {
    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Expansion(_) => "expansion",
            Stage::Fragmentation(_) => "fragmentation",
            Stage::Cfs(_) => "cfs",
            Stage::Mixing(_) => "mixing",
        }
    }

    pub fn name(&self) -> String {
        let explicit = match self {
            Stage::Expansion(s) => &s.name,
            Stage::Fragmentation(s) => &s.name,
            Stage::Cfs(s) => &s.name,
            Stage::Mixing(s) => &s.name,
        };
        explicit.clone().unwrap_or_else(|| self.kind().to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagrangianSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// `ν` as a number or the string `"calibrate"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NuSpec {
    Value(f64),
    Keyword(String),
}

impl Default for NuSpec {
    fn default() -> Self {
        NuSpec::Keyword("calibrate".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JetSpec {
    pub scalars: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub hi: f64,
    pub lo: f64,
    pub count: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { hi: 1e-1, lo: 1e-3, count: 6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionStage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub measure: MeasureSpec,
    pub lagrangian: LagrangianSpec,
    #[serde(default)]
    pub nu: NuSpec,
    #[serde(default)]
    pub test_space: TestSpace,
    #[serde(default)]
    pub convention: Convention,
    pub order: usize,
    /// Kernel jets added at orders `1, 2, …` as gauge offsets.
    #[serde(default)]
    pub gauge_seeds: Vec<JetSpec>,
    /// Start the expansion from the measure pushed by `λ·shift` and fit the residual slope.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<JetSpec>,
    #[serde(default)]
    pub lambda_grid: GridSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    /// Defaults to the first support point of the fragmented measure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec<f64>>,
    #[serde(default)]
    pub axis: usize,
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FragmentationStage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Weight of the first subsystem; the second gets `2 − first_weight`.
    pub first_weight: f64,
    pub spread: f64,
    #[serde(default)]
    pub regularized: bool,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<GridSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfsStage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub hilbert_dim: usize,
    pub spin_dim: usize,
    #[serde(default = "one")]
    pub trace: f64,
    #[serde(default)]
    pub kappa: f64,
    /// Scale of the random Hermitian generator of the unitary relating the two points.
    #[serde(default = "default_generator_scale")]
    pub generator_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn default_generator_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingStage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub subsystems: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    50
}

/// A check on `<stage name>.<metric>`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_least: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_most: Option<f64>,
}

impl Expectation {
    pub fn equals(metric: &str, value: f64, abs_tol: f64) -> Self {
        Self { metric: metric.into(), equals: Some(value), abs_tol: Some(abs_tol), rel_tol: None, at_least: None, at_most: None }
    }

    pub fn equals_rel(metric: &str, value: f64, rel_tol: f64) -> Self {
        Self { metric: metric.into(), equals: Some(value), abs_tol: None, rel_tol: Some(rel_tol), at_least: None, at_most: None }
    }

    pub fn at_least(metric: &str, bound: f64) -> Self {
        Self { metric: metric.into(), equals: None, abs_tol: None, rel_tol: None, at_least: Some(bound), at_most: None }
    }

    pub fn at_most(metric: &str, bound: f64) -> Self {
        Self { metric: metric.into(), equals: None, abs_tol: None, rel_tol: None, at_least: None, at_most: Some(bound) }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.metric.contains('.') {
            bail!("expectation metric {:?} must have the form <stage>.<metric>", self.metric);
        }
        if self.equals.is_none() && self.at_least.is_none() && self.at_most.is_none() {
            bail!("expectation on {:?} needs equals, at_least or at_most", self.metric);
        }
        if self.equals.is_none() && (self.abs_tol.is_some() || self.rel_tol.is_some()) {
            bail!("tolerances on {:?} require equals", self.metric);
        }
        Ok(())
    }

    /// Human-readable form of the condition.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.equals {
            let tol = match (self.abs_tol, self.rel_tol) {
                (Some(a), Some(r)) => format!(" (abs {a:e}, rel {r:e})"),
                (Some(a), None) => format!(" (abs {a:e})"),
                (None, Some(r)) => format!(" (rel {r:e})"),
                (None, None) => format!(" (abs {:e})", DEFAULT_ABS_TOL),
            };
            parts.push(format!("= {v:e}{tol}"));
        }
        if let Some(v) = self.at_least {
            parts.push(format!(">= {v:e}"));
        }
        if let Some(v) = self.at_most {
            parts.push(format!("<= {v:e}"));
        }
        parts.join(", ")
    }

    pub fn holds(&self, value: f64) -> bool {
        if value.is_nan() {
            return false;
        }
        if let Some(want) = self.equals {
            let err = (value - want).abs();
            let ok = match (self.abs_tol, self.rel_tol) {
                (Some(a), Some(r)) => err <= a || err <= r * want.abs(),
                (Some(a), None) => err <= a,
                (None, Some(r)) => err <= r * want.abs(),
                (None, None) => err <= DEFAULT_ABS_TOL,
            };
            if !ok {
                return false;
            }
        }
        self.at_least.is_none_or(|b| value >= b) && self.at_most.is_none_or(|b| value <= b)
    }
}

pub const DEFAULT_ABS_TOL: f64 = 1e-9;
