//! Run orchestration and the JSON run report.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ScenarioConfig, SCHEMA_VERSION};
use crate::stages::{run_stage, StageContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub strict: bool,
    pub stages: Vec<StageReport>,
    pub expectations: Vec<ExpectationReport>,
    pub passed: bool,
    pub manifest: Vec<ManifestEntry>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageReport {
    pub name: String,
    pub kind: String,
    /// `ok` or `failed`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// `null` marks a non-finite value.
    pub metrics: BTreeMap<String, Option<f64>>,
    pub notes: BTreeMap<String, String>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectationReport {
    pub metric: String,
    pub condition: String,
    pub value: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
}

impl RunReport {
    pub fn to_json_string(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        anyhow::ensure!(report.schema_version == SCHEMA_VERSION, "unsupported report schema_version {}", report.schema_version);
        Ok(report)
    }
}

/// Merges a builtin's stages and expectations in front of the config's own.
pub fn resolve(config: &ScenarioConfig) -> Result<ScenarioConfig> {
    let mut resolved = config.clone();
    if let Some(name) = &config.builtin {
        let builtin = crate::builtins::find(name).with_context(|| format!("unknown builtin {name:?}"))?;
        let base = builtin.config();
        resolved.stages = base.stages.into_iter().chain(config.stages.iter().cloned()).collect();
        resolved.expectations = base.expectations.into_iter().chain(config.expectations.iter().cloned()).collect();
    }
    resolved.validate()?;
    Ok(resolved)
}

pub fn run(config: &ScenarioConfig, scenario: &str, out_dir: &Path, seed: u64, strict: bool) -> Result<RunReport> {
    let start = Instant::now();
    let config = resolve(config)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ctx = StageContext { out_dir, seed, strict };

    let mut stages = Vec::new();
    for stage in &config.stages {
        let name = stage.name();
        log::info!("running stage {name}");
        let report = match run_stage(stage, &ctx) {
            Ok(out) => StageReport {
                name,
                kind: stage.kind().into(),
                status: "ok".into(),
                error: None,
                metrics: out.metrics,
                notes: out.notes,
                files: out.files,
            },
            Err(e) => {
                log::error!("stage {name} failed: {e:#}");
                StageReport {
                    name,
                    kind: stage.kind().into(),
                    status: "failed".into(),
                    error: Some(format!("{e:#}")),
                    metrics: BTreeMap::new(),
                    notes: BTreeMap::new(),
                    files: Vec::new(),
                }
            }
        };
        stages.push(report);
    }

    let expectations: Vec<ExpectationReport> = config
        .expectations
        .iter()
        .map(|e| {
            let (stage, metric) = e.metric.split_once('.').expect("validated metric path");
            let value = stages.iter().find(|s| s.name == stage).and_then(|s| s.metrics.get(metric).copied().flatten());
            ExpectationReport {
                metric: e.metric.clone(),
                condition: e.describe(),
                value,
                passed: value.is_some_and(|v| e.holds(v)),
            }
        })
        .collect();

    let mut manifest = Vec::new();
    for file in stages.iter().flat_map(|s| &s.files) {
        let bytes = std::fs::metadata(out_dir.join(file))?.len();
        manifest.push(ManifestEntry { path: file.clone(), bytes });
    }
    let passed = stages.iter().all(|s| s.status == "ok") && expectations.iter().all(|e| e.passed);
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.to_string(),
        seed,
        strict,
        stages,
        expectations,
        passed,
        manifest,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
