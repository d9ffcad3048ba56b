use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvp_cli::config::ScenarioConfig;
use cvp_cli::report::RunReport;
use cvp_core::expansion::PerturbationSeries;
use cvp_core::fragmentation::{example52_lin_fluct_coordinates, example52_scenario};
use tempfile::TempDir;

fn cvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvp")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path
}

fn run_config(dir: &Path, json: &str, extra: &[&str]) -> (Output, PathBuf) {
    let config = write_config(dir, "config.json", json);
    let out = dir.join("out");
    let mut args = vec!["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (cvp(&args), out)
}

fn read_report(out: &Path) -> RunReport {
    RunReport::from_json_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn metric(report: &RunReport, stage: &str, key: &str) -> f64 {
    let s = report.stages.iter().find(|s| s.name == stage).expect("stage present");
    s.metrics[key].expect("finite metric")
}

/// The report with the wall-clock field zeroed.
fn without_clock(out: &Path) -> String {
    let mut report = read_report(out);
    report.wall_clock_seconds = 0.0;
    report.to_json_string().unwrap()
}

#[test]
fn list_is_lexicographic_and_contains_builtins() {
    let out = cvp(&["list"]);
    assert!(out.status.success());
    let names: Vec<String> = stdout(&out).lines().map(|l| l.split('\t').next().unwrap().to_string()).collect();
    for want in ["example52-fragmentation", "mixing-L2", "cfs-two-point", "expansion-quartic-1d"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn empty_stage_list_gives_empty_report_and_exit_zero() {
    let dir = TempDir::new().unwrap();
    let (out, out_dir) = run_config(dir.path(), r#"{"schema_version": 1, "stages": []}"#, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = read_report(&out_dir);
    assert!(report.stages.is_empty() && report.expectations.is_empty() && report.manifest.is_empty());
    assert!(report.passed);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let (out, _) = run_config(dir.path(), r#"{"schema_version": 1, "stages": [], "colour": "red"}"#, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown field"), "{}", stderr(&out));

    let nested = r#"{"schema_version": 1, "stages": [{"stage": "mixing", "subsystems": 2, "restart": 3}]}"#;
    let (out, _) = run_config(dir.path(), nested, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown field"), "{}", stderr(&out));
}

#[test]
fn schema_version_and_expectation_paths_are_validated() {
    assert!(ScenarioConfig::from_json_str(r#"{"schema_version": 2}"#).is_err());
    assert!(ScenarioConfig::from_json_str(r#"{"schema_version": 1, "expectations": [{"metric": "slope", "at_least": 1}]}"#).is_err());
    assert!(ScenarioConfig::from_json_str(r#"{"schema_version": 1, "expectations": [{"metric": "a.b"}]}"#).is_err());
    let dup = r#"{"schema_version": 1, "stages": [{"stage": "mixing", "subsystems": 2}, {"stage": "mixing", "subsystems": 3}]}"#;
    assert!(ScenarioConfig::from_json_str(dup).is_err());
    let dir = TempDir::new().unwrap();
    let (out, _) = run_config(dir.path(), r#"{"schema_version": 2}"#, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("schema_version"));
}

#[test]
fn unknown_scenario_argument_is_a_usage_error() {
    let out = cvp(&["run", "no-such-scenario"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("neither a config file nor a builtin"));
}

#[test]
fn mixing_builtin_reports_minimum_two() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("mix");
    let out = cvp(&["run", "mixing-L2", "--out", out_dir.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report = read_report(&out_dir);
    assert_eq!(report.seed, 3);
    assert!((metric(&report, "mixing", "min_value") - 2.0).abs() <= 1e-6);
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("mixing_result.json")).unwrap()).unwrap();
    assert_eq!(result["L"], 2);
    assert_eq!(result["restarts"], 50);
    assert_eq!(result["per_restart"].as_array().unwrap().len(), 50);
}

#[test]
fn manifest_files_exist_and_are_non_empty() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("e52");
    cvp(&["run", "example52-fragmentation", "--out", out_dir.to_str().unwrap()]);
    let report = read_report(&out_dir);
    assert_eq!(report.manifest.len(), 3);
    for entry in &report.manifest {
        let meta = std::fs::metadata(out_dir.join(&entry.path)).unwrap();
        assert!(meta.len() > 0);
        assert_eq!(meta.len(), entry.bytes);
    }
}

#[test]
fn example52_builtin_reports_the_laplacian_check_honestly() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("e52");
    let out = cvp(&["run", "example52-fragmentation", "--out", out_dir.to_str().unwrap()]);
    // The vector entry of the lin-F form is 8λ²(6w² − 1) = 16λ² at w² = 1/2, not 24λ².
    assert_eq!(out.status.code(), Some(1), "{}", stdout(&out));
    let report = read_report(&out_dir);
    let lambda: f64 = 0.1;
    assert!((metric(&report, "fragmentation", "laplacian_00") - 2.0 * lambda.powi(4)).abs() <= 1e-8 * 2e-4);
    assert!((metric(&report, "fragmentation", "laplacian_11") - 16.0 * lambda * lambda).abs() <= 1e-10);
    let by_metric = |m: &str| report.expectations.iter().find(|e| e.metric == m).unwrap().passed;
    assert!(by_metric("fragmentation.laplacian_00"));
    assert!(!by_metric("fragmentation.laplacian_11"));
    assert!(by_metric("fragmentation.well_posed"));
    assert!(by_metric("fragmentation.profile_min_offset"));
    assert_eq!(report.stages[0].notes["verdict"], "WellPosed");

    let profile = std::fs::read_to_string(out_dir.join("fragmentation_profile.csv")).unwrap();
    let mut lines = profile.lines();
    assert_eq!(lines.next(), Some("x1,ell,lambda"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let c: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(c[2], lambda);
            (c[0], c[1])
        })
        .collect();
    assert_eq!(rows.len(), 401);
    assert_eq!(rows[0].0, -0.2);
    assert_eq!(rows[400].0, 0.2);
    // Both support points p = λ(±w, 1) sit at local minima of the profile through them.
    let w = std::f64::consts::FRAC_1_SQRT_2;
    for x in [lambda * w, -lambda * w] {
        let k = rows.iter().enumerate().min_by(|a, b| (a.1 .0 - x).abs().total_cmp(&(b.1 .0 - x).abs())).unwrap().0;
        assert!(rows[k].1 <= rows[k - 1].1 && rows[k].1 <= rows[k + 1].1);
    }
    let support = std::fs::read_to_string(out_dir.join("fragmentation_support.csv")).unwrap();
    assert_eq!(support.lines().next(), Some("subsystem,x1,x2,weight,lambda"));
    assert_eq!(support.lines().count(), 3);
}

#[test]
fn expansion_builtin_series_and_residuals_round_trip() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("quartic");
    let out = cvp(&["run", "expansion-quartic-1d", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report = read_report(&out_dir);
    let slope = metric(&report, "expansion", "slope");
    assert!(slope >= 2.8);

    let text = std::fs::read_to_string(out_dir.join("expansion_series.json")).unwrap();
    let series = PerturbationSeries::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
    assert_eq!(series.order(), 2);

    let csv = out_dir.join("expansion_residuals.csv");
    let fit = cvp(&["slope", csv.to_str().unwrap(), "--x", "lambda", "--y", "residual"]);
    assert!(fit.status.success(), "{}", stderr(&fit));
    let v: serde_json::Value = serde_json::from_str(stdout(&fit).trim()).unwrap();
    assert!((v["slope"].as_f64().unwrap() - slope).abs() <= 1e-9);
    assert_eq!(v["rows"], 6);
}

#[test]
fn cfs_builtin_pair_is_critical_and_invariant() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("cfs");
    let out = cvp(&["run", "cfs-two-point", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report = read_report(&out_dir);
    assert_eq!(metric(&report, "cfs", "chart_dim"), 3.0);
    assert!(metric(&report, "cfs", "action") >= 0.0);
    let text = std::fs::read_to_string(out_dir.join("cfs_system.json")).unwrap();
    let system = cvp_core::cfs::CfsSystem::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
    let (action, _) = cvp_core::cfs::causal_action(&system).unwrap();
    assert!((action - metric(&report, "cfs", "action")).abs() <= 1e-15);
}

#[test]
fn same_config_and_seed_give_identical_reports() {
    let json = r#"{
        "schema_version": 1,
        "stages": [
            {"stage": "mixing", "subsystems": 3, "restarts": 4},
            {"stage": "cfs", "name": "pair", "hilbert_dim": 3, "spin_dim": 1, "generator_scale": 0.2}
        ],
        "expectations": [{"metric": "mixing.min_value", "equals": 3, "abs_tol": 1e-6}]
    }"#;
    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for _ in 0..2 {
        let dir = TempDir::new().unwrap();
        let (out, out_dir) = run_config(dir.path(), json, &["--seed", "11"]);
        assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
        reports.push(without_clock(&out_dir));
        artifacts.push(
            ["mixing_result.json", "pair_system.json"].map(|f| std::fs::read(out_dir.join(f)).unwrap()),
        );
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(artifacts[0], artifacts[1]);

    let dir = TempDir::new().unwrap();
    let (_, out_dir) = run_config(dir.path(), json, &["--seed", "12"]);
    assert_ne!(std::fs::read(out_dir.join("pair_system.json")).unwrap(), artifacts[0][1]);
}

#[test]
fn builtin_reference_merges_with_own_stages() {
    let dir = TempDir::new().unwrap();
    let json = r#"{
        "schema_version": 1,
        "builtin": "mixing-L2",
        "seed": 5,
        "stages": [{"stage": "mixing", "name": "three", "subsystems": 3, "restarts": 5}],
        "expectations": [{"metric": "three.min_value", "at_most": 3.000001}]
    }"#;
    let (out, out_dir) = run_config(dir.path(), json, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report = read_report(&out_dir);
    assert_eq!(report.seed, 5);
    assert_eq!(report.stages.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["mixing", "three"]);
    assert_eq!(report.expectations.len(), 2);
}

#[test]
fn failed_expectation_and_missing_metric_exit_one() {
    let dir = TempDir::new().unwrap();
    let json = r#"{
        "schema_version": 1,
        "stages": [{"stage": "mixing", "subsystems": 2, "restarts": 3}],
        "expectations": [
            {"metric": "mixing.min_value", "at_most": 1.5},
            {"metric": "mixing.nothing", "at_least": 0}
        ]
    }"#;
    let (out, out_dir) = run_config(dir.path(), json, &[]);
    assert_eq!(out.status.code(), Some(1));
    let report = read_report(&out_dir);
    assert!(report.expectations.iter().all(|e| !e.passed));
    assert_eq!(report.expectations[1].value, None);
    assert!(stdout(&out).contains("[FAIL] mixing.nothing = missing"));
}

#[test]
fn stage_errors_carry_the_stage_name() {
    let dir = TempDir::new().unwrap();
    let json = r#"{
        "schema_version": 1,
        "stages": [{"stage": "expansion", "name": "bad", "measure": {"points": [[0.0]], "weights": [1.0]},
                    "lagrangian": {"name": "no_such_model"}, "order": 1}]
    }"#;
    let (out, out_dir) = run_config(dir.path(), json, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("stage bad [expansion]: FAILED"));
    let report = read_report(&out_dir);
    assert_eq!(report.stages[0].status, "failed");
    assert!(report.stages[0].error.as_ref().unwrap().contains("no_such_model"));
}

#[test]
fn strict_flag_turns_out_of_range_components_into_errors() {
    // Second convention on the symmetric square pair: the shifted start produces error terms off the range.
    let json = r#"{
        "schema_version": 1,
        "stages": [{"stage": "expansion", "measure": {"points": [[-1.0], [1.0]], "weights": [1.0, 1.0]},
                    "lagrangian": {"name": "square_distance", "params": {"dim": 1}}, "convention": "breve",
                    "order": 2, "shift": {"scalars": [0.1, -0.2], "vectors": [[0.3], [0.1]]}}]
    }"#;
    let dir = TempDir::new().unwrap();
    let (out, _) = run_config(dir.path(), json, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let (out, out_dir) = run_config(dir.path(), json, &["--strict"]);
    assert_eq!(out.status.code(), Some(1));
    let report = read_report(&out_dir);
    assert!(report.strict);
    assert!(report.stages[0].error.as_ref().unwrap().contains("not in the range"));
}

#[test]
fn critical_start_is_not_flagged_by_strict_mode() {
    let json = r#"{
        "schema_version": 1,
        "stages": [{"stage": "expansion", "measure": {"points": [[0.0], [0.8]], "weights": [0.5, 0.5]},
                    "lagrangian": {"name": "warped_pair"}, "order": 3}]
    }"#;
    let dir = TempDir::new().unwrap();
    let (out, out_dir) = run_config(dir.path(), json, &["--strict"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report = read_report(&out_dir);
    assert!((metric(&report, "expansion", "nu") - 3.0).abs() <= 1e-12);
    assert!(metric(&report, "expansion", "first_order_norm") <= 1e-12);
}

fn write_csv(dir: &Path, rows: &[(f64, f64)]) -> PathBuf {
    let mut text = String::from("lambda,value\n");
    for (x, y) in rows {
        text.push_str(&format!("{x:e},{y:e}\n"));
    }
    write_config(dir, "series.csv", &text)
}

fn slope_of(csv: &Path) -> Output {
    cvp(&["slope", csv.to_str().unwrap(), "--x", "lambda", "--y", "value"])
}

#[test]
fn slope_of_square_and_constant_series() {
    let dir = TempDir::new().unwrap();
    let xs = [0.1, 0.05, 0.02, 0.01, 0.005];
    let square = write_csv(dir.path(), &xs.map(|x| (x, x * x)));
    let v: serde_json::Value = serde_json::from_str(stdout(&slope_of(&square)).trim()).unwrap();
    assert!((v["slope"].as_f64().unwrap() - 2.0).abs() <= 0.01);
    assert!((v["r_squared"].as_f64().unwrap() - 1.0).abs() <= 1e-12);
    let constant = write_csv(dir.path(), &xs.map(|x| (x, 3.0)));
    let v: serde_json::Value = serde_json::from_str(stdout(&slope_of(&constant)).trim()).unwrap();
    assert!(v["slope"].as_f64().unwrap().abs() <= 1e-12);
}

#[test]
fn slope_rejects_degenerate_input() {
    let dir = TempDir::new().unwrap();
    let short = write_csv(dir.path(), &[(0.1, 0.01), (0.05, 0.0025), (0.02, 0.0004)]);
    let out = slope_of(&short);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("at least 4 rows"));
    let negative = write_csv(dir.path(), &[(0.1, 0.01), (0.05, -0.0025), (0.02, 0.0004), (0.01, 0.0001)]);
    assert_eq!(slope_of(&negative).status.code(), Some(2));
    let out = cvp(&["slope", negative.to_str().unwrap(), "--x", "lambda", "--y", "missing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("column \"missing\" not found"));
}

#[test]
fn slope_of_scalar_row_error_in_plane_example_is_four() {
    // Scalar lin-F component of the EL error for unequal subsystem weights: −8λ⁴(f − 1)w²(w² − 1).
    let (f, w) = (1.5, 0.5);
    let scenario = example52_scenario(f, w, false).unwrap();
    let scalar_test = &example52_lin_fluct_coordinates()[..1];
    let dir = TempDir::new().unwrap();
    let rows: Vec<(f64, f64)> = [0.1, 0.05, 0.025, 0.0125, 0.00625]
        .iter()
        .map(|&l| {
            let fm = scenario.fragment(l).unwrap();
            let r = fm.residuals(&scenario.lagrangian, scenario.nu, scalar_test).unwrap()[0];
            let closed = -8.0 * l.powi(4) * (f - 1.0) * w * w * (w * w - 1.0);
            assert!((r.abs() - closed.abs()).abs() <= 1e-10 * closed.abs(), "{r} vs {closed}");
            (l, r.abs())
        })
        .collect();
    let v: serde_json::Value = serde_json::from_str(stdout(&slope_of(&write_csv(dir.path(), &rows))).trim()).unwrap();
    assert!((v["slope"].as_f64().unwrap() - 4.0).abs() <= 0.01);
}

#[test]
fn report_round_trips_under_the_schema() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("q");
    cvp(&["run", "expansion-quartic-1d", "--out", out_dir.to_str().unwrap()]);
    let text = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    let report = RunReport::from_json_str(&text).unwrap();
    assert_eq!(report.to_json_string().unwrap(), text);
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["extra"] = serde_json::json!(1);
    assert!(RunReport::from_json_str(&value.to_string()).is_err());
}
