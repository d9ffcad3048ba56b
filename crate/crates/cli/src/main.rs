use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use cvp_cli::config::ScenarioConfig;
use cvp_cli::{builtins, report, slope};

#[derive(Parser)]
#[command(name = "cvp", version, about = "Scenario runner for causal variational principle perturbation theory")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario: a JSON config file or the name of a builtin.
    Run {
        config: String,
        /// Seed for randomized stages (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config; default cvp-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Treat right-hand sides outside the range of Δ as errors.
        #[arg(long)]
        strict: bool,
    },
    /// List builtin scenarios.
    List,
    /// Least-squares slope of log(y) against log(x) from two CSV columns.
    Slope {
        csv: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
    },
}

fn run(config_arg: &str, seed: Option<u64>, out: Option<PathBuf>, strict: bool) -> Result<bool> {
    let path = PathBuf::from(config_arg);
    let (config, scenario) = if path.is_file() {
        let stem = path.file_stem().map_or_else(|| config_arg.to_string(), |s| s.to_string_lossy().into_owned());
        (ScenarioConfig::from_path(&path)?, stem)
    } else if builtins::find(config_arg).is_some() {
        let config = ScenarioConfig { builtin: Some(config_arg.to_string()), ..ScenarioConfig::empty() };
        (config, config_arg.to_string())
    } else {
        anyhow::bail!("{config_arg:?} is neither a config file nor a builtin scenario (see `cvp list`)");
    };
    let out_dir = out.or_else(|| config.output.clone()).unwrap_or_else(|| PathBuf::from("cvp-out"));
    let seed = seed.or(config.seed).unwrap_or(0);
    let report = report::run(&config, &scenario, &out_dir, seed, strict)?;

    for stage in &report.stages {
        match &stage.error {
            None => println!("stage {} [{}]: ok, {} files", stage.name, stage.kind, stage.files.len()),
            Some(e) => println!("stage {} [{}]: FAILED: {e}", stage.name, stage.kind),
        }
    }
    for e in &report.expectations {
        let value = e.value.map_or_else(|| "missing".to_string(), |v| format!("{v:.6e}"));
        let tag = if e.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {} = {value}, expected {}", e.metric, e.condition);
    }
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, report.to_json_string()?)?;
    println!("report: {}", report_path.display());
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match cli.command {
        Command::Run { config, seed, out, strict } => run(&config, seed, out, strict),
        Command::List => {
            for b in builtins::BUILTINS {
                println!("{}\t{}", b.name, b.description);
            }
            Ok(true)
        }
        Command::Slope { csv, x, y } => slope::slope_from_csv(&csv, &x, &y).map(|fit| {
            let value = serde_json::json!({
                "x": x,
                "y": y,
                "rows": fit.points_used,
                "slope": fit.slope,
                "intercept": fit.intercept,
                "r_squared": fit.r_squared,
            });
            println!("{value}");
            true
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
