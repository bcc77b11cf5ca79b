use clap::{Parser, Subcommand};
use convord::config::{ExperimentConfig, ThresholdField};
use convord::report::{envelope, execute, exit_code};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

/// Simulation and verification toolkit for truncated Euler schemes of 1-D
/// Brownian SDEs. Thread count follows RAYON_NUM_THREADS.
#[derive(Parser)]
#[command(name = "convord", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the path count.
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Override the step count m.
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Override the truncation threshold ("auto" or a number).
    #[arg(long, global = true)]
    threshold: Option<String>,

    /// Run hypothesis-violating experiments anyway.
    #[arg(long, global = true)]
    override_hypotheses: bool,

    /// Output directory (defaults to the config's [output] dir or "out").
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated report formats (json, csv).
    #[arg(long, global = true)]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Regularity constants and scheme admissibility bounds.
    Constants,
    /// Simulate a panel and dump it (binary, plus CSV for small runs).
    Simulate,
    /// Paired ordering experiment.
    Compare,
    /// Kernel-oracle convexity propagation (optional MC cross-check).
    Propagate,
    /// Strong-rate and truncation-tail diagnostics.
    Converge,
    /// Non-convex-volatility counterexample reproduction.
    Counterexample,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Constants => "constants",
            Command::Simulate => "simulate",
            Command::Compare => "compare",
            Command::Propagate => "propagate",
            Command::Converge => "converge",
            Command::Counterexample => "counterexample",
        }
    }
}

fn run() -> Result<i32, convord::Error> {
    let cli = Cli::parse();
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| convord::Error::Config("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(config_path)?;
    let mut cfg = ExperimentConfig::parse(&text)?;

    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(paths) = cli.paths {
        cfg.run.paths = paths;
    }
    if let Some(steps) = cli.steps {
        cfg.scheme.m = steps;
    }
    if let Some(threshold) = &cli.threshold {
        cfg.scheme.threshold = if threshold == "auto" {
            ThresholdField::Auto("auto".into())
        } else {
            ThresholdField::Value(
                threshold
                    .parse()
                    .map_err(|_| convord::Error::Config(format!("bad threshold '{threshold}'")))?,
            )
        };
    }
    if cli.override_hypotheses {
        cfg.run.override_hypotheses = true;
    }

    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(|o| PathBuf::from(&o.dir)))
        .unwrap_or_else(|| PathBuf::from("out"));
    let formats: Vec<String> = cli
        .format
        .map(|f| f.split(',').map(|s| s.trim().to_string()).collect())
        .or_else(|| cfg.output.as_ref().map(|o| o.formats.clone()))
        .unwrap_or_else(|| vec!["json".into()]);

    let start = Instant::now();
    let outcome = execute(cli.command.name(), &cfg, &out_dir)?;
    let report = envelope(
        cli.command.name(),
        &text,
        &outcome.results,
        start.elapsed().as_millis(),
        outcome.pass,
    );

    std::fs::create_dir_all(&out_dir)?;
    if formats.iter().any(|f| f == "json") {
        let path = out_dir.join(format!("{}.json", cli.command.name()));
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        eprintln!("wrote {}", path.display());
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(exit_code(outcome.pass))
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
