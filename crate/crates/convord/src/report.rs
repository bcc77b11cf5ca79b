//! Report assembly: a JSON envelope whose stable part is hashed for
//! determinism checks (timestamps and runtimes are excluded), plus flat CSV
//! emission and the exit-code contract.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::kernel::{backward_induct_terminal, build_measure, grid_convexity_defect, kernel_ordering_gap, GridFunction};
use crate::ordering::{compare_ordered, counterexample_demo, value_function_convexity, OrderingReport};
use crate::convergence::{strong_error_rate, truncation_event_rate, ThresholdPolicy};
use crate::euler::{simulate_batch, NoisePanel};
use crate::functionals::Kind;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

/// Convexity-defect tolerance used by the propagate verdict (documented
/// next to the grid resolution: the piecewise-linear bias is positive, so
/// the floor only absorbs f64 rounding).
pub const PROPAGATION_DEFECT_TOL: f64 = 1e-8;

/// Strong-rate acceptance window for the converge command.
pub const RATE_SLOPE_WINDOW: (f64, f64) = (-0.62, -0.38);

/// Outcome of one CLI command.
pub struct CommandOutcome {
    pub results: Value,
    /// true when every verdict passed; drives the exit code.
    pub pass: bool,
}

/// Builds the full JSON envelope. The stability hash covers everything
/// except `generated_at_unix_ms` and `runtime_ms`.
pub fn envelope(command: &str, config_text: &str, results: &Value, runtime_ms: u128, pass: bool) -> Value {
    let mut stable = Map::new();
    stable.insert("tool".into(), json!("convord"));
    stable.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    stable.insert("command".into(), json!(command));
    stable.insert("config_toml".into(), json!(config_text));
    stable.insert("pass".into(), json!(pass));
    stable.insert("results".into(), results.clone());
    let hash = {
        let bytes = serde_json::to_vec(&Value::Object(stable.clone())).expect("stable part serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        format!("{:x}", hasher.finalize())
    };
    let mut full = stable;
    full.insert("stability_hash".into(), json!(hash));
    full.insert(
        "generated_at_unix_ms".into(),
        json!(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)),
    );
    full.insert("runtime_ms".into(), json!(runtime_ms));
    Value::Object(full)
}

/// Drops the volatile fields, for byte comparisons across runs.
pub fn strip_volatile(report: &Value) -> Value {
    let mut v = report.clone();
    if let Some(map) = v.as_object_mut() {
        map.remove("generated_at_unix_ms");
        map.remove("runtime_ms");
    }
    v
}

/// Exit-code contract: 0 all pass, 2 at least one violation/failure,
/// 1 configuration or runtime error (mapped by the binary).
pub fn exit_code(pass: bool) -> i32 {
    if pass {
        0
    } else {
        2
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Flat CSV for an ordering report: one data row per functional.
pub fn ordering_csv(report: &OrderingReport) -> String {
    let mut out = String::from(
        "functional,mean_x,mean_y,paired_diff_mean,paired_stderr,z_score,verdict\n",
    );
    for r in &report.results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:?}\n",
            csv_escape(&r.id),
            r.mean_x,
            r.mean_y,
            r.paired_diff_mean,
            r.paired_stderr,
            r.z_score,
            r.verdict
        ));
    }
    out
}

/// Generic metric CSV ("name,value" rows).
pub fn metrics_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{},{v}\n", csv_escape(k)));
    }
    out
}

/// Runs one CLI command against a parsed configuration.
pub fn execute(command: &str, cfg: &ExperimentConfig, out_dir: &Path) -> Result<CommandOutcome> {
    match command {
        "constants" => run_constants(cfg),
        "simulate" => run_simulate(cfg, out_dir),
        "compare" => run_compare(cfg, out_dir),
        "propagate" => run_propagate(cfg),
        "converge" => run_converge(cfg, out_dir),
        "counterexample" => run_counterexample(cfg),
        other => Err(Error::Config(format!("unknown command '{other}'"))),
    }
}

fn run_constants(cfg: &ExperimentConfig) -> Result<CommandOutcome> {
    let spec_x = cfg.spec_x()?;
    let cx = crate::coefficients::ConstantsReport::with_default_grid(&spec_x)?;
    let mut results = json!({ "sde_x": cx });
    if cfg.sde_y.is_some() {
        let spec_y = cfg.spec_y()?;
        let cy = crate::coefficients::ConstantsReport::with_default_grid(&spec_y)?;
        results["sde_y"] = serde_json::to_value(cy)?;
    }
    Ok(CommandOutcome { results, pass: true })
}

fn run_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<CommandOutcome> {
    let spec = cfg.spec_x()?;
    let scheme = cfg.scheme_config()?;
    let noise = NoisePanel::new(cfg.run.paths, scheme.m, cfg.run.seed);
    let paths = simulate_batch(&spec, &scheme, &noise)?;
    std::fs::create_dir_all(out_dir)?;
    let bin_path = out_dir.join("paths.bin");
    let mut file = std::fs::File::create(&bin_path)?;
    paths.write_binary(&mut file)?;
    if cfg.run.paths <= 1000 {
        let mut csv = std::fs::File::create(out_dir.join("paths.csv"))?;
        paths.write_csv(&mut csv)?;
    }
    let terminal = paths.terminal();
    let n = terminal.len() as f64;
    let mean = terminal.iter().sum::<f64>() / n;
    let var = terminal.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(CommandOutcome {
        results: json!({
            "paths_file": bin_path.to_string_lossy(),
            "n_paths": paths.n_paths,
            "m": paths.m,
            "threshold": paths.threshold,
            "terminal_mean": mean,
            "terminal_stddev": var.sqrt(),
            "sqrt_clamps": paths.diagnostics.sqrt_clamps,
        }),
        pass: true,
    })
}

fn run_compare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<CommandOutcome> {
    let exp = cfg.experiment()?;
    let report = compare_ordered(&exp)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("compare.csv"), ordering_csv(&report))?;
    let pass = !report.any_violated();
    Ok(CommandOutcome { results: serde_json::to_value(&report)?, pass })
}

fn run_propagate(cfg: &ExperimentConfig) -> Result<CommandOutcome> {
    let spec_x = cfg.spec_x()?;
    let scheme = cfg.scheme_config()?;
    let grid = cfg.propagate_grid()?;
    let measure = build_measure(scheme.threshold, 128)?;
    let mc_paths = cfg.propagate.as_ref().map(|p| p.mc_paths).unwrap_or(0);
    let mut entries = Vec::new();
    let mut pass = true;
    for f in cfg.suite()? {
        let payoff = match &f.kind {
            Kind::Terminal { f: payoff } => *payoff,
            _ => {
                return Err(Error::Config(format!(
                    "propagate works on terminal payoffs; '{}' is not one",
                    f.id
                )))
            }
        };
        let terminal = GridFunction::from_fn(grid, |x| payoff.eval(x));
        let run = backward_induct_terminal(&terminal, &spec_x, &scheme, &measure)?;
        let defect = grid_convexity_defect(&run.f)?;
        let ok = defect.min_second_difference >= -PROPAGATION_DEFECT_TOL
            && (!f.is_nondecreasing || defect.min_first_difference >= -PROPAGATION_DEFECT_TOL);
        pass &= ok;
        let mut entry = json!({
            "functional": f.id,
            "defect": defect,
            "extrapolation_hits": run.extrapolation_hits,
            "pass": ok,
        });
        // Optional paired kernel ordering gap against sde_y.
        if cfg.sde_y.is_some() && f.is_nondecreasing && f.is_convex {
            let spec_y = cfg.spec_y()?;
            let gap = kernel_ordering_gap(&terminal, &spec_x, &spec_y, &scheme, &measure)?;
            let min_gap = gap.f.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let gap_ok = min_gap >= -1e-9;
            pass &= gap_ok;
            entry["min_ordering_gap"] = json!(min_gap);
            entry["gap_pass"] = json!(gap_ok);
        }
        if mc_paths > 0 {
            let vf = value_function_convexity(&spec_x, &f, &grid, &scheme, mc_paths, cfg.run.seed);
            pass &= vf.all_pass;
            entry["mc_min_second_difference"] = json!(vf.min_second_difference);
            entry["mc_pass"] = json!(vf.all_pass);
        }
        entries.push(entry);
    }
    Ok(CommandOutcome { results: json!({ "payoffs": entries }), pass })
}

fn run_converge(cfg: &ExperimentConfig, out_dir: &Path) -> Result<CommandOutcome> {
    let section = cfg
        .converge
        .as_ref()
        .ok_or_else(|| Error::Config("converge command needs a [converge] section".into()))?;
    let policy = match (section.policy.as_str(), section.policy_value) {
        ("default", _) => ThresholdPolicy::Default,
        ("fixed", Some(s)) => ThresholdPolicy::Fixed { s },
        ("log_growth", Some(c)) => ThresholdPolicy::LogGrowth { c },
        (other, _) => {
            return Err(Error::Config(format!(
                "policy '{other}' needs to be default, fixed (with policy_value) or log_growth"
            )))
        }
    };
    let horizon = cfg.sde_x.horizon;
    let rate = strong_error_rate(
        section.theta,
        section.x0,
        horizon,
        &section.m_list,
        cfg.run.paths,
        cfg.run.seed,
        policy,
    )?;
    // Gnuplot-friendly data file for log-log plots.
    std::fs::create_dir_all(out_dir)?;
    let mut dat = String::from("# m error stderr\n");
    for ((m, e), se) in rate.m_list.iter().zip(&rate.errors).zip(&rate.stderrs) {
        dat.push_str(&format!("{m} {e} {se}\n"));
    }
    std::fs::write(out_dir.join("rate.dat"), dat)?;
    let mut pass = rate.slope >= RATE_SLOPE_WINDOW.0 && rate.slope <= RATE_SLOPE_WINDOW.1;
    let mut results = json!({ "rate": rate, "slope_window": RATE_SLOPE_WINDOW });
    if let (Some(m), Some(s)) = (section.tail_m, section.tail_s) {
        let noise = NoisePanel::new(cfg.run.paths, m, cfg.run.seed);
        let tail = truncation_event_rate(&noise, s);
        let tail_ok =
            tail.observed_fraction <= tail.union_bound + 3.0 * tail.binomial_stderr.max(1e-12);
        pass &= tail_ok;
        results["truncation"] = serde_json::to_value(tail)?;
        results["truncation_pass"] = json!(tail_ok);
    }
    Ok(CommandOutcome { results, pass })
}

fn run_counterexample(cfg: &ExperimentConfig) -> Result<CommandOutcome> {
    let section = cfg
        .counterexample
        .as_ref()
        .ok_or_else(|| Error::Config("counterexample command needs a [counterexample] section".into()))?;
    let grid = match &section.grid {
        Some(g) => crate::coefficients::SpatialGrid::new(g.lo, g.hi, g.n)?,
        None => crate::coefficients::SpatialGrid::new(-2.0, 2.0, 801)?,
    };
    let sigma = cfg
        .spec_x()?
        .diffusion;
    let measure = build_measure(section.threshold, 128)?;
    let report = counterexample_demo(
        section.h,
        section.threshold,
        &sigma,
        &grid,
        &measure,
        cfg.run.paths,
        cfg.run.seed,
    )?;
    // A found violation is the expected outcome and maps to exit 2.
    let violated = report.compare.any_violated();
    Ok(CommandOutcome { results: serde_json::to_value(&report)?, pass: !violated })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_is_stable_modulo_volatile_fields() {
        let results = json!({ "a": 1.5 });
        let r1 = envelope("compare", "cfg", &results, 10, true);
        std::thread::sleep(std::time::Duration::from_millis(2));
        let r2 = envelope("compare", "cfg", &results, 99, true);
        assert_ne!(r1["runtime_ms"], r2["runtime_ms"]);
        assert_eq!(strip_volatile(&r1), strip_volatile(&r2));
        assert_eq!(r1["stability_hash"], r2["stability_hash"]);
        let r3 = envelope("compare", "cfg", &json!({ "a": 2.0 }), 10, true);
        assert_ne!(r1["stability_hash"], r3["stability_hash"]);
    }

    #[test]
    fn csv_rows_match_functional_count() {
        use crate::ordering::{FunctionalResult, Mode, OrderingReport, Verdict};
        let mk = |id: &str| FunctionalResult {
            id: id.into(),
            mean_x: 1.0,
            mean_y: 2.0,
            stderr_x: 0.1,
            stderr_y: 0.1,
            paired_diff_mean: 1.0,
            paired_stderr: 0.1,
            z_score: 10.0,
            verdict: Verdict::Ordered,
        };
        let report = OrderingReport {
            mode: Mode::Cvx,
            n_paths: 10,
            m: 4,
            threshold: 1.0,
            seed: 1,
            confidence: 0.99,
            results: vec![mk("call"), mk("square")],
            m_min: 0.0,
            s_default: 1.0,
            mollified_n: None,
            hypothesis_warnings: vec![],
        };
        let csv = ordering_csv(&report);
        assert_eq!(csv.lines().count(), 3);
        // Empty suite: valid CSV with only the header.
        let empty = OrderingReport { results: vec![], ..report };
        assert_eq!(ordering_csv(&empty).lines().count(), 1);
    }
}
