//! Paired Monte Carlo ordering experiments, value-function convexity
//! probes, the marginal necessary condition, and the non-convex-volatility
//! counterexample.
//!
//! All estimators run on common random numbers by default (orderings are
//! law-level statements, so any coupling is valid and the paired variance is
//! far smaller) and accumulate in fixed-size path chunks so results are
//! bit-identical for any thread count.

use crate::coefficients::{
    derive_scheme_bounds, initial_cvx_ordered, initial_icv_ordered, ConstantsReport, InitialLaw,
    SdeSpec, SpatialGrid,
};
use crate::error::{Error, Result};
use crate::euler::{draw_truncated, step, NoisePanel, SamplePaths, SchemeConfig};
use crate::functionals::{Kind, TestFunctional};
use crate::kernel::{multi_marginal_induct, validate_domination, TruncatedGaussianMeasure};
use crate::rng;
use crate::smoothing::build_mollified_pair;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Ordering mode; decides the hypothesis set and the admissible functional
/// classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Non-decreasing convex ordering of a terminal marginal.
    Icv,
    /// Convex ordering of a terminal marginal (shared affine drift).
    Cvx,
    /// Non-decreasing directionally convex functional ordering.
    Diricv,
    /// Directionally convex functional ordering (shared affine drift).
    Dircvx,
}

/// Per-functional verdict of a paired comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ordered,
    Inconclusive,
    Violated,
}

/// One experiment: two SDEs, a scheme, a functional suite, and run sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub spec_x: SdeSpec,
    pub spec_y: SdeSpec,
    pub mode: Mode,
    pub scheme: SchemeConfig,
    pub suite: Vec<TestFunctional>,
    pub n_paths: usize,
    pub seed: u64,
    /// One-sided confidence level for verdicts (default 0.99).
    pub confidence: f64,
    /// Run hypothesis-violating experiments anyway (counterexample studies).
    pub override_hypotheses: bool,
    /// Comonotone initial coupling (default); false uses independent draws.
    pub couple_initial: bool,
}

impl ExperimentSpec {
    pub fn z_critical(&self) -> f64 {
        rng::normal_quantile(self.confidence)
    }
}

/// Paired estimate for one functional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalResult {
    pub id: String,
    pub mean_x: f64,
    pub mean_y: f64,
    pub stderr_x: f64,
    pub stderr_y: f64,
    pub paired_diff_mean: f64,
    pub paired_stderr: f64,
    pub z_score: f64,
    pub verdict: Verdict,
}

/// Full experiment outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingReport {
    pub mode: Mode,
    pub n_paths: usize,
    pub m: usize,
    pub threshold: f64,
    pub seed: u64,
    pub confidence: f64,
    pub results: Vec<FunctionalResult>,
    /// Admissibility bounds actually enforced.
    pub m_min: f64,
    pub s_default: f64,
    /// Mollifier scale when the pipeline substituted a smoothed pair.
    pub mollified_n: Option<usize>,
    pub hypothesis_warnings: Vec<String>,
}

impl OrderingReport {
    pub fn any_violated(&self) -> bool {
        self.results.iter().any(|r| r.verdict == Verdict::Violated)
    }
}

fn classify(diff: f64, se: f64, z_crit: f64) -> (f64, Verdict) {
    if se == 0.0 {
        // Degenerate paired estimator (e.g. identical specs on shared noise).
        let v = if diff >= 0.0 { Verdict::Ordered } else { Verdict::Violated };
        return (if diff == 0.0 { 0.0 } else { f64::INFINITY * diff.signum() }, v);
    }
    let z = diff / se;
    let v = if z < -z_crit {
        Verdict::Violated
    } else if z > z_crit {
        Verdict::Ordered
    } else {
        Verdict::Inconclusive
    };
    (z, v)
}

/// Streaming sums for one functional over a path chunk.
#[derive(Debug, Clone, Copy, Default)]
struct PairSums {
    sx: f64,
    sx2: f64,
    sy: f64,
    sy2: f64,
    sd: f64,
    sd2: f64,
}

const CHUNK: usize = 8192;

/// Drives both schemes path by path under shared noise and evaluates every
/// suite functional, returning per-functional paired statistics. Chunked
/// accumulation keeps the result independent of the thread count.
pub fn run_paired_suite(
    spec_x: &SdeSpec,
    spec_y: &SdeSpec,
    scheme: &SchemeConfig,
    suite: &[TestFunctional],
    n_paths: usize,
    seed: u64,
    couple_initial: bool,
) -> Vec<PairStats> {
    let m = scheme.m;
    let width = m + 1;
    let horizon = scheme.horizon;
    let n_chunks = n_paths.div_ceil(CHUNK);
    let nf = suite.len();
    let panel = NoisePanel::new(n_paths, m, seed);
    let alt_seed = seed ^ 0x5151_5151_5151_5151;

    let chunk_sums: Vec<Vec<PairSums>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sums = vec![PairSums::default(); nf];
            let mut bx = vec![0.0; width];
            let mut by = vec![0.0; width];
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n_paths);
            for n in lo..hi {
                let ux = panel.initial_uniform(n);
                let uy = if couple_initial {
                    ux
                } else {
                    rng::uniform(alt_seed, rng::STREAM_INITIAL, n as u64, 0)
                };
                let mut x = spec_x.initial.quantile(ux);
                let mut y = spec_y.initial.quantile(uy);
                bx[0] = x;
                by[0] = y;
                for k in 0..m {
                    let z = draw_truncated(panel.gaussian(n, k), scheme.threshold);
                    x = step(x, k, spec_x, scheme, z);
                    y = step(y, k, spec_y, scheme, z);
                    bx[k + 1] = x;
                    by[k + 1] = y;
                }
                for (j, f) in suite.iter().enumerate() {
                    let fx = f.eval_path(&bx, horizon);
                    let fy = f.eval_path(&by, horizon);
                    let d = fy - fx;
                    let s = &mut sums[j];
                    s.sx += fx;
                    s.sx2 += fx * fx;
                    s.sy += fy;
                    s.sy2 += fy * fy;
                    s.sd += d;
                    s.sd2 += d * d;
                }
            }
            sums
        })
        .collect();

    let mut totals = vec![PairSums::default(); nf];
    for chunk in chunk_sums {
        for (t, s) in totals.iter_mut().zip(chunk) {
            t.sx += s.sx;
            t.sx2 += s.sx2;
            t.sy += s.sy;
            t.sy2 += s.sy2;
            t.sd += s.sd;
            t.sd2 += s.sd2;
        }
    }
    let nfp = n_paths as f64;
    totals
        .into_iter()
        .map(|s| {
            let mean_x = s.sx / nfp;
            let mean_y = s.sy / nfp;
            let diff = s.sd / nfp;
            let var_x = (s.sx2 / nfp - mean_x * mean_x).max(0.0);
            let var_y = (s.sy2 / nfp - mean_y * mean_y).max(0.0);
            let var_d = (s.sd2 / nfp - diff * diff).max(0.0);
            PairStats {
                mean_x,
                mean_y,
                stderr_x: (var_x / nfp).sqrt(),
                stderr_y: (var_y / nfp).sqrt(),
                diff_mean: diff,
                diff_stderr: (var_d / nfp).sqrt(),
            }
        })
        .collect()
}

/// Raw paired statistics for one functional.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub stderr_x: f64,
    pub stderr_y: f64,
    pub diff_mean: f64,
    pub diff_stderr: f64,
}

/// Sample mean and CLT standard error of one functional on a materialized
/// panel; non-finite evaluations are flagged by path index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub nonfinite_paths: Vec<usize>,
}

pub fn estimate_functional(paths: &SamplePaths, f: &TestFunctional) -> Estimate {
    let n = paths.n_paths;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut flagged = Vec::new();
    for i in 0..n {
        let v = f.eval_path(paths.path(i), paths.horizon);
        if v.is_finite() {
            sum += v;
            sum2 += v * v;
        } else {
            flagged.push(i);
        }
    }
    let good = (n - flagged.len()) as f64;
    let mean = sum / good;
    let var = (sum2 / good - mean * mean).max(0.0);
    Estimate { mean, stderr: (var / good).sqrt(), nonfinite_paths: flagged }
}

/// Checks the hypotheses of an experiment; returns warnings (empty when all
/// hold) without deciding whether to proceed.
pub fn validate_hypotheses(exp: &ExperimentSpec, grid: &SpatialGrid) -> Vec<String> {
    let mut warnings = Vec::new();
    match exp.mode {
        Mode::Cvx | Mode::Dircvx => {
            if exp.spec_x.drift != exp.spec_y.drift {
                warnings.push("cvx/dircvx modes need equal drift fields".into());
            }
            if !matches!(
                exp.spec_x.drift.family,
                crate::coefficients::Family::Affine(_) | crate::coefficients::Family::Constant { .. }
            ) {
                warnings.push("cvx/dircvx modes need an affine-in-space drift".into());
            }
            if !initial_cvx_ordered(&exp.spec_x.initial, &exp.spec_y.initial) {
                warnings.push("initial laws are not cvx-ordered in the catalog".into());
            }
        }
        Mode::Icv | Mode::Diricv => {
            if !initial_icv_ordered(&exp.spec_x.initial, &exp.spec_y.initial) {
                warnings.push("initial laws are not icv-ordered in the catalog".into());
            }
        }
    }
    let dom = validate_domination(&exp.spec_x, &exp.spec_y, &exp.scheme, grid);
    if !dom.drift_violations.is_empty() {
        warnings.push(format!(
            "drift domination b <= beta fails at {} grid points",
            dom.drift_violations.len()
        ));
    }
    if !dom.diffusion_violations.is_empty() {
        warnings.push(format!(
            "diffusion domination 0 <= sigma <= theta fails at {} grid points",
            dom.diffusion_violations.len()
        ));
    }
    for f in &exp.suite {
        let ok = match exp.mode {
            Mode::Icv => matches!(f.kind, Kind::Terminal { .. }) && f.is_convex && f.is_nondecreasing,
            Mode::Cvx => matches!(f.kind, Kind::Terminal { .. }) && f.is_convex,
            Mode::Diricv => f.is_dir_convex && f.is_nondecreasing,
            Mode::Dircvx => f.is_dir_convex,
        };
        if !ok {
            warnings.push(format!("functional '{}' is outside the {:?} class", f.id, exp.mode));
        }
    }
    warnings
}

/// Admissibility data resolved for an experiment, after any mollification.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub exp: ExperimentSpec,
    pub m_min: f64,
    pub s_default: f64,
    pub mollified_n: Option<usize>,
    pub warnings: Vec<String>,
}

/// Default mollifier scale for the automatic substitution.
const AUTO_MOLLIFY_N: usize = 10;

/// Validates hypotheses and scheme admissibility, auto-inserting a mollified
/// diffusion pair when the semi-convexity constant is infinite on both sides.
pub fn resolve_experiment(exp: &ExperimentSpec, grid: &SpatialGrid) -> Result<ResolvedExperiment> {
    let mut exp = exp.clone();
    let mut warnings = validate_hypotheses(&exp, grid);
    let mut mollified_n = None;

    // Propagation needs a convex drift plus a semi-convex squared diffusion
    // on at least one side.
    let constants_x = ConstantsReport::with_default_grid(&exp.spec_x)?;
    let constants_y = ConstantsReport::with_default_grid(&exp.spec_y)?;
    let x_admissible = exp.spec_x.drift.is_convex_in_space() && constants_x.a_sigma.is_finite();
    let y_admissible = exp.spec_y.drift.is_convex_in_space() && constants_y.a_sigma.is_finite();
    if !x_admissible && !y_admissible {
        if exp.spec_x.drift.is_convex_in_space() || exp.spec_y.drift.is_convex_in_space() {
            // Semi-convexity is the missing piece: substitute the smoothed
            // diffusion pair.
            let pair =
                build_mollified_pair(&exp.spec_x.diffusion, &exp.spec_y.diffusion, AUTO_MOLLIFY_N, 0.0)?;
            exp.spec_x.diffusion = pair.sigma_n;
            exp.spec_y.diffusion = pair.theta_n;
            mollified_n = Some(AUTO_MOLLIFY_N);
            warnings.push(format!(
                "a_sigma infinite on both sides: substituted mollified pair at n={AUTO_MOLLIFY_N}"
            ));
        } else {
            warnings.push("neither drift is convex in space".into());
        }
    }

    // Admissibility bounds from the side whose propagation hypothesis holds.
    let constants = if x_admissible || !y_admissible {
        ConstantsReport::with_default_grid(&exp.spec_x)?
    } else {
        ConstantsReport::with_default_grid(&exp.spec_y)?
    };
    let bounds = derive_scheme_bounds(&constants, exp.scheme.horizon, exp.scheme.m)?;
    if (exp.scheme.m as f64) < bounds.m_min.ceil() {
        warnings.push(format!(
            "m = {} below the admissible minimum ceil({})",
            exp.scheme.m, bounds.m_min
        ));
    }
    if exp.scheme.threshold > bounds.s_default {
        warnings.push(format!(
            "threshold {} above s_default {}",
            exp.scheme.threshold, bounds.s_default
        ));
    }

    if !warnings.is_empty() && !exp.override_hypotheses {
        return Err(Error::HypothesisViolation(warnings.join("; ")));
    }
    Ok(ResolvedExperiment { exp, m_min: bounds.m_min, s_default: bounds.s_default, mollified_n, warnings })
}

/// Runs a full paired ordering experiment.
pub fn compare_ordered(exp: &ExperimentSpec) -> Result<OrderingReport> {
    let grid = SpatialGrid::new(-20.0, 20.0, 4001)?;
    let resolved = resolve_experiment(exp, &grid)?;
    let exp = &resolved.exp;
    let stats = run_paired_suite(
        &exp.spec_x,
        &exp.spec_y,
        &exp.scheme,
        &exp.suite,
        exp.n_paths,
        exp.seed,
        exp.couple_initial,
    );
    let z_crit = exp.z_critical();
    let results = exp
        .suite
        .iter()
        .zip(stats)
        .map(|(f, s)| {
            let (z, verdict) = classify(s.diff_mean, s.diff_stderr, z_crit);
            FunctionalResult {
                id: f.id.clone(),
                mean_x: s.mean_x,
                mean_y: s.mean_y,
                stderr_x: s.stderr_x,
                stderr_y: s.stderr_y,
                paired_diff_mean: s.diff_mean,
                paired_stderr: s.diff_stderr,
                z_score: z,
                verdict,
            }
        })
        .collect();
    Ok(OrderingReport {
        mode: exp.mode,
        n_paths: exp.n_paths,
        m: exp.scheme.m,
        threshold: exp.scheme.threshold,
        seed: exp.seed,
        confidence: exp.confidence,
        results,
        m_min: resolved.m_min,
        s_default: resolved.s_default,
        mollified_n: resolved.mollified_n,
        hypothesis_warnings: resolved.warnings,
    })
}

/// Second-difference estimate at one interior grid node.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NodeDefect {
    pub x: f64,
    pub second_difference: f64,
    pub stderr: f64,
    /// d2 >= -3 stderr.
    pub pass: bool,
}

/// Value-function convexity probe report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFunctionReport {
    pub values: Vec<f64>,
    pub defects: Vec<NodeDefect>,
    pub min_second_difference: f64,
    pub all_pass: bool,
}

/// Estimates v(x) = E f(X^x) on the grid with common noise across starting
/// points (variance cancels in second differences) and reports per-node
/// undivided second differences with CLT error bars.
pub fn value_function_convexity(
    spec: &SdeSpec,
    f: &TestFunctional,
    x_grid: &SpatialGrid,
    scheme: &SchemeConfig,
    n_paths: usize,
    seed: u64,
) -> ValueFunctionReport {
    let g = x_grid.n;
    let m = scheme.m;
    let width = m + 1;
    let n_chunks = n_paths.div_ceil(CHUNK);
    let panel = NoisePanel::new(n_paths, m, seed);

    // sums[i]: value-mean accumulator; dsums: second-difference accumulators
    let chunk_out: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut vsum = vec![0.0; g];
            let mut dsum = vec![0.0; g.saturating_sub(2)];
            let mut dsum2 = vec![0.0; g.saturating_sub(2)];
            let mut states = vec![0.0; g];
            let mut paths = vec![0.0; g * width];
            let mut fvals = vec![0.0; g];
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n_paths);
            for n in lo..hi {
                for (i, s) in states.iter_mut().enumerate() {
                    *s = x_grid.node(i);
                    paths[i * width] = *s;
                }
                for k in 0..m {
                    let z = draw_truncated(panel.gaussian(n, k), scheme.threshold);
                    for (i, s) in states.iter_mut().enumerate() {
                        *s = step(*s, k, spec, scheme, z);
                        paths[i * width + k + 1] = *s;
                    }
                }
                for i in 0..g {
                    fvals[i] = f.eval_path(&paths[i * width..(i + 1) * width], scheme.horizon);
                    vsum[i] += fvals[i];
                }
                for i in 1..g.saturating_sub(1) {
                    let d = fvals[i + 1] - 2.0 * fvals[i] + fvals[i - 1];
                    dsum[i - 1] += d;
                    dsum2[i - 1] += d * d;
                }
            }
            (vsum, dsum, dsum2)
        })
        .collect();

    let mut vsum = vec![0.0; g];
    let mut dsum = vec![0.0; g.saturating_sub(2)];
    let mut dsum2 = vec![0.0; g.saturating_sub(2)];
    for (v, d, d2) in chunk_out {
        for (a, b) in vsum.iter_mut().zip(v) {
            *a += b;
        }
        for (a, b) in dsum.iter_mut().zip(d) {
            *a += b;
        }
        for (a, b) in dsum2.iter_mut().zip(d2) {
            *a += b;
        }
    }
    let nf = n_paths as f64;
    let values: Vec<f64> = vsum.into_iter().map(|v| v / nf).collect();
    let mut defects = Vec::with_capacity(g.saturating_sub(2));
    let mut min_d2 = f64::INFINITY;
    let mut all_pass = true;
    for i in 0..g.saturating_sub(2) {
        let mean = dsum[i] / nf;
        let var = (dsum2[i] / nf - mean * mean).max(0.0);
        let se = (var / nf).sqrt();
        let pass = mean >= -3.0 * se;
        all_pass &= pass;
        min_d2 = min_d2.min(mean);
        defects.push(NodeDefect { x: x_grid.node(i + 1), second_difference: mean, stderr: se, pass });
    }
    ValueFunctionReport { values, defects, min_second_difference: min_d2, all_pass }
}

/// MC estimates of E|sigma(t, X_t)| and E|theta(t, Y_t)| at the nearest
/// grid time (the necessary condition for 2-marginal convex ordering).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarginalSigmaReport {
    pub t_snapped: f64,
    pub e_abs_sigma_x: f64,
    pub stderr_x: f64,
    pub e_abs_theta_y: f64,
    pub stderr_y: f64,
}

pub fn marginal_sigma_condition(
    spec_x: &SdeSpec,
    spec_y: &SdeSpec,
    t: f64,
    scheme: &SchemeConfig,
    n_paths: usize,
    seed: u64,
) -> Result<MarginalSigmaReport> {
    if !(0.0..=scheme.horizon).contains(&t) {
        return Err(Error::InvalidArgument(format!("t={t} outside [0, {}]", scheme.horizon)));
    }
    let h = scheme.step_size();
    let k_target = ((t / h).round() as usize).min(scheme.m);
    let t_snapped = h * k_target as f64;
    let panel = NoisePanel::new(n_paths, scheme.m, seed);
    let n_chunks = n_paths.div_ceil(CHUNK);
    let sums: Vec<[f64; 4]> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = [0.0; 4];
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n_paths);
            for n in lo..hi {
                let u = panel.initial_uniform(n);
                let mut x = spec_x.initial.quantile(u);
                let mut y = spec_y.initial.quantile(u);
                for k in 0..k_target {
                    let z = draw_truncated(panel.gaussian(n, k), scheme.threshold);
                    x = step(x, k, spec_x, scheme, z);
                    y = step(y, k, spec_y, scheme, z);
                }
                let sx = spec_x.diffusion.eval(t_snapped, x).abs();
                let sy = spec_y.diffusion.eval(t_snapped, y).abs();
                acc[0] += sx;
                acc[1] += sx * sx;
                acc[2] += sy;
                acc[3] += sy * sy;
            }
            acc
        })
        .collect();
    let mut total = [0.0; 4];
    for s in sums {
        for i in 0..4 {
            total[i] += s[i];
        }
    }
    let nf = n_paths as f64;
    let mean_x = total[0] / nf;
    let mean_y = total[2] / nf;
    let var_x = (total[1] / nf - mean_x * mean_x).max(0.0);
    let var_y = (total[3] / nf - mean_y * mean_y).max(0.0);
    Ok(MarginalSigmaReport {
        t_snapped,
        e_abs_sigma_x: mean_x,
        stderr_x: (var_x / nf).sqrt(),
        e_abs_theta_y: mean_y,
        stderr_y: (var_y / nf).sqrt(),
    })
}

/// One row of the small-h increment diagnostic.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IncrementRatio {
    pub h: f64,
    pub ratio: f64,
    pub ci_half_width: f64,
    pub e_abs_increment: f64,
    pub e_abs_sigma: f64,
}

/// For each h, the ratio E|X_{s+h} - X_s| / (sqrt(2h/pi) E|sigma(s, X_s)|),
/// expected to approach 1 as h decreases. Each h runs its own scheme whose
/// grid contains both s and s+h.
pub fn increment_asymptotic(
    spec: &SdeSpec,
    s_time: f64,
    h_list: &[f64],
    threshold: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<IncrementRatio>> {
    let mut out = Vec::with_capacity(h_list.len());
    for &h in h_list {
        if h <= 0.0 {
            return Err(Error::InvalidArgument("h must be positive".into()));
        }
        let j = (s_time / h).round() as usize;
        let m = j + 1;
        let horizon = h * m as f64;
        let scheme = SchemeConfig::new(m, crate::euler::Variant::PointFrozen, threshold, horizon);
        let panel = NoisePanel::new(n_paths, m, seed);
        let t_s = h * j as f64;
        let n_chunks = n_paths.div_ceil(CHUNK);
        let sums: Vec<[f64; 5]> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = [0.0; 5];
                let lo = c * CHUNK;
                let hi = ((c + 1) * CHUNK).min(n_paths);
                for n in lo..hi {
                    let mut x = spec.initial.quantile(panel.initial_uniform(n));
                    for k in 0..j {
                        let z = draw_truncated(panel.gaussian(n, k), threshold);
                        x = step(x, k, spec, &scheme, z);
                    }
                    let z = draw_truncated(panel.gaussian(n, j), threshold);
                    let x_next = step(x, j, spec, &scheme, z);
                    let a = (x_next - x).abs();
                    let b = spec.diffusion.eval(t_s, x).abs();
                    acc[0] += a;
                    acc[1] += a * a;
                    acc[2] += b;
                    acc[3] += b * b;
                    acc[4] += a * b;
                }
                acc
            })
            .collect();
        let mut total = [0.0; 5];
        for sarr in sums {
            for i in 0..5 {
                total[i] += sarr[i];
            }
        }
        let nf = n_paths as f64;
        let ma = total[0] / nf;
        let mb = total[2] / nf;
        let va = (total[1] / nf - ma * ma).max(0.0);
        let vb = (total[3] / nf - mb * mb).max(0.0);
        let cab = total[4] / nf - ma * mb;
        let scale = (2.0 * h / std::f64::consts::PI).sqrt();
        let ratio = ma / (scale * mb);
        // Delta method for the ratio of correlated means.
        let var_ratio =
            (va / (mb * mb) + ma * ma * vb / (mb * mb * mb * mb) - 2.0 * ma * cab / (mb * mb * mb))
                .max(0.0)
                / nf;
        out.push(IncrementRatio {
            h,
            ratio,
            ci_half_width: 3.0 * var_ratio.sqrt() / scale,
            e_abs_increment: ma,
            e_abs_sigma: mb,
        });
    }
    Ok(out)
}

/// Exact ratio of the truncated to untruncated half-normal means: the
/// deterministic part of the increment ratio when sigma is constant.
pub fn truncation_ratio(s: f64) -> f64 {
    crate::analytic::truncated_abs_moment(s) / (2.0 / std::f64::consts::PI).sqrt()
}

/// Counterexample study: non-convex (tent) volatility breaks 2-marginal
/// convex ordering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterexampleReport {
    /// Midpoint convexity violation of g(x) = E|sqrt(h) sigma(x) Z^s| from
    /// the kernel oracle.
    pub oracle_violation: f64,
    /// Closed form sqrt(h) E|Z^s| (sigma(0) - (sigma(1)+sigma(-1))/2).
    pub closed_form: f64,
    /// Monte Carlo estimate of the same quantity with its stderr.
    pub mc_violation: f64,
    pub mc_stderr: f64,
    /// Full 2-marginal comparison with |u-v|; expected verdict: violated.
    pub compare: OrderingReport,
}

pub fn counterexample_demo(
    h: f64,
    threshold: f64,
    sigma: &crate::coefficients::CoefficientField,
    x_grid: &SpatialGrid,
    measure: &TruncatedGaussianMeasure,
    n_paths: usize,
    seed: u64,
) -> Result<CounterexampleReport> {
    let spec = SdeSpec::new(
        crate::coefficients::CoefficientField::constant(0.0),
        sigma.clone(),
        h,
        InitialLaw::Dirac { x0: 0.0 },
    );
    let scheme = SchemeConfig::new(1, crate::euler::Variant::PointFrozen, threshold, h);

    // Kernel oracle: one step, two marginals (0, 1), f = |u - v|.
    let run = multi_marginal_induct(
        |a: &[f64]| (a[0] - a[1]).abs(),
        &[0, 1],
        &[*x_grid],
        x_grid,
        &spec,
        &scheme,
        measure,
    )?;
    let g0 = run.f.eval(0.0);
    let g1 = run.f.eval(1.0);
    let gm1 = run.f.eval(-1.0);
    let oracle_violation = g0 - 0.5 * (g1 + gm1);

    let e_abs = crate::analytic::truncated_abs_moment(threshold);
    let s0 = sigma.eval(0.0, 0.0);
    let s1 = sigma.eval(0.0, 1.0);
    let sm1 = sigma.eval(0.0, -1.0);
    let closed_form = h.sqrt() * e_abs * (s0 - 0.5 * (s1 + sm1));

    // MC version of the same three-point probe on shared draws.
    let sq = h.sqrt();
    let n_chunks = n_paths.div_ceil(CHUNK);
    let sums: Vec<[f64; 2]> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = [0.0; 2];
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n_paths);
            for n in lo..hi {
                let z = draw_truncated(
                    rng::standard_normal(seed, rng::STREAM_GAUSSIAN, n as u64, 0),
                    threshold,
                );
                let v = (sq * s0 * z).abs() - 0.5 * ((sq * s1 * z).abs() + (sq * sm1 * z).abs());
                acc[0] += v;
                acc[1] += v * v;
            }
            acc
        })
        .collect();
    let mut total = [0.0; 2];
    for s in sums {
        total[0] += s[0];
        total[1] += s[1];
    }
    let nf = n_paths as f64;
    let mc_violation = total[0] / nf;
    let mc_var = (total[1] / nf - mc_violation * mc_violation).max(0.0);

    // Full 2-marginal comparison: Dirac at the midpoint vs the two-point
    // mixture, same SDE; |u - v| is outside the cvx class, so the run needs
    // the explicit override.
    let spec_x = SdeSpec::new(
        crate::coefficients::CoefficientField::constant(0.0),
        sigma.clone(),
        h,
        InitialLaw::Dirac { x0: 0.0 },
    );
    let spec_y = SdeSpec::new(
        crate::coefficients::CoefficientField::constant(0.0),
        sigma.clone(),
        h,
        InitialLaw::TwoPoint { p: 0.5, lo: -1.0, hi: 1.0 },
    );
    let exp = ExperimentSpec {
        spec_x,
        spec_y,
        mode: Mode::Cvx,
        scheme,
        suite: vec![TestFunctional::multi_marginal(
            "abs_diff",
            crate::functionals::MarginalPayoff::AbsDiff,
            vec![0.0, h],
        )],
        n_paths,
        seed,
        confidence: 0.99,
        override_hypotheses: true,
        couple_initial: false,
    };
    let compare = compare_ordered(&exp)?;

    Ok(CounterexampleReport {
        oracle_violation,
        closed_form,
        mc_violation,
        mc_stderr: (mc_var / nf).sqrt(),
        compare,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientField;
    use crate::euler::{gbm_spec, simulate_batch, Variant};
    use crate::functionals::TerminalPayoff;
    use crate::kernel::build_measure;

    fn bm_pair(sig_x: f64, sig_y: f64, x0: f64) -> (SdeSpec, SdeSpec) {
        let mk = |s: f64| {
            SdeSpec::new(
                CoefficientField::constant(0.0),
                CoefficientField::constant(s),
                1.0,
                InitialLaw::Dirac { x0 },
            )
        };
        (mk(sig_x), mk(sig_y))
    }

    #[test]
    fn estimate_functional_examples() {
        let spec = gbm_spec(1.0, 0.2, 1.0);
        let scheme = SchemeConfig::new(16, Variant::PointFrozen, f64::INFINITY, 1.0);
        let paths = simulate_batch(&spec, &scheme, &NoisePanel::new(50_000, 16, 5)).unwrap();
        // Constant functional: mean 7, stderr 0.
        let c = TestFunctional::terminal("constant", TerminalPayoff::Constant { c: 7.0 });
        let est = estimate_functional(&paths, &c);
        assert_eq!(est.mean, 7.0);
        assert_eq!(est.stderr, 0.0);
        // Martingale identity: mean = x0 within 3 stderr.
        let ident = TestFunctional::terminal("identity", TerminalPayoff::Identity);
        let est = estimate_functional(&paths, &ident);
        assert!((est.mean - 1.0).abs() < 3.0 * est.stderr);
        assert!(est.nonfinite_paths.is_empty());
    }

    #[test]
    fn identical_specs_give_bitwise_zero_diffs_and_ordered_verdict() {
        let (x, y) = bm_pair(0.2, 0.2, 1.0);
        let exp = ExperimentSpec {
            spec_x: x,
            spec_y: y,
            mode: Mode::Cvx,
            scheme: SchemeConfig::new(32, Variant::PointFrozen, f64::INFINITY, 1.0),
            suite: vec![
                TestFunctional::terminal("call", TerminalPayoff::Call { k: 1.0 }),
                TestFunctional::terminal("square", TerminalPayoff::Square),
            ],
            n_paths: 20_000,
            seed: 9,
            confidence: 0.99,
            override_hypotheses: false,
            couple_initial: true,
        };
        let report = compare_ordered(&exp).unwrap();
        for r in &report.results {
            assert_eq!(r.paired_diff_mean, 0.0);
            assert_eq!(r.paired_stderr, 0.0);
            assert_eq!(r.verdict, Verdict::Ordered);
        }
    }

    #[test]
    fn dominated_volatilities_are_ordered_with_high_z() {
        let (x, y) = bm_pair(0.2, 0.3, 1.0);
        let exp = ExperimentSpec {
            spec_x: x,
            spec_y: y,
            mode: Mode::Cvx,
            scheme: SchemeConfig::new(64, Variant::PointFrozen, f64::INFINITY, 1.0),
            suite: vec![
                TestFunctional::terminal("call", TerminalPayoff::Call { k: 1.0 }),
                TestFunctional::terminal("put_payoff", TerminalPayoff::PutPayoff { k: 1.0 }),
                TestFunctional::terminal("square", TerminalPayoff::Square),
            ],
            n_paths: 100_000,
            seed: 31,
            confidence: 0.99,
            override_hypotheses: false,
            couple_initial: true,
        };
        let report = compare_ordered(&exp).unwrap();
        for r in &report.results {
            assert_eq!(r.verdict, Verdict::Ordered, "{}: z={}", r.id, r.z_score);
            assert!(r.z_score > 3.0, "{}: z={}", r.id, r.z_score);
        }
        // Black-Scholes sanity: the call means bracket the closed form
        // reasonably and are monotone in volatility.
        let call = &report.results[0];
        assert!(call.mean_y > call.mean_x);
    }

    #[test]
    fn hypothesis_violations_block_without_override() {
        // sigma > theta: domination fails.
        let (x, y) = bm_pair(0.3, 0.2, 1.0);
        let mut exp = ExperimentSpec {
            spec_x: x,
            spec_y: y,
            mode: Mode::Cvx,
            scheme: SchemeConfig::new(16, Variant::PointFrozen, f64::INFINITY, 1.0),
            suite: vec![TestFunctional::terminal("call", TerminalPayoff::Call { k: 1.0 })],
            n_paths: 1000,
            seed: 1,
            confidence: 0.99,
            override_hypotheses: false,
            couple_initial: true,
        };
        assert!(matches!(compare_ordered(&exp), Err(Error::HypothesisViolation(_))));
        exp.override_hypotheses = true;
        let report = compare_ordered(&exp).unwrap();
        assert!(!report.hypothesis_warnings.is_empty());
    }

    #[test]
    fn value_function_convexity_flat_vol_call() {
        // Constant sigma, b = 0: v(x) is the shifted-normal (Bachelier)
        // call value; convex with defects above -3 stderr.
        let spec = SdeSpec::new(
            CoefficientField::constant(0.0),
            CoefficientField::constant(0.3),
            1.0,
            InitialLaw::Dirac { x0: 0.0 },
        );
        let f = TestFunctional::terminal("call", TerminalPayoff::Call { k: 0.5 });
        let grid = SpatialGrid::new(-1.0, 2.0, 16).unwrap();
        let scheme = SchemeConfig::new(16, Variant::PointFrozen, f64::INFINITY, 1.0);
        let report = value_function_convexity(&spec, &f, &grid, &scheme, 40_000, 77);
        assert!(report.all_pass, "min d2 {}", report.min_second_difference);
        // Cross-check levels against the closed form.
        for (i, v) in report.values.iter().enumerate() {
            let x = grid.node(i);
            let exact = crate::analytic::bachelier_call(x, 0.5, 0.3);
            assert!((v - exact).abs() < 0.02, "x={x}: {v} vs {exact}");
        }
    }

    #[test]
    fn value_function_product_has_positive_curvature() {
        // f(u, v) = u v with b = 0: v(x) = x^2 + const by iterated
        // conditioning; second differences are positive.
        let spec = SdeSpec::new(
            CoefficientField::constant(0.0),
            CoefficientField::constant(0.5),
            1.0,
            InitialLaw::Dirac { x0: 0.0 },
        );
        let f = TestFunctional::multi_marginal(
            "product",
            crate::functionals::MarginalPayoff::Product,
            vec![0.5, 1.0],
        );
        let grid = SpatialGrid::new(-1.0, 1.0, 9).unwrap();
        let scheme = SchemeConfig::new(8, Variant::PointFrozen, f64::INFINITY, 1.0);
        let report = value_function_convexity(&spec, &f, &grid, &scheme, 50_000, 5);
        assert!(report.all_pass);
        let dx = grid.dx();
        for d in &report.defects {
            // Undivided second difference of x^2 is 2 dx^2.
            assert!((d.second_difference - 2.0 * dx * dx).abs() < 3.0 * d.stderr + 1e-9);
        }
    }

    #[test]
    fn value_function_cross_checks_kernel_oracle_on_gbm() {
        let spec = gbm_spec(1.0, 0.2, 1.0);
        let m = 32;
        let s = crate::coefficients::s_default(m, 0.2, 1.0);
        let scheme = SchemeConfig::new(m, Variant::PointFrozen, s, 1.0);
        let f = TestFunctional::terminal("call", TerminalPayoff::Call { k: 1.0 });
        let grid = SpatialGrid::new(0.5, 1.5, 11).unwrap();
        let report = value_function_convexity(&spec, &f, &grid, &scheme, 100_000, 21);
        assert!(report.all_pass, "min d2 {}", report.min_second_difference);
        // Values are non-decreasing up to MC noise and match the kernel
        // oracle within 3 MC standard errors.
        let measure = build_measure(s, 128).unwrap();
        let kernel_grid = SpatialGrid::new(-1.0, 3.0, 2001).unwrap();
        let terminal = crate::kernel::GridFunction::from_fn(kernel_grid, |x| (x - 1.0).max(0.0));
        let run = crate::kernel::backward_induct_terminal(&terminal, &spec, &scheme, &measure).unwrap();
        let se = 0.2 / (100_000f64).sqrt() * 3.0; // payoff std is below 0.2 here
        for (i, v) in report.values.iter().enumerate() {
            let oracle = run.f.eval(grid.node(i));
            assert!((v - oracle).abs() < 3.0 * se + 1e-3, "x={}: {v} vs {oracle}", grid.node(i));
        }
        for w in report.values.windows(2) {
            assert!(w[1] >= w[0] - 1e-3);
        }
    }

    #[test]
    fn marginal_sigma_condition_examples() {
        // Same spec on both sides: equal within stderr.
        let (x, y) = bm_pair(0.25, 0.25, 1.0);
        let scheme = SchemeConfig::new(16, Variant::PointFrozen, f64::INFINITY, 1.0);
        let rep = marginal_sigma_condition(&x, &y, 0.5, &scheme, 20_000, 3).unwrap();
        assert_eq!(rep.e_abs_sigma_x, rep.e_abs_theta_y);
        // t = 0 with Dirac initial: exact coefficient values, stderr 0.
        let hyp_x = SdeSpec::new(
            CoefficientField::constant(0.0),
            CoefficientField::scaled_hyperbola(0.2),
            1.0,
            InitialLaw::Dirac { x0: 1.0 },
        );
        let hyp_y = SdeSpec::new(
            CoefficientField::constant(0.0),
            CoefficientField::scaled_hyperbola(0.3),
            1.0,
            InitialLaw::Dirac { x0: 1.0 },
        );
        let rep = marginal_sigma_condition(&hyp_x, &hyp_y, 0.0, &scheme, 1000, 3).unwrap();
        assert_eq!(rep.stderr_x, 0.0);
        assert!((rep.e_abs_sigma_x - 0.2 * 2.0_f64.sqrt()).abs() < 1e-14);
        assert!((rep.e_abs_theta_y - 0.3 * 2.0_f64.sqrt()).abs() < 1e-14);
        // Dominated pair at a later time: strict inequality with margin.
        let rep = marginal_sigma_condition(&hyp_x, &hyp_y, 0.5, &scheme, 50_000, 3).unwrap();
        let gap = rep.e_abs_theta_y - rep.e_abs_sigma_x;
        assert!(gap > 3.0 * (rep.stderr_x + rep.stderr_y), "gap {gap}");
    }

    #[test]
    fn increment_ratio_constant_sigma() {
        // sigma = 1, b = 0, s_time = 0: the deterministic part of the ratio
        // is exactly 1 at s = inf.
        assert_eq!(truncation_ratio(f64::INFINITY), 1.0);
        let spec = SdeSpec::new(
            CoefficientField::constant(0.0),
            CoefficientField::constant(1.0),
            1.0,
            InitialLaw::Dirac { x0: 0.0 },
        );
        let rows = increment_asymptotic(&spec, 0.0, &[0.25, 0.125], f64::INFINITY, 200_000, 11).unwrap();
        for row in rows {
            assert!(
                (row.ratio - 1.0).abs() < row.ci_half_width.max(0.01),
                "h={}: ratio {}",
                row.h,
                row.ratio
            );
        }
    }

    #[test]
    fn increment_ratio_gbm_tightens_with_h() {
        let spec = gbm_spec(1.0, 0.2, 1.0);
        let rows =
            increment_asymptotic(&spec, 0.0, &[0.25, 0.0625, 2.0_f64.powi(-10)], f64::INFINITY, 200_000, 13)
                .unwrap();
        let errs: Vec<f64> = rows.iter().map(|r| (r.ratio - 1.0).abs()).collect();
        // The smallest h lands in the [0.97, 1.03] window.
        assert!((0.97..=1.03).contains(&rows[2].ratio), "ratio {}", rows[2].ratio);
        // Monotone approach within CI slack.
        assert!(errs[2] <= errs[0] + rows[0].ci_half_width + rows[2].ci_half_width);
    }

    #[test]
    fn counterexample_demo_matches_closed_form() {
        let grid = SpatialGrid::new(-2.0, 2.0, 801).unwrap();
        let measure = build_measure(5.0, 128).unwrap();
        let rep = counterexample_demo(
            0.01,
            5.0,
            &CoefficientField::tent(),
            &grid,
            &measure,
            200_000,
            17,
        )
        .unwrap();
        // 0.1 * E|Z^5| * 1 = 0.0798 to quadrature accuracy.
        assert!((rep.closed_form - 0.1 * crate::analytic::truncated_abs_moment(5.0)).abs() < 1e-12);
        assert!((rep.oracle_violation - rep.closed_form).abs() < 1e-6);
        assert!((rep.mc_violation - rep.closed_form).abs() < 3.0 * rep.mc_stderr);
        assert_eq!(rep.compare.results[0].verdict, Verdict::Violated);
        // Convex control: sigma = |x| + 1 has no violation.
        let convex = CoefficientField::tabulated_from_fn(-4.0, 4.0, 8001, |x| x.abs() + 1.0).unwrap();
        let rep = counterexample_demo(0.01, 5.0, &convex, &grid, &measure, 50_000, 17).unwrap();
        assert!(rep.oracle_violation <= 1e-12, "violation {}", rep.oracle_violation);
        // Degenerate noise: s = 0 kills the effect.
        let m0 = build_measure(0.0, 64).unwrap();
        let rep = counterexample_demo(0.01, 0.0, &CoefficientField::tent(), &grid, &m0, 1000, 17).unwrap();
        assert_eq!(rep.oracle_violation, 0.0);
        assert_eq!(rep.closed_form, 0.0);
    }

    #[test]
    fn paired_runs_are_thread_count_invariant() {
        let (x, y) = bm_pair(0.2, 0.3, 1.0);
        let scheme = SchemeConfig::new(16, Variant::PointFrozen, 5.0, 1.0);
        let suite = vec![TestFunctional::terminal("call", TerminalPayoff::Call { k: 1.0 })];
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = single.install(|| run_paired_suite(&x, &y, &scheme, &suite, 30_000, 4, true));
        let b = many.install(|| run_paired_suite(&x, &y, &scheme, &suite, 30_000, 4, true));
        assert_eq!(a[0].diff_mean.to_bits(), b[0].diff_mean.to_bits());
        assert_eq!(a[0].diff_stderr.to_bits(), b[0].diff_stderr.to_bits());
    }

    #[test]
    fn dir_mode_full_suite_implies_marginal_ordering() {
        // When a diricv experiment reports ordered on the suite, the induced
        // single-coordinate convex functionals are ordered too.
        let mk = |t: f64| {
            SdeSpec::new(
                CoefficientField::constant(0.0),
                CoefficientField::scaled_hyperbola(t),
                1.0,
                InitialLaw::Dirac { x0: 1.0 },
            )
        };
        let scheme = SchemeConfig::new(32, Variant::PointFrozen, 9.0, 1.0);
        let suite = vec![
            TestFunctional::multi_marginal(
                "quadratic_c1",
                crate::functionals::MarginalPayoff::Quadratic { a: 1.0, b: 1.0, c: 1.0 },
                vec![0.5, 1.0],
            ),
            TestFunctional::multi_marginal(
                "avg_call",
                crate::functionals::MarginalPayoff::AvgCall { k: 1.0 },
                vec![0.5, 1.0],
            ),
        ];
        let exp = ExperimentSpec {
            spec_x: mk(0.2),
            spec_y: mk(0.3),
            mode: Mode::Dircvx,
            scheme,
            suite,
            n_paths: 150_000,
            seed: 23,
            confidence: 0.99,
            override_hypotheses: false,
            couple_initial: true,
        };
        let report = compare_ordered(&exp).unwrap();
        assert!(!report.any_violated());
        // Induced marginal calls at each coordinate time.
        for t in [0.5, 1.0] {
            let marg = ExperimentSpec {
                suite: vec![TestFunctional::multi_marginal(
                    "avg_call_single",
                    crate::functionals::MarginalPayoff::AvgCall { k: 1.0 },
                    vec![t],
                )],
                ..exp.clone()
            };
            let rep = compare_ordered(&marg).unwrap();
            assert_ne!(rep.results[0].verdict, Verdict::Violated);
        }
    }
}
