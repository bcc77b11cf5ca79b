//! Empirical convergence diagnostics: strong error rates against the exact
//! GBM solution, truncation-event frequencies against the Gaussian tail
//! bound, and one-dimensional empirical Wasserstein distances.

use crate::analytic::normal_tail;
use crate::coefficients::s_default;
use crate::error::{Error, Result};
use crate::euler::{draw_truncated, gbm_spec, step, NoisePanel, SchemeConfig, Variant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Exact W1 between equal-weight empirical laws on the line: mean absolute
/// difference of sorted samples.
pub fn w1_empirical(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let sum: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Truncation threshold policy for rate studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// s_m = sqrt(m) / (2 Lip(sigma) sqrt(T)).
    Default,
    Fixed { s: f64 },
    /// s_m = c sqrt(ln m); convergence needs c > sqrt(2).
    LogGrowth { c: f64 },
}

impl ThresholdPolicy {
    pub fn threshold(&self, m: usize, lip_sigma: f64, horizon: f64) -> f64 {
        match self {
            ThresholdPolicy::Default => s_default(m, lip_sigma, horizon),
            ThresholdPolicy::Fixed { s } => *s,
            ThresholdPolicy::LogGrowth { c } => c * (m as f64).ln().sqrt(),
        }
    }
}

/// Errors per step count with a fitted log-log slope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub m_list: Vec<usize>,
    pub errors: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

fn fit_loglog(m_list: &[usize], errors: &[f64], stderrs: &[f64]) -> (f64, f64, f64, Vec<f64>) {
    let pts: Vec<(f64, f64, f64)> = m_list
        .iter()
        .zip(errors.iter().zip(stderrs))
        .filter(|&(_, (&e, _))| e > 0.0)
        .map(|(&m, (&e, &se))| ((m as f64).ln(), e.ln(), se / e))
        .collect();
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN, f64::NAN, vec![]);
    }
    let n = pts.len() as f64;
    let xbar = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xbar) * (p.0 - xbar)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let residuals: Vec<f64> = pts.iter().map(|p| p.1 - intercept - slope * p.0).collect();
    // Propagate the per-point MC error of ln(e) through the OLS weights.
    let slope_var: f64 = pts
        .iter()
        .map(|p| {
            let w = (p.0 - xbar) / sxx;
            w * w * p.2 * p.2
        })
        .sum();
    (slope, slope_var.sqrt(), intercept, residuals)
}

/// Mean over paths of max_k |exact - scheme| on shared noise, with the CLT
/// standard error.
pub fn coupled_max_error(
    x0: f64,
    theta: f64,
    horizon: f64,
    m: usize,
    threshold: f64,
    n_paths: usize,
    seed: u64,
) -> (f64, f64) {
    let spec = gbm_spec(x0, theta, horizon);
    let config = SchemeConfig::new(m, Variant::PointFrozen, threshold, horizon);
    let panel = NoisePanel::new(n_paths, m, seed);
    let h = horizon / m as f64;
    let sqrt_h = h.sqrt();
    const CHUNK: usize = 4096;
    let n_chunks = n_paths.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = (0.0, 0.0);
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n_paths);
            for n in lo..hi {
                let mut xs = x0; // scheme
                let mut w = 0.0; // Brownian path
                let mut gap: f64 = 0.0;
                for k in 0..m {
                    let g = panel.gaussian(n, k);
                    let z = draw_truncated(g, threshold);
                    xs = step(xs, k, &spec, &config, z);
                    w += sqrt_h * g;
                    let t = h * (k + 1) as f64;
                    let exact = x0 * (theta * w - 0.5 * theta * theta * t).exp();
                    gap = gap.max((exact - xs).abs());
                }
                acc.0 += gap;
                acc.1 += gap * gap;
            }
            acc
        })
        .collect();
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let nf = n_paths as f64;
    let mean = s1 / nf;
    let var = (s2 / nf - mean * mean).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Strong-rate study for GBM: coupled max error against the exact solution
/// over a geometric list of step counts, with the fitted log-log slope.
pub fn strong_error_rate(
    theta: f64,
    x0: f64,
    horizon: f64,
    m_list: &[usize],
    n_paths: usize,
    seed: u64,
    policy: ThresholdPolicy,
) -> Result<RateReport> {
    if m_list.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 step counts".into()));
    }
    let mut errors = Vec::with_capacity(m_list.len());
    let mut stderrs = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let s = policy.threshold(m, theta.abs(), horizon);
        let (e, se) = coupled_max_error(x0, theta, horizon, m, s, n_paths, seed);
        errors.push(e);
        stderrs.push(se);
    }
    let (slope, slope_stderr, intercept, residuals) = fit_loglog(m_list, &errors, &stderrs);
    Ok(RateReport { m_list: m_list.to_vec(), errors, stderrs, slope, slope_stderr, intercept, residuals })
}

/// Observed truncation exceedance against the union tail bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruncationReport {
    pub observed_fraction: f64,
    pub binomial_stderr: f64,
    /// m P(|G| > s).
    pub union_bound: f64,
    /// sqrt(2/pi) (m/s) exp(-s^2/2), the closed-form majorant.
    pub tail_majorant: f64,
}

/// Fraction of panels (paths) with any |G| > s.
pub fn truncation_event_rate(noise: &NoisePanel, s: f64) -> TruncationReport {
    let n = noise.n_paths;
    const CHUNK: usize = 4096;
    let n_chunks = n.div_ceil(CHUNK);
    let count: u64 = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut hits = 0u64;
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            for path in lo..hi {
                for k in 0..noise.m {
                    if noise.gaussian(path, k).abs() > s {
                        hits += 1;
                        break;
                    }
                }
            }
            hits
        })
        .sum();
    let p = count as f64 / n as f64;
    let m = noise.m as f64;
    let tail = 2.0 * normal_tail(s);
    TruncationReport {
        observed_fraction: p,
        binomial_stderr: (p * (1.0 - p) / n as f64).sqrt(),
        union_bound: m * tail,
        tail_majorant: if s > 0.0 {
            (2.0 / std::f64::consts::PI).sqrt() * m / s * (-0.5 * s * s).exp()
        } else {
            f64::INFINITY
        },
    }
}

/// Bitwise agreement of truncated and untruncated schemes on every panel
/// without an exceedance.
pub fn truncation_bitwise_consistency(
    spec: &crate::coefficients::SdeSpec,
    config: &SchemeConfig,
    noise: &NoisePanel,
) -> Result<bool> {
    let truncated = crate::euler::simulate_batch(spec, config, noise)?;
    let mut plain_cfg = *config;
    plain_cfg.threshold = f64::INFINITY;
    let plain = crate::euler::simulate_batch(spec, &plain_cfg, noise)?;
    for n in 0..noise.n_paths {
        let exceeded = (0..noise.m).any(|k| noise.gaussian(n, k).abs() > config.threshold);
        if !exceeded && truncated.path(n) != plain.path(n) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn w1_examples() {
        let a = [3.0, 1.0, 2.0];
        assert_eq!(w1_empirical(&a, &a).unwrap(), 0.0);
        assert_eq!(w1_empirical(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert!(w1_empirical(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn w1_metric_properties() {
        let sample = |seed: u64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| rng::standard_normal(seed, rng::STREAM_CHECKER, i as u64, 0))
                .collect()
        };
        let (a, b, c) = (sample(1, 2000), sample(2, 2000), sample(3, 2000));
        let dab = w1_empirical(&a, &b).unwrap();
        let dba = w1_empirical(&b, &a).unwrap();
        assert_eq!(dab, dba);
        let dac = w1_empirical(&a, &c).unwrap();
        let dcb = w1_empirical(&c, &b).unwrap();
        assert!(dac <= dab + dcb + 1e-12);
        assert!(dab > 0.0);
    }

    #[test]
    fn w1_between_equal_laws_is_sampling_noise() {
        // sigma = 1, b = 0, m = 1, s = inf: the scheme terminal is exactly
        // N(0,1), so W1 against a fresh normal sample is pure noise.
        let n = 1_000_000;
        let panel = NoisePanel::new(n, 1, 5);
        let spec = crate::euler::gbm_spec(1.0, 0.0, 1.0); // placeholder spec
        let _ = spec;
        let scheme: Vec<f64> = (0..n).map(|i| panel.gaussian(i, 0)).collect();
        let reference: Vec<f64> = (0..n)
            .map(|i| rng::standard_normal(77, rng::STREAM_CHECKER, i as u64, 1))
            .collect();
        let d = w1_empirical(&scheme, &reference).unwrap();
        assert!(d <= 2e-3, "W1 {d}");
    }

    #[test]
    fn zero_volatility_has_zero_error() {
        let (e, se) = coupled_max_error(1.0, 0.0, 1.0, 32, 5.0, 1000, 3);
        assert_eq!(e, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn gbm_strong_rate_is_about_half() {
        let report = strong_error_rate(
            0.2,
            1.0,
            1.0,
            &[16, 64, 256],
            20_000,
            11,
            ThresholdPolicy::Default,
        )
        .unwrap();
        assert!(report.errors.windows(2).all(|w| w[1] < w[0]));
        assert!(
            (-0.75..=-0.3).contains(&report.slope),
            "slope {} +- {}",
            report.slope,
            report.slope_stderr
        );
        // Doubling N keeps the slope within the combined CI.
        let bigger = strong_error_rate(
            0.2,
            1.0,
            1.0,
            &[16, 64, 256],
            40_000,
            12,
            ThresholdPolicy::Default,
        )
        .unwrap();
        let tol = 3.0 * (report.slope_stderr + bigger.slope_stderr) + 0.05;
        assert!((report.slope - bigger.slope).abs() < tol);
    }

    #[test]
    fn truncation_event_examples() {
        let noise = NoisePanel::new(50_000, 20, 9);
        assert_eq!(truncation_event_rate(&noise, f64::INFINITY).observed_fraction, 0.0);
        assert_eq!(truncation_event_rate(&noise, 0.0).observed_fraction, 1.0);
        let rep = truncation_event_rate(&noise, 3.0);
        assert!(rep.observed_fraction <= rep.union_bound + 3.0 * rep.binomial_stderr);
        assert!(rep.union_bound <= rep.tail_majorant);
        assert!(rep.observed_fraction > 0.0);
    }

    #[test]
    fn truncated_and_plain_schemes_agree_off_exceedance() {
        let spec = crate::euler::gbm_spec(1.0, 0.3, 1.0);
        let config = SchemeConfig::new(16, Variant::PointFrozen, 2.0, 1.0);
        let noise = NoisePanel::new(2_000, 16, 21);
        assert!(truncation_bitwise_consistency(&spec, &config, &noise).unwrap());
    }

    #[test]
    fn threshold_criterion_separates_policies() {
        // With s_m = 2 sqrt(ln m) the terminal W1 against the exact law
        // decreases along m; with s_m = 1 it stalls at a positive floor.
        let n = 200_000;
        let horizon = 1.0;
        let run = |m: usize, s: f64| -> f64 {
            let spec = crate::coefficients::SdeSpec::new(
                crate::coefficients::CoefficientField::constant(0.0),
                crate::coefficients::CoefficientField::constant(1.0),
                horizon,
                crate::coefficients::InitialLaw::Dirac { x0: 0.0 },
            );
            let config = SchemeConfig::new(m, Variant::PointFrozen, s, horizon);
            let panel = NoisePanel::new(n, m, 31);
            let paths = crate::euler::simulate_batch(&spec, &config, &panel).unwrap();
            let reference: Vec<f64> = (0..n)
                .map(|i| rng::standard_normal(99, rng::STREAM_CHECKER, i as u64, 2))
                .collect();
            w1_empirical(&paths.terminal(), &reference).unwrap()
        };
        let good: Vec<f64> = [8usize, 32, 128]
            .iter()
            .map(|&m| run(m, 2.0 * (m as f64).ln().sqrt()))
            .collect();
        let floor = 3e-3; // sampling noise scale at this N
        assert!(good[0] > good[1] - floor && good[1] > good[2] - floor, "{good:?}");
        assert!(good[2] < 6e-3, "tail {:?}", good);
        let stalled: Vec<f64> = [8usize, 32, 128].iter().map(|&m| run(m, 1.0)).collect();
        for w in &stalled {
            assert!(*w > 0.3, "stalled W1 {w}");
        }
    }

    #[test]
    fn coupled_truncation_gap_vanishes_at_default_threshold() {
        // At s_default the exceedance probability over the whole panel is
        // astronomically small, so the coupled gap is exactly zero; a slow
        // log-growth policy shows the decay instead.
        for &m in &[16usize, 64] {
            let s = s_default(m, 0.2, 1.0);
            let spec = crate::euler::gbm_spec(1.0, 0.2, 1.0);
            let config = SchemeConfig::new(m, Variant::PointFrozen, s, 1.0);
            let noise = NoisePanel::new(20_000, m, 41);
            assert!(truncation_bitwise_consistency(&spec, &config, &noise).unwrap());
            assert_eq!(truncation_event_rate(&noise, s).observed_fraction, 0.0);
        }
        let gap_at = |m: usize| {
            let s = 1.6 * (m as f64).ln().sqrt();
            let spec = crate::euler::gbm_spec(1.0, 0.2, 1.0);
            let trunc = SchemeConfig::new(m, Variant::PointFrozen, s, 1.0);
            let noise = NoisePanel::new(50_000, m, 43);
            let a = crate::euler::simulate_batch(&spec, &trunc, &noise).unwrap();
            let mut plain_cfg = trunc;
            plain_cfg.threshold = f64::INFINITY;
            let b = crate::euler::simulate_batch(&spec, &plain_cfg, &noise).unwrap();
            let mut total = 0.0;
            for n in 0..noise.n_paths {
                let gap = a
                    .path(n)
                    .iter()
                    .zip(b.path(n))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0_f64, f64::max);
                total += gap;
            }
            total / noise.n_paths as f64
        };
        let g8 = gap_at(8);
        let g64 = gap_at(64);
        assert!(g64 < g8, "gap did not decay: {g8} -> {g64}");
    }
}
