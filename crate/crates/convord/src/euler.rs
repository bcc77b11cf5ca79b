//! Truncated Euler schemes on a uniform time grid, driven by the
//! counter-based noise panel, plus the piecewise-linear interpolation
//! operator and an exact GBM reference solution coupled to the same noise.

use crate::coefficients::{InitialLaw, SdeSpec};
use crate::error::{Error, Result};
use crate::rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

/// Scheme variant: per-step time integrals of the coefficients, or both
/// variables frozen at the left endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TimeIntegrated,
    PointFrozen,
}

/// Discretization parameters of a truncated Euler run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub m: usize,
    pub variant: Variant,
    /// Truncation threshold; `f64::INFINITY` reproduces the plain scheme.
    pub threshold: f64,
    pub horizon: f64,
}

impl SchemeConfig {
    pub fn new(m: usize, variant: Variant, threshold: f64, horizon: f64) -> Self {
        Self { m, variant, threshold, horizon }
    }

    #[inline]
    pub fn step_size(&self) -> f64 {
        self.horizon / self.m as f64
    }
}

/// Virtual panel of standard normal draws: G[path][step] is a pure function
/// of (seed, path, step), so no values are stored and any evaluation order
/// gives identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePanel {
    pub n_paths: usize,
    pub m: usize,
    pub seed: u64,
    pub generator_id: &'static str,
}

impl NoisePanel {
    pub fn new(n_paths: usize, m: usize, seed: u64) -> Self {
        Self { n_paths, m, seed, generator_id: rng::GENERATOR_ID }
    }

    /// Standard normal draw for step k of a path.
    #[inline]
    pub fn gaussian(&self, path: usize, step: usize) -> f64 {
        rng::standard_normal(self.seed, rng::STREAM_GAUSSIAN, path as u64, step as u64)
    }

    /// Uniform in (0,1) from the disjoint initial-law stream.
    #[inline]
    pub fn initial_uniform(&self, path: usize) -> f64 {
        rng::uniform(self.seed, rng::STREAM_INITIAL, path as u64, 0)
    }
}

/// Truncated draw g 1_{|g| <= s}.
#[inline]
pub fn draw_truncated(g: f64, s: f64) -> f64 {
    if g.abs() <= s {
        g
    } else {
        0.0
    }
}

/// Simulation diagnostics; clamp events come from the square root of the
/// quadratured diffusion integral rounding slightly negative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sqrt_clamps: u64,
}

/// Materialized N x (m+1) panel of scheme values on the uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub n_paths: usize,
    pub m: usize,
    pub horizon: f64,
    pub seed: u64,
    pub variant: Variant,
    pub threshold: f64,
    /// Row-major: values[path * (m+1) + k].
    pub values: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl SamplePaths {
    #[inline]
    pub fn at(&self, path: usize, k: usize) -> f64 {
        self.values[path * (self.m + 1) + k]
    }

    #[inline]
    pub fn path(&self, path: usize) -> &[f64] {
        let w = self.m + 1;
        &self.values[path * w..(path + 1) * w]
    }

    pub fn terminal(&self) -> Vec<f64> {
        (0..self.n_paths).map(|n| self.at(n, self.m)).collect()
    }

    /// Columnar binary dump: header (N, m, T, seed, variant, s) then
    /// row-major 64-bit little-endian floats.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&self.horizon.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&[match self.variant {
            Variant::TimeIntegrated => 0u8,
            Variant::PointFrozen => 1u8,
        }])?;
        w.write_all(&self.threshold.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// CSV dump for small panels: first row is the time grid.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let h = self.horizon / self.m as f64;
        let header: Vec<String> = (0..=self.m).map(|k| format!("{}", h * k as f64)).collect();
        writeln!(w, "{}", header.join(","))?;
        for n in 0..self.n_paths {
            let row: Vec<String> = self.path(n).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Effective per-step drift at step k, matching the scheme variant.
#[inline]
pub fn effective_drift(spec: &SdeSpec, config: &SchemeConfig, k: usize, x: f64) -> f64 {
    let h = config.step_size();
    let t0 = h * k as f64;
    match config.variant {
        Variant::TimeIntegrated => spec.drift.step_mean(t0, t0 + h, x),
        Variant::PointFrozen => spec.drift.eval(t0, x),
    }
}

/// Effective per-step diffusion at step k; the time-integrated variant uses
/// the root-mean-square of sigma over the step, clamped at zero when the
/// quadrature rounds negative (the clamp is counted by the caller).
#[inline]
pub fn effective_diffusion(spec: &SdeSpec, config: &SchemeConfig, k: usize, x: f64) -> (f64, bool) {
    let h = config.step_size();
    let t0 = h * k as f64;
    match config.variant {
        Variant::TimeIntegrated => {
            let ms = spec.diffusion.step_mean_sq(t0, t0 + h, x);
            if ms < 0.0 {
                (0.0, true)
            } else {
                (ms.sqrt(), false)
            }
        }
        Variant::PointFrozen => (spec.diffusion.eval(t0, x), false),
    }
}

/// One scheme step from x with pre-truncated draw z (caller enforces |z| <= s).
pub fn step(x: f64, k: usize, spec: &SdeSpec, config: &SchemeConfig, z: f64) -> f64 {
    let h = config.step_size();
    let b = effective_drift(spec, config, k, x);
    let (sig, _) = effective_diffusion(spec, config, k, x);
    x + h * b + h.sqrt() * sig * z
}

#[inline]
fn step_counting(x: f64, k: usize, spec: &SdeSpec, config: &SchemeConfig, z: f64, clamps: &AtomicU64) -> f64 {
    let h = config.step_size();
    let b = effective_drift(spec, config, k, x);
    let (sig, clamped) = effective_diffusion(spec, config, k, x);
    if clamped {
        clamps.fetch_add(1, Ordering::Relaxed);
    }
    x + h * b + h.sqrt() * sig * z
}

/// Runs the full panel. Paths are independent, so the parallel fill is
/// bit-identical for any thread count.
pub fn simulate_batch(spec: &SdeSpec, config: &SchemeConfig, noise: &NoisePanel) -> Result<SamplePaths> {
    if noise.m != config.m {
        return Err(Error::DimensionMismatch(format!(
            "noise panel has m={}, scheme wants m={}",
            noise.m, config.m
        )));
    }
    let width = config.m + 1;
    let mut values = vec![0.0; noise.n_paths * width];
    let clamps = AtomicU64::new(0);
    values.par_chunks_mut(width).enumerate().for_each(|(n, row)| {
        let mut x = spec.initial.quantile(noise.initial_uniform(n));
        row[0] = x;
        for k in 0..config.m {
            let z = draw_truncated(noise.gaussian(n, k), config.threshold);
            x = step_counting(x, k, spec, config, z, &clamps);
            row[k + 1] = x;
        }
    });
    Ok(SamplePaths {
        n_paths: noise.n_paths,
        m: config.m,
        horizon: config.horizon,
        seed: noise.seed,
        variant: config.variant,
        threshold: config.threshold,
        values,
        diagnostics: Diagnostics { sqrt_clamps: clamps.load(Ordering::Relaxed) },
    })
}

/// Drives two schemes with identical draws per path and step. When
/// `couple_initial` is set the initial laws are sampled comonotonically
/// (one shared uniform through each quantile map).
pub fn simulate_coupled(
    spec_x: &SdeSpec,
    spec_y: &SdeSpec,
    config: &SchemeConfig,
    noise: &NoisePanel,
    couple_initial: bool,
) -> Result<(SamplePaths, SamplePaths)> {
    if (spec_x.horizon - spec_y.horizon).abs() > 0.0 {
        return Err(Error::HorizonMismatch { x: spec_x.horizon, y: spec_y.horizon });
    }
    let x = simulate_batch(spec_x, config, noise)?;
    let y = if couple_initial {
        simulate_batch(spec_y, config, noise)?
    } else {
        // Independent initial stream: offset the path index space.
        let mut alt = *noise;
        alt.seed = noise.seed ^ 0x5151_5151_5151_5151;
        let width = config.m + 1;
        let mut values = vec![0.0; noise.n_paths * width];
        let clamps = AtomicU64::new(0);
        values.par_chunks_mut(width).enumerate().for_each(|(n, row)| {
            let mut xv = spec_y.initial.quantile(alt.initial_uniform(n));
            row[0] = xv;
            for k in 0..config.m {
                let z = draw_truncated(noise.gaussian(n, k), config.threshold);
                xv = step_counting(xv, k, spec_y, config, z, &clamps);
                row[k + 1] = xv;
            }
        });
        SamplePaths {
            n_paths: noise.n_paths,
            m: config.m,
            horizon: config.horizon,
            seed: noise.seed,
            variant: config.variant,
            threshold: config.threshold,
            values,
            diagnostics: Diagnostics { sqrt_clamps: clamps.load(Ordering::Relaxed) },
        }
    };
    Ok((x, y))
}

/// Piecewise-linear interpolation of grid values on the uniform mesh of
/// [0, T]; the continuous embedding whose sup norm is max_k |values[k]|.
pub fn interpolate(values: &[f64], horizon: f64, t: f64) -> Result<f64> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::InvalidArgument(format!("t={t} outside [0, {horizon}]")));
    }
    let m = values.len() - 1;
    let h = horizon / m as f64;
    let pos = t / h;
    let k = (pos as usize).min(m.saturating_sub(1));
    let frac = pos - k as f64;
    Ok(values[k] + (values[k + 1] - values[k]) * frac)
}

/// Exact GBM panel X[n][k] = x0 exp(theta W_{t_k} - theta^2 t_k / 2) with the
/// Brownian path summed from the same Gaussian panel as the schemes.
pub fn exact_gbm_paths(x0: f64, theta: f64, noise: &NoisePanel, horizon: f64) -> SamplePaths {
    let width = noise.m + 1;
    let h = horizon / noise.m as f64;
    let sqrt_h = h.sqrt();
    let mut values = vec![0.0; noise.n_paths * width];
    values.par_chunks_mut(width).enumerate().for_each(|(n, row)| {
        let mut w = 0.0;
        row[0] = x0;
        for k in 0..noise.m {
            w += sqrt_h * noise.gaussian(n, k);
            let t = h * (k + 1) as f64;
            row[k + 1] = x0 * (theta * w - 0.5 * theta * theta * t).exp();
        }
    });
    SamplePaths {
        n_paths: noise.n_paths,
        m: noise.m,
        horizon,
        seed: noise.seed,
        variant: Variant::PointFrozen,
        threshold: f64::INFINITY,
        values,
        diagnostics: Diagnostics::default(),
    }
}

/// Martingale GBM spec (zero drift, diffusion theta x) from a Dirac start.
pub fn gbm_spec(x0: f64, theta: f64, horizon: f64) -> SdeSpec {
    use crate::coefficients::CoefficientField;
    SdeSpec::new(
        CoefficientField::constant(0.0),
        CoefficientField::proportional(theta),
        horizon,
        InitialLaw::Dirac { x0 },
    )
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use crate::coefficients::{CoefficientField, InitialLaw, SdeSpec};
    use proptest::prelude::*;

    proptest! {
        // One-step monotonicity: with |z| <= s <= 1/(2 Lip(sigma) sqrt(h)) and
        // h <= 1/(2 c_b), x < x' implies step(x) <= step(x') up to f64 slack.
        #[test]
        fn one_step_map_is_monotone(
            x in -5.0f64..5.0,
            dx in 1e-6f64..3.0,
            zfrac in -1.0f64..1.0,
            m in 8usize..64,
        ) {
            let spec = SdeSpec::new(
                CoefficientField::affine(0.1, -0.4),   // c_b = 0.4
                CoefficientField::scaled_hyperbola(0.3), // Lip = 0.3
                1.0,
                InitialLaw::Dirac { x0: 0.0 },
            );
            let h = 1.0 / m as f64;
            prop_assume!(h <= 1.0 / (2.0 * 0.4));
            let s = 1.0 / (2.0 * 0.3 * h.sqrt());
            let z = zfrac * s;
            let cfg = SchemeConfig::new(m, Variant::PointFrozen, s, 1.0);
            let lo = step(x, 0, &spec, &cfg, z);
            let hi = step(x + dx, 0, &spec, &cfg, z);
            prop_assert!(hi >= lo - 1e-12 * (1.0 + x.abs() + dx));
        }

        // Sup norm of the interpolated path equals the max of grid values.
        #[test]
        fn interpolation_sup_norm_identity(values in proptest::collection::vec(-50.0f64..50.0, 2..20)) {
            let horizon = 1.0;
            let node_max = values.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
            let mut sampled: f64 = 0.0;
            for i in 0..=400 {
                let t = horizon * i as f64 / 400.0;
                sampled = sampled.max(interpolate(&values, horizon, t).unwrap().abs());
            }
            // The sampled sup never exceeds the node max and attains it
            // (nodes are among the sample points when 400 % (len-1) == 0;
            // otherwise within interpolation of the sampling mesh).
            prop_assert!(sampled <= node_max + 1e-12);
            let mut node_hit: f64 = 0.0;
            for (k, &v) in values.iter().enumerate() {
                let t = horizon * k as f64 / (values.len() - 1) as f64;
                let at_node = interpolate(&values, horizon, t).unwrap();
                prop_assert!((at_node - v).abs() < 1e-12);
                node_hit = node_hit.max(at_node.abs());
            }
            prop_assert!((node_hit - node_max).abs() < 1e-12);
        }

        // The s = inf panel coincides with any s above the panel max.
        #[test]
        fn threshold_saturation(seed in 0u64..1000, s_extra in 0.0f64..3.0) {
            let spec = crate::euler::gbm_spec(1.0, 0.2, 1.0);
            let noise = NoisePanel::new(50, 8, seed);
            let mut gmax: f64 = 0.0;
            for n in 0..50 {
                for k in 0..8 {
                    gmax = gmax.max(noise.gaussian(n, k).abs());
                }
            }
            let a = simulate_batch(&spec, &SchemeConfig::new(8, Variant::PointFrozen, gmax + s_extra, 1.0), &noise).unwrap();
            let b = simulate_batch(&spec, &SchemeConfig::new(8, Variant::PointFrozen, f64::INFINITY, 1.0), &noise).unwrap();
            prop_assert_eq!(a.values, b.values);
        }
    }
}
