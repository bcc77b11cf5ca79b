//! Mollified-and-linearly-extended diffusion pairs: smooth approximations
//! (sigma_n, theta_n) that keep 0 <= sigma_n <= theta_n, restore a finite
//! semi-convexity constant, and stay within Lip/n of the originals on
//! [-n, n].

use crate::coefficients::{CoefficientField, SpatialGrid};
use crate::error::{Error, Result};
use crate::quad::gauss_legendre;
use serde::{Deserialize, Serialize};

/// The bump density rho(u) = C exp(-1/(1-u^2)) on (-1, 1), normalized once
/// by quadrature; scale n gives rho_n(x) = n rho(n x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifierKernel {
    normalization: f64,
}

impl MollifierKernel {
    pub fn new() -> Self {
        // The integrand vanishes to all orders at the endpoints, so the
        // rule converges fast; 200 nodes puts the error below 1e-13.
        let rule = gauss_legendre(200);
        let raw: f64 = rule.iter().map(|&(u, w)| w * bump_raw(u)).sum();
        Self { normalization: 1.0 / raw }
    }

    #[inline]
    pub fn density(&self, u: f64) -> f64 {
        self.normalization * bump_raw(u)
    }

    #[inline]
    pub fn density_derivative(&self, u: f64) -> f64 {
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let d = 1.0 - u * u;
        self.normalization * (-2.0 * u / (d * d)) * (-1.0 / d).exp()
    }

    /// rho_n * f at x for scale n, splitting the u-integral at the kink
    /// preimages so every panel is smooth for the rule.
    pub fn convolve<F: Fn(f64) -> f64>(
        &self,
        rule: &[(f64, f64)],
        n: f64,
        x: f64,
        kinks: &[f64],
        f: F,
    ) -> f64 {
        self.panel_integrate(rule, n, x, kinks, |u| self.density(u) * f(x - u / n))
    }

    /// d/dx (rho_n * f) at x: integral of n rho'(u) f(x - u/n) du.
    pub fn convolve_derivative<F: Fn(f64) -> f64>(
        &self,
        rule: &[(f64, f64)],
        n: f64,
        x: f64,
        kinks: &[f64],
        f: F,
    ) -> f64 {
        self.panel_integrate(rule, n, x, kinks, |u| n * self.density_derivative(u) * f(x - u / n))
    }

    fn panel_integrate<G: Fn(f64) -> f64>(
        &self,
        rule: &[(f64, f64)],
        n: f64,
        x: f64,
        kinks: &[f64],
        g: G,
    ) -> f64 {
        // f(x - u/n) kinks at u = n (x - kink); keep the ones inside (-1, 1).
        let mut cuts: Vec<f64> = kinks
            .iter()
            .map(|&k| n * (x - k))
            .filter(|u| u.abs() < 1.0)
            .collect();
        cuts.sort_by(f64::total_cmp);
        let mut acc = 0.0;
        let mut left = -1.0;
        for cut in cuts.into_iter().chain(std::iter::once(1.0)) {
            if cut - left > 1e-14 {
                let half = 0.5 * (cut - left);
                let mid = 0.5 * (cut + left);
                acc += rule.iter().map(|&(u, w)| w * g(mid + half * u)).sum::<f64>() * half;
            }
            left = cut;
        }
        acc
    }
}

impl Default for MollifierKernel {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn bump_raw(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

/// A mollified diffusion pair tabulated on [-n-2, n+2].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothedPair {
    pub sigma_n: CoefficientField,
    pub theta_n: CoefficientField,
    pub n: usize,
    /// Uniform error bound Lip(sigma)/n (resp. theta) on [-n, n].
    pub sigma_error_bound: f64,
    pub theta_error_bound: f64,
    /// Clipped tail slopes actually used: (sigma right, sigma left,
    /// theta right, theta left).
    pub tail_slopes: [f64; 4],
}

/// Quadrature nodes per output point for the bump convolution.
const CONV_NODES: usize = 64;
/// Output tabulation step.
const OUTPUT_DX: f64 = 1e-3;

/// Builds the smoothed pair at time slice t: bump convolution on [-n, n]
/// and linear extension outside with the clipped slopes (the joint max/min
/// with theta's slopes preserves domination on the tails).
pub fn build_mollified_pair(
    sigma: &CoefficientField,
    theta: &CoefficientField,
    n: usize,
    t: f64,
) -> Result<SmoothedPair> {
    if n == 0 {
        return Err(Error::InvalidArgument("mollifier scale n must be >= 1".into()));
    }
    let nf = n as f64;
    // Validate 0 <= sigma <= theta on [-n-1, n+1].
    let probe = SpatialGrid::new(-nf - 1.0, nf + 1.0, (2.0 * (nf + 1.0) / 1e-2) as usize + 1)?;
    let mut bad = Vec::new();
    for x in probe.nodes() {
        let s = sigma.try_eval(t, x)?;
        let th = theta.try_eval(t, x)?;
        if s < -1e-12 || s > th + 1e-12 {
            bad.push((x, s, th));
        }
    }
    if let Some(&(x, s, th)) = bad.first() {
        return Err(Error::DominationViolation { count: bad.len(), first_x: x, lhs: s, rhs: th });
    }

    let kernel = MollifierKernel::new();
    let rule = gauss_legendre(CONV_NODES);
    let sig = |x: f64| sigma.eval(t, x);
    let th = |x: f64| theta.eval(t, x);
    let sig_kinks = sigma.kink_locations();
    let th_kinks = theta.kink_locations();

    // Edge values and derivatives of the convolutions at +-n.
    let sig_at = |x: f64| kernel.convolve(&rule, nf, x, &sig_kinks, sig);
    let th_at = |x: f64| kernel.convolve(&rule, nf, x, &th_kinks, th);
    let d_sig_hi = kernel.convolve_derivative(&rule, nf, nf, &sig_kinks, sig);
    let d_sig_lo = kernel.convolve_derivative(&rule, nf, -nf, &sig_kinks, sig);
    let d_th_hi = kernel.convolve_derivative(&rule, nf, nf, &th_kinks, th);
    let d_th_lo = kernel.convolve_derivative(&rule, nf, -nf, &th_kinks, th);

    let sig_slope_hi = d_sig_hi.max(0.0);
    let sig_slope_lo = d_sig_lo.min(0.0);
    let th_slope_hi = d_sig_hi.max(d_th_hi).max(0.0);
    let th_slope_lo = d_sig_lo.min(d_th_lo).min(0.0);

    let lo = -nf - 2.0;
    let hi = nf + 2.0;
    let count = ((hi - lo) / OUTPUT_DX).round() as usize + 1;
    let out = SpatialGrid::new(lo, hi, count)?;
    let sig_hi_val = sig_at(nf);
    let sig_lo_val = sig_at(-nf);
    let th_hi_val = th_at(nf);
    let th_lo_val = th_at(-nf);

    let mut sig_vals = Vec::with_capacity(count);
    let mut th_vals = Vec::with_capacity(count);
    for x in out.nodes() {
        if x > nf {
            sig_vals.push(sig_hi_val + sig_slope_hi * (x - nf));
            th_vals.push(th_hi_val + th_slope_hi * (x - nf));
        } else if x < -nf {
            sig_vals.push(sig_lo_val + sig_slope_lo * (x + nf));
            th_vals.push(th_lo_val + th_slope_lo * (x + nf));
        } else {
            sig_vals.push(sig_at(x));
            th_vals.push(th_at(x));
        }
    }

    let lip_sig = sigma.exact_lipschitz().unwrap_or(f64::INFINITY);
    let lip_th = theta.exact_lipschitz().unwrap_or(f64::INFINITY);
    Ok(SmoothedPair {
        sigma_n: CoefficientField::tabulated(lo, hi, sig_vals)?,
        theta_n: CoefficientField::tabulated(lo, hi, th_vals)?,
        n,
        sigma_error_bound: lip_sig / nf,
        theta_error_bound: lip_th / nf,
        tail_slopes: [sig_slope_hi, sig_slope_lo, th_slope_hi, th_slope_lo],
    })
}

impl SmoothedPair {
    /// Config parameters of the tabulated fields ([lo, hi, values..]),
    /// directly usable as a `tabulated` registry entry.
    pub fn tabulated_params(&self) -> (Vec<f64>, Vec<f64>) {
        let dump = |f: &CoefficientField| -> Vec<f64> {
            match &f.family {
                crate::coefficients::Family::Tabulated { lo, hi, values } => {
                    let mut out = vec![*lo, *hi];
                    out.extend_from_slice(values);
                    out
                }
                _ => unreachable!("smoothed fields are tabulated by construction"),
            }
        };
        (dump(&self.sigma_n), dump(&self.theta_n))
    }
}

/// Sup errors of the smoothed pair against the originals on a grid inside
/// [-n, n].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ApproximationError {
    pub sup_err_sigma: f64,
    pub sup_err_theta: f64,
}

pub fn approximation_error(
    pair: &SmoothedPair,
    sigma: &CoefficientField,
    theta: &CoefficientField,
    grid: &SpatialGrid,
    t: f64,
) -> Result<ApproximationError> {
    let nf = pair.n as f64;
    if grid.lo < -nf || grid.hi > nf {
        return Err(Error::InvalidGrid(format!(
            "error grid must sit inside [-{nf}, {nf}]"
        )));
    }
    let mut es: f64 = 0.0;
    let mut et: f64 = 0.0;
    for x in grid.nodes() {
        es = es.max((pair.sigma_n.eval(t, x) - sigma.try_eval(t, x)?).abs());
        et = et.max((pair.theta_n.eval(t, x) - theta.try_eval(t, x)?).abs());
    }
    Ok(ApproximationError { sup_err_sigma: es, sup_err_theta: et })
}
