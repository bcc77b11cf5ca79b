//! Coefficient fields, the SDE pair they form, and the regularity constants
//! that gate scheme admissibility.
//!
//! Every experiment addresses coefficients through the built-in registry
//! (plus tabulated fields), so exact Lipschitz / semi-convexity constants are
//! available for most families and the grid estimators double as
//! cross-checks.

use crate::error::{Error, Result};
use crate::quad::gauss_legendre;
use serde::{Deserialize, Serialize};

/// Uniform spatial grid used by constant estimation and the kernel engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl SpatialGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::InvalidGrid(format!("bad range [{lo}, {hi}]")));
        }
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 nodes, got {n}")));
        }
        Ok(Self { lo, hi, n })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.lo + self.dx() * i as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|i| self.node(i))
    }

    /// Default estimation grid: [-20, 20] with dx = 1e-3.
    pub fn default_estimation() -> Self {
        Self { lo: -20.0, hi: 20.0, n: 40_001 }
    }
}

/// Finite set of evaluation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    /// k+1 equally spaced times on [0, T]; k = 64 is the estimation default.
    pub fn uniform(horizon: f64, k: usize) -> Self {
        let times = (0..=k).map(|j| horizon * j as f64 / k as f64).collect();
        Self { times }
    }
}

/// Piecewise-constant-in-time affine coefficient lambda(t) + mu(t) x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePieces {
    /// Ascending interior breakpoints; piece i covers [break_{i-1}, break_i).
    pub breaks: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
}

impl AffinePieces {
    fn piece(&self, t: f64) -> usize {
        self.breaks.iter().take_while(|&&b| t >= b).count()
    }
}

/// Built-in coefficient family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Family {
    /// f(t,x) = c
    Constant { value: f64 },
    /// f(t,x) = lambda(t) + mu(t) x, lambda and mu piecewise constant in t
    Affine(AffinePieces),
    /// f(t,x) = theta x
    Proportional { theta: f64 },
    /// f(t,x) = theta sqrt(1 + x^2)
    ScaledHyperbola { theta: f64 },
    /// f(t,x) = 2 - min(|x|, 1)
    Tent,
    /// f(t,x) = theta (eps^2 + x^2)^{p/2}, p in (0, 1]
    SmoothedCev { theta: f64, eps: f64, p: f64 },
    /// Grid values with linear interpolation, edge-slope extrapolation
    Tabulated { lo: f64, hi: f64, values: Vec<f64> },
}

/// A time-dependent spatial coefficient with recorded regularity constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    pub family: Family,
    /// When false, per-step time integrals fall back to 16-node quadrature.
    pub has_closed_time_integrals: bool,
}

impl CoefficientField {
    pub fn new(family: Family) -> Self {
        Self { family, has_closed_time_integrals: true }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(Family::Constant { value })
    }

    pub fn proportional(theta: f64) -> Self {
        Self::new(Family::Proportional { theta })
    }

    pub fn scaled_hyperbola(theta: f64) -> Self {
        Self::new(Family::ScaledHyperbola { theta })
    }

    pub fn tent() -> Self {
        Self::new(Family::Tent)
    }

    pub fn affine(lambda: f64, mu: f64) -> Self {
        Self::new(Family::Affine(AffinePieces {
            breaks: vec![],
            lambda: vec![lambda],
            mu: vec![mu],
        }))
    }

    pub fn smoothed_cev(theta: f64, eps: f64, p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothed-CEV exponent must lie in (0, 1], got {p}"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("smoothed-CEV needs eps > 0".into()));
        }
        Ok(Self::new(Family::SmoothedCev { theta, eps, p }))
    }

    pub fn tabulated(lo: f64, hi: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 || lo >= hi || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidGrid("tabulated field needs >= 2 values on a proper range".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tabulated field has non-finite values".into()));
        }
        Ok(Self::new(Family::Tabulated { lo, hi, values }))
    }

    /// Samples a closure onto a uniform grid; the workhorse behind tabulated
    /// registry entries and smoothed coefficient exports.
    pub fn tabulated_from_fn<F: Fn(f64) -> f64>(lo: f64, hi: f64, n: usize, f: F) -> Result<Self> {
        let grid = SpatialGrid::new(lo, hi, n)?;
        Self::tabulated(lo, hi, grid.nodes().map(f).collect())
    }

    /// Builds a registry field from its config identifier and parameters.
    pub fn from_config(id: &str, params: &[f64]) -> Result<Self> {
        let wrong = |want: &str| {
            Error::Config(format!("family '{id}' expects {want}, got {} parameter(s)", params.len()))
        };
        match id {
            "constant" => match params {
                [v] => Ok(Self::constant(*v)),
                _ => Err(wrong("[value]")),
            },
            "affine" => match params {
                [l, m] => Ok(Self::affine(*l, *m)),
                _ => {
                    // [k, breaks (k-1), lambdas (k), mus (k)]
                    if params.is_empty() {
                        return Err(wrong("[lambda, mu] or [k, breaks.., lambdas.., mus..]"));
                    }
                    let k = params[0] as usize;
                    if k < 1 || params.len() != 1 + (k - 1) + 2 * k {
                        return Err(wrong("[k, breaks.., lambdas.., mus..]"));
                    }
                    let breaks = params[1..k].to_vec();
                    if breaks.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::Config("affine breakpoints must be ascending".into()));
                    }
                    let lambda = params[k..2 * k].to_vec();
                    let mu = params[2 * k..3 * k].to_vec();
                    Ok(Self::new(Family::Affine(AffinePieces { breaks, lambda, mu })))
                }
            },
            "proportional" => match params {
                [t] => Ok(Self::proportional(*t)),
                _ => Err(wrong("[theta]")),
            },
            "scaled_hyperbola" => match params {
                [t] => Ok(Self::scaled_hyperbola(*t)),
                _ => Err(wrong("[theta]")),
            },
            "tent" => {
                if params.is_empty() {
                    Ok(Self::tent())
                } else {
                    Err(wrong("no parameters"))
                }
            }
            "smoothed_cev" => match params {
                [t, e, p] => Self::smoothed_cev(*t, *e, *p),
                _ => Err(wrong("[theta, eps, p]")),
            },
            "tabulated" => {
                if params.len() < 4 {
                    return Err(wrong("[lo, hi, values..]"));
                }
                Self::tabulated(params[0], params[1], params[2..].to_vec())
            }
            other => Err(Error::Config(format!("unknown coefficient family '{other}'"))),
        }
    }

    /// Evaluates f(t, x).
    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match &self.family {
            Family::Constant { value } => *value,
            Family::Affine(p) => {
                let i = p.piece(t);
                p.lambda[i] + p.mu[i] * x
            }
            Family::Proportional { theta } => theta * x,
            Family::ScaledHyperbola { theta } => theta * (1.0 + x * x).sqrt(),
            Family::Tent => 2.0 - x.abs().min(1.0),
            Family::SmoothedCev { theta, eps, p } => theta * (eps * eps + x * x).powf(0.5 * p),
            Family::Tabulated { lo, hi, values } => {
                let n = values.len();
                let dx = (hi - lo) / (n - 1) as f64;
                if x <= *lo {
                    return values[0] + (values[1] - values[0]) / dx * (x - lo);
                }
                if x >= *hi {
                    return values[n - 1] + (values[n - 1] - values[n - 2]) / dx * (x - hi);
                }
                let pos = (x - lo) / dx;
                let i = (pos as usize).min(n - 2);
                let frac = pos - i as f64;
                values[i] + (values[i + 1] - values[i]) * frac
            }
        }
    }

    /// Checked evaluation, failing on non-finite results.
    pub fn try_eval(&self, t: f64, x: f64) -> Result<f64> {
        let v = self.eval(t, x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::EvaluationFailure { t, x })
        }
    }

    /// True when the field does not depend on t.
    pub fn is_time_constant(&self) -> bool {
        match &self.family {
            Family::Affine(p) => p.breaks.is_empty(),
            _ => true,
        }
    }

    /// Exact Lipschitz constant in x, uniform in t, where the family knows it.
    pub fn exact_lipschitz(&self) -> Option<f64> {
        match &self.family {
            Family::Constant { .. } => Some(0.0),
            Family::Affine(p) => Some(p.mu.iter().fold(0.0_f64, |a, &m| a.max(m.abs()))),
            Family::Proportional { theta } => Some(theta.abs()),
            Family::ScaledHyperbola { theta } => Some(theta.abs()),
            Family::Tent => Some(1.0),
            Family::SmoothedCev { theta, eps, p } => {
                if (*p - 1.0).abs() < 1e-15 {
                    Some(theta.abs())
                } else {
                    // |sigma'| peaks at x^2 = eps^2 / (1 - p).
                    let u = eps * eps / (1.0 - p);
                    Some(theta.abs() * p * u.sqrt() * (eps * eps + u).powf(0.5 * p - 1.0))
                }
            }
            Family::Tabulated { lo, hi, values } => {
                let dx = (hi - lo) / (values.len() - 1) as f64;
                Some(
                    values
                        .windows(2)
                        .map(|w| ((w[1] - w[0]) / dx).abs())
                        .fold(0.0_f64, f64::max),
                )
            }
        }
    }

    /// sup_t |f(t, 0)|.
    pub fn sup_at_zero(&self) -> f64 {
        match &self.family {
            Family::Constant { value } => value.abs(),
            Family::Affine(p) => p.lambda.iter().fold(0.0_f64, |a, &l| a.max(l.abs())),
            Family::Proportional { .. } => 0.0,
            Family::ScaledHyperbola { theta } => theta.abs(),
            Family::Tent => 2.0,
            Family::SmoothedCev { theta, eps, p } => theta.abs() * eps.powf(*p),
            Family::Tabulated { .. } => self.eval(0.0, 0.0).abs(),
        }
    }

    /// Least a with sigma^2 + a x^2 convex, where known in closed form.
    /// `Some(inf)` marks families whose square has a concave kink.
    pub fn exact_a_sigma(&self) -> Option<f64> {
        match &self.family {
            Family::Constant { .. }
            | Family::Affine(_)
            | Family::Proportional { .. }
            | Family::ScaledHyperbola { .. } => Some(0.0),
            Family::Tent => Some(f64::INFINITY),
            Family::SmoothedCev { theta, eps, p } => {
                if *p >= 0.5 {
                    Some(0.0)
                } else {
                    // (sigma^2)'' = 2 th^2 p (e^2+u)^{p-2} (e^2 + u(2p-1)),
                    // minimized over u = x^2 at u = 3 e^2 / (1 - 2p).
                    let e2 = eps * eps;
                    let u = 3.0 * e2 / (1.0 - 2.0 * p);
                    let dd = 2.0 * theta * theta * p * (e2 + u).powf(p - 2.0) * (e2 + u * (2.0 * p - 1.0));
                    Some((-dd / 2.0).max(0.0))
                }
            }
            Family::Tabulated { lo, hi, values } => {
                // Piecewise linear sigma: sigma^2 is convex on every piece;
                // a genuine concave kink (sigma * slope-jump < 0) sends a to
                // infinity. Slope jumps below 1e-6 are treated as sampling
                // noise of a smooth function.
                let dx = (hi - lo) / (values.len() - 1) as f64;
                let concave_kink = values.windows(3).any(|w| {
                    let jump = (w[2] - w[1]) / dx - (w[1] - w[0]) / dx;
                    w[1] * jump < -1e-6 * (1.0 + w[1].abs())
                });
                if concave_kink {
                    Some(f64::INFINITY)
                } else {
                    None
                }
            }
        }
    }

    /// Least c with b + c x non-decreasing, where known in closed form.
    pub fn exact_c_b(&self) -> Option<f64> {
        match &self.family {
            Family::Constant { .. } => Some(0.0),
            Family::Affine(p) => Some(p.mu.iter().fold(0.0_f64, |a, &m| a.max(-m))),
            Family::Proportional { theta } => Some((-theta).max(0.0)),
            Family::ScaledHyperbola { theta } => Some(theta.abs()),
            Family::Tent => Some(1.0),
            // The slope is odd in x, so its infimum is -Lip for either sign
            // of theta.
            Family::SmoothedCev { .. } => self.exact_lipschitz(),
            Family::Tabulated { lo, hi, values } => {
                let dx = (hi - lo) / (values.len() - 1) as f64;
                Some(
                    values
                        .windows(2)
                        .map(|w| -((w[1] - w[0]) / dx))
                        .fold(0.0_f64, f64::max),
                )
            }
        }
    }

    /// Convexity of x -> f(t, x) for every t, where the family knows it.
    pub fn is_convex_in_space(&self) -> bool {
        match &self.family {
            Family::Constant { .. } | Family::Affine(_) | Family::Proportional { .. } => true,
            Family::ScaledHyperbola { theta } => *theta >= 0.0,
            Family::Tent => false,
            // (eps^2+x^2)^{p/2} loses convexity for p < 1.
            Family::SmoothedCev { theta, p, .. } => *theta >= 0.0 && (*p - 1.0).abs() < 1e-15,
            Family::Tabulated { lo, hi, values } => {
                let dx = (hi - lo) / (values.len() - 1) as f64;
                values.windows(3).all(|w| {
                    ((w[2] - w[1]) - (w[1] - w[0])) / dx >= -1e-9
                })
            }
        }
    }

    /// Spatial kink locations (slope discontinuities), used to split
    /// convolution integrals into smooth panels. Tabulated fields report
    /// their largest genuine jumps only.
    pub fn kink_locations(&self) -> Vec<f64> {
        match &self.family {
            Family::Tent => vec![-1.0, 0.0, 1.0],
            Family::Tabulated { lo, hi, values } => {
                let dx = (hi - lo) / (values.len() - 1) as f64;
                let mut kinks: Vec<(f64, f64)> = values
                    .windows(3)
                    .enumerate()
                    .filter_map(|(i, w)| {
                        let jump = ((w[2] - w[1]) - (w[1] - w[0])) / dx;
                        if jump.abs() > 1e-3 {
                            Some((lo + dx * (i + 1) as f64, jump.abs()))
                        } else {
                            None
                        }
                    })
                    .collect();
                kinks.sort_by(|a, b| b.1.total_cmp(&a.1));
                kinks.truncate(16);
                let mut xs: Vec<f64> = kinks.into_iter().map(|(x, _)| x).collect();
                xs.sort_by(f64::total_cmp);
                xs
            }
            _ => vec![],
        }
    }

    /// Mean of f(s, x) over [t0, t1]; exact for registry families unless the
    /// closed-form flag was cleared, in which case 16-node quadrature is used.
    pub fn step_mean(&self, t0: f64, t1: f64, x: f64) -> f64 {
        if self.has_closed_time_integrals {
            match &self.family {
                Family::Affine(p) if !p.breaks.is_empty() => {
                    self.piecewise_mean(t0, t1, |i| p.lambda[i] + p.mu[i] * x, p)
                }
                _ => self.eval(t0, x),
            }
        } else {
            self.quadrature_mean(t0, t1, |s| self.eval(s, x))
        }
    }

    /// Mean of f^2(s, x) over [t0, t1], same conventions as `step_mean`.
    pub fn step_mean_sq(&self, t0: f64, t1: f64, x: f64) -> f64 {
        if self.has_closed_time_integrals {
            match &self.family {
                Family::Affine(p) if !p.breaks.is_empty() => self.piecewise_mean(
                    t0,
                    t1,
                    |i| {
                        let v = p.lambda[i] + p.mu[i] * x;
                        v * v
                    },
                    p,
                ),
                _ => {
                    let v = self.eval(t0, x);
                    v * v
                }
            }
        } else {
            self.quadrature_mean(t0, t1, |s| {
                let v = self.eval(s, x);
                v * v
            })
        }
    }

    fn piecewise_mean<G: Fn(usize) -> f64>(&self, t0: f64, t1: f64, value: G, p: &AffinePieces) -> f64 {
        let mut acc = 0.0;
        let mut left = t0;
        loop {
            let i = p.piece(left);
            let right = p.breaks.get(i).copied().unwrap_or(f64::INFINITY).min(t1);
            acc += value(i) * (right - left);
            if right >= t1 {
                break;
            }
            left = right;
        }
        acc / (t1 - t0)
    }

    fn quadrature_mean<G: Fn(f64) -> f64>(&self, t0: f64, t1: f64, f: G) -> f64 {
        let rule = gauss_legendre(16);
        let half = 0.5 * (t1 - t0);
        let mid = 0.5 * (t0 + t1);
        rule.iter().map(|&(z, w)| w * f(mid + half * z)).sum::<f64>() * 0.5
    }
}

/// Initial law of a scheme, sampled through its quantile map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialLaw {
    Dirac { x0: f64 },
    /// P(lo) = p, P(hi) = 1 - p.
    TwoPoint { p: f64, lo: f64, hi: f64 },
    /// Equal-weight atoms; quantile is the sorted empirical one.
    SampleTable { values: Vec<f64> },
}

impl InitialLaw {
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            InitialLaw::Dirac { x0 } => *x0,
            InitialLaw::TwoPoint { p, lo, hi } => {
                if u < *p {
                    *lo
                } else {
                    *hi
                }
            }
            InitialLaw::SampleTable { values } => {
                let idx = ((u * values.len() as f64) as usize).min(values.len() - 1);
                values[idx]
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            InitialLaw::Dirac { x0 } => *x0,
            InitialLaw::TwoPoint { p, lo, hi } => p * lo + (1.0 - p) * hi,
            InitialLaw::SampleTable { values } => values.iter().sum::<f64>() / values.len() as f64,
        }
    }

    /// Sorted sample tables keep their quantile map monotone.
    pub fn normalized(mut self) -> Self {
        if let InitialLaw::SampleTable { values } = &mut self {
            values.sort_by(|a, b| a.total_cmp(b));
        }
        self
    }
}

/// Catalog check for X0 <=_cvx Y0 (mean-preserving spreads and equality).
pub fn initial_cvx_ordered(x: &InitialLaw, y: &InitialLaw) -> bool {
    if x == y {
        return true;
    }
    match (x, y) {
        (InitialLaw::Dirac { x0 }, InitialLaw::TwoPoint { .. }) => (y.mean() - x0).abs() <= 1e-12 * (1.0 + x0.abs()),
        _ => false,
    }
}

/// Catalog check for X0 <=_icv Y0 (adds shifted Diracs and mean dominance).
pub fn initial_icv_ordered(x: &InitialLaw, y: &InitialLaw) -> bool {
    if initial_cvx_ordered(x, y) {
        return true;
    }
    match (x, y) {
        (InitialLaw::Dirac { x0 }, InitialLaw::Dirac { x0: y0 }) => x0 <= y0,
        (InitialLaw::Dirac { x0 }, InitialLaw::TwoPoint { .. }) => *x0 <= y.mean() + 1e-12,
        _ => false,
    }
}

/// A drift/diffusion pair with horizon and initial law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub drift: CoefficientField,
    pub diffusion: CoefficientField,
    pub horizon: f64,
    pub initial: InitialLaw,
}

impl SdeSpec {
    pub fn new(drift: CoefficientField, diffusion: CoefficientField, horizon: f64, initial: InitialLaw) -> Self {
        Self { drift, diffusion, horizon, initial: initial.normalized() }
    }
}

/// Regularity constants of an SDE spec plus derived admissibility bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub lip: f64,
    pub sup_at_zero: f64,
    pub a_sigma: f64,
    pub c_b: f64,
    pub c_sigma: f64,
    pub m_min: f64,
    pub h_bar: f64,
    pub grid: SpatialGrid,
    /// Grid cross-checks recorded next to the exact registry constants.
    pub grid_lip: f64,
    pub grid_a_sigma: f64,
    pub grid_c_b: f64,
}

impl ConstantsReport {
    pub fn estimate(spec: &SdeSpec, grid: &SpatialGrid, times: &TimeGrid) -> Result<Self> {
        let lip = estimate_lipschitz(&spec.diffusion, grid, times)?;
        let a_sigma = match spec.diffusion.exact_a_sigma() {
            Some(a) => a,
            None => estimate_a_sigma(&spec.diffusion, grid, times)?,
        };
        let c_b = estimate_c_b(&spec.drift, grid, times)?;
        let c_sigma = a_sigma + lip * lip;
        let h_bar = h_bar(c_sigma, c_b);
        let m_min = m_min(c_sigma, c_b, spec.horizon);
        Ok(Self {
            lip,
            sup_at_zero: spec.diffusion.sup_at_zero(),
            a_sigma,
            c_b,
            c_sigma,
            m_min,
            h_bar,
            grid: *grid,
            grid_lip: grid_lipschitz(&spec.diffusion, grid, times)?,
            grid_a_sigma: estimate_a_sigma(&spec.diffusion, grid, times)?,
            grid_c_b: grid_c_b(&spec.drift, grid, times)?,
        })
    }

    pub fn with_default_grid(spec: &SdeSpec) -> Result<Self> {
        Self::estimate(
            spec,
            &SpatialGrid::default_estimation(),
            &TimeGrid::uniform(spec.horizon, 64),
        )
    }
}

/// Scheme admissibility bounds derived from a constants report.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SchemeBounds {
    pub m_min: f64,
    pub h_bar: f64,
    pub s_default: f64,
}

/// Largest admissible step (c_b = 0 uses the limit of the pre-square ratio,
/// 1/(2 sqrt(c_sigma)), so h_bar degenerates to 1/(4 c_sigma); 1/0 = inf).
pub fn h_bar(c_sigma: f64, c_b: f64) -> f64 {
    if c_b == 0.0 {
        if c_sigma == 0.0 {
            f64::INFINITY
        } else {
            1.0 / (4.0 * c_sigma)
        }
    } else {
        let r = ((c_sigma + 2.0 * c_b).sqrt() - c_sigma.sqrt()) / (2.0 * c_b);
        r * r
    }
}

/// Minimal step count over horizon T; the c_b = 0 limit is 4 c_sigma T.
pub fn m_min(c_sigma: f64, c_b: f64, horizon: f64) -> f64 {
    if c_b == 0.0 {
        4.0 * c_sigma * horizon
    } else {
        let r = 2.0 * c_b / ((c_sigma + 2.0 * c_b).sqrt() - c_sigma.sqrt());
        r * r * horizon
    }
}

/// Default truncation threshold sqrt(m) / (2 Lip(sigma) sqrt(T)).
pub fn s_default(m: usize, lip_sigma: f64, horizon: f64) -> f64 {
    if lip_sigma == 0.0 {
        f64::INFINITY
    } else {
        (m as f64).sqrt() / (2.0 * lip_sigma * horizon.sqrt())
    }
}

/// Bundles the three admissibility bounds for a scheme with m steps.
pub fn derive_scheme_bounds(constants: &ConstantsReport, horizon: f64, m: usize) -> Result<SchemeBounds> {
    if m < 1 {
        return Err(Error::InvalidArgument("step count m must be >= 1".into()));
    }
    Ok(SchemeBounds {
        m_min: m_min(constants.c_sigma, constants.c_b, horizon),
        h_bar: h_bar(constants.c_sigma, constants.c_b),
        s_default: s_default(m, constants.lip, horizon),
    })
}

/// Max difference quotient of f(t, .) over adjacent grid pairs and all times.
pub fn grid_lipschitz(field: &CoefficientField, grid: &SpatialGrid, times: &TimeGrid) -> Result<f64> {
    if times.times.is_empty() {
        return Err(Error::InvalidArgument("time grid is empty".into()));
    }
    let dx = grid.dx();
    let mut best = 0.0_f64;
    for &t in &times.times {
        let mut prev = field.try_eval(t, grid.node(0))?;
        for i in 1..grid.n {
            let cur = field.try_eval(t, grid.node(i))?;
            best = best.max(((cur - prev) / dx).abs());
            prev = cur;
        }
    }
    Ok(best)
}

/// Lipschitz constant: exact registry value when available (the grid value is
/// then a cross-check), otherwise the grid estimate.
pub fn estimate_lipschitz(field: &CoefficientField, grid: &SpatialGrid, times: &TimeGrid) -> Result<f64> {
    match field.exact_lipschitz() {
        Some(exact) => Ok(exact),
        None => grid_lipschitz(field, grid, times),
    }
}

/// Grid semi-convexity defect of sigma^2: max(0, -min second difference)/2,
/// the least a making sigma^2 + a x^2 discretely convex. Families with a
/// known finite minimum of (sigma^2)'' report the exact value instead.
pub fn estimate_a_sigma(field: &CoefficientField, grid: &SpatialGrid, times: &TimeGrid) -> Result<f64> {
    if grid.n < 3 {
        return Err(Error::InvalidGrid("second differences need >= 3 nodes".into()));
    }
    if let Some(exact) = field.exact_a_sigma() {
        if exact.is_finite() {
            return Ok(exact);
        }
    }
    let dx = grid.dx();
    let mut min_dd = f64::INFINITY;
    for &t in &times.times {
        let mut w0 = field.try_eval(t, grid.node(0))?.powi(2);
        let mut w1 = field.try_eval(t, grid.node(1))?.powi(2);
        for i in 2..grid.n {
            let w2 = field.try_eval(t, grid.node(i))?.powi(2);
            min_dd = min_dd.min((w2 - 2.0 * w1 + w0) / (dx * dx));
            w0 = w1;
            w1 = w2;
        }
    }
    Ok((-min_dd).max(0.0) / 2.0)
}

/// Grid drift-monotonicity defect: max(0, -min difference quotient).
pub fn grid_c_b(field: &CoefficientField, grid: &SpatialGrid, times: &TimeGrid) -> Result<f64> {
    if times.times.is_empty() {
        return Err(Error::InvalidArgument("time grid is empty".into()));
    }
    let dx = grid.dx();
    let mut min_slope = f64::INFINITY;
    for &t in &times.times {
        let mut prev = field.try_eval(t, grid.node(0))?;
        for i in 1..grid.n {
            let cur = field.try_eval(t, grid.node(i))?;
            min_slope = min_slope.min((cur - prev) / dx);
            prev = cur;
        }
    }
    Ok((-min_slope).max(0.0))
}

/// Least c making b(t, .) + c x non-decreasing; exact for registry families.
pub fn estimate_c_b(field: &CoefficientField, grid: &SpatialGrid, times: &TimeGrid) -> Result<f64> {
    match field.exact_c_b() {
        Some(exact) => Ok(exact),
        None => grid_c_b(field, grid, times),
    }
}
