//! Deterministic verification engine.
//!
//! Grid functions are pushed through the one-step transition of the
//! truncated Euler schemes by integrating the piecewise-linear interpolant
//! against the truncated normal law in closed form (normal CDF differences
//! per grid cell, with the atom at zero kept explicit). The one-step
//! operator therefore maps a convex piecewise-linear function to exact
//! samples of a convex function, so backward induction preserves discrete
//! convexity down to f64 rounding; a node-sampled quadrature is kept as a
//! diagnostic cross-check.

use crate::analytic::{normal_cdf_and_pdf, normal_pdf, truncation_atom_mass};
use crate::coefficients::{SdeSpec, SpatialGrid};
use crate::error::{Error, Result};
use crate::euler::{effective_diffusion, effective_drift, SchemeConfig};
use crate::quad::gauss_legendre;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Law of the truncated draw Z^s: Gauss-Legendre nodes against the normal
/// density on [-span, span] (mirrored half-rule, so symmetry is exact in
/// floating point) plus the atom at zero carrying P(|G| > s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussianMeasure {
    pub s: f64,
    /// (z_j, w_j), ascending, symmetric.
    pub nodes: Vec<(f64, f64)>,
    pub atom_mass: f64,
}

/// Node span is capped at 8 standard deviations: the remaining band mass is
/// below 1e-15 and would only waste nodes.
const NODE_SPAN_CAP: f64 = 8.0;

/// Builds the measure with the given (even) node count.
pub fn build_measure(s: f64, n_nodes: usize) -> Result<TruncatedGaussianMeasure> {
    if s < 0.0 {
        return Err(Error::InvalidArgument(format!("threshold s must be >= 0, got {s}")));
    }
    if n_nodes < 2 || !n_nodes.is_multiple_of(2) {
        return Err(Error::InvalidArgument("node count must be even and >= 2".into()));
    }
    let atom_mass = truncation_atom_mass(s);
    if s == 0.0 {
        return Ok(TruncatedGaussianMeasure { s, nodes: vec![], atom_mass: 1.0 });
    }
    let span = s.min(NODE_SPAN_CAP);
    let half = gauss_legendre(n_nodes / 2);
    let mut nodes = Vec::with_capacity(n_nodes);
    // Map [-1, 1] onto [0, span]; weights pick up the half-width Jacobian
    // and the normal density.
    let scale = 0.5 * span;
    let mut positive: Vec<(f64, f64)> = half
        .iter()
        .map(|&(u, w)| {
            let z = scale * (u + 1.0);
            (z, w * scale * normal_pdf(z))
        })
        .collect();
    positive.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &(z, w) in positive.iter().rev() {
        nodes.push((-z, w));
    }
    nodes.extend(positive);
    Ok(TruncatedGaussianMeasure { s, nodes, atom_mass })
}

impl TruncatedGaussianMeasure {
    pub fn total_mass(&self) -> f64 {
        self.nodes.iter().map(|&(_, w)| w).sum::<f64>() + self.atom_mass
    }

    pub fn mean(&self) -> f64 {
        self.nodes.iter().map(|&(z, w)| w * z).sum()
    }

    pub fn abs_moment(&self) -> f64 {
        self.nodes.iter().map(|&(z, w)| w * z.abs()).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.nodes.iter().map(|&(z, w)| w * z * z).sum()
    }
}

/// Values of a real function on a uniform grid, extended piecewise-linearly
/// with end slopes clamped to the declared Lipschitz bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
    /// Declared Lipschitz bound for tail clamping.
    pub lip: f64,
}

impl GridFunction {
    pub fn from_values(grid: SpatialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n {
            return Err(Error::DimensionMismatch(format!(
                "{} values on a {}-node grid",
                values.len(),
                grid.n
            )));
        }
        let dx = grid.dx();
        let lip = values
            .windows(2)
            .map(|w| ((w[1] - w[0]) / dx).abs())
            .fold(0.0_f64, f64::max);
        Ok(Self { grid, values, lip })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: SpatialGrid, f: F) -> Self {
        let values = grid.nodes().map(f).collect();
        Self::from_values(grid, values).expect("lengths match by construction")
    }

    /// Overrides the declared Lipschitz bound used for tail clamping.
    pub fn with_lipschitz(mut self, lip: f64) -> Self {
        self.lip = lip;
        self
    }

    pub fn view(&self) -> PlView<'_> {
        PlView { lo: self.grid.lo, dx: self.grid.dx(), values: &self.values, lip: self.lip }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.view().eval(x)
    }

    /// CSV export (x, value).
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "x,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{v}", self.grid.node(i))?;
        }
        Ok(())
    }
}

/// Borrowed piecewise-linear view of grid values; the integration core
/// works on views so tensor rows need no copies.
#[derive(Debug, Clone, Copy)]
pub struct PlView<'a> {
    pub lo: f64,
    pub dx: f64,
    pub values: &'a [f64],
    pub lip: f64,
}

impl PlView<'_> {
    #[inline]
    fn n(&self) -> usize {
        self.values.len()
    }

    #[inline]
    fn hi(&self) -> f64 {
        self.lo + self.dx * (self.n() - 1) as f64
    }

    #[inline]
    fn left_slope(&self) -> f64 {
        ((self.values[1] - self.values[0]) / self.dx).clamp(-self.lip, self.lip)
    }

    #[inline]
    fn right_slope(&self) -> f64 {
        let n = self.n();
        ((self.values[n - 1] - self.values[n - 2]) / self.dx).clamp(-self.lip, self.lip)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.n();
        if x <= self.lo {
            return self.values[0] + self.left_slope() * (x - self.lo);
        }
        let hi = self.hi();
        if x >= hi {
            return self.values[n - 1] + self.right_slope() * (x - hi);
        }
        let pos = (x - self.lo) / self.dx;
        let i = (pos as usize).min(n - 2);
        let frac = pos - i as f64;
        self.values[i] + (self.values[i + 1] - self.values[i]) * frac
    }

    /// Affine parameters (value v_ref at y_ref, slope) of the piece with
    /// index `piece` in -1 (left tail) ..= n-1 (right tail).
    #[inline]
    fn piece_affine(&self, piece: isize) -> (f64, f64, f64) {
        let n = self.n() as isize;
        if piece < 0 {
            (self.values[0], self.lo, self.left_slope())
        } else if piece >= n - 1 {
            let hi = self.hi();
            (self.values[self.n() - 1], hi, self.right_slope())
        } else {
            let i = piece as usize;
            let slope = (self.values[i + 1] - self.values[i]) / self.dx;
            (self.values[i], self.lo + self.dx * i as f64, slope)
        }
    }
}

/// One-step operator value: x + sqrt(h) sigma z + h beta, with the step's
/// effective coefficient values at x.
#[inline]
pub fn one_step_map(x: f64, z: f64, beta_at_x: f64, sigma_at_x: f64, h: f64) -> f64 {
    x + h.sqrt() * sigma_at_x * z + h * beta_at_x
}

/// Exact expectation E[I(c + b Z^s)] of a piecewise-linear view against the
/// truncated normal law, by closed-form cell integrals. Returns the value
/// and whether any mass fell beyond the grid (served by the linear tails).
pub fn expect_truncated(view: &PlView<'_>, c: f64, b: f64, s: f64, atom_mass: f64) -> (f64, bool) {
    let b = b.abs();
    let atom_val = view.eval(c);
    if b == 0.0 || s == 0.0 {
        return (atom_val, c < view.lo || c > view.hi());
    }
    // Beyond |z| = 39 the normal CDF saturates bitwise (Phi(39) == 1.0,
    // phi(39) == 0.0), so clipping the sweep there changes nothing in f64
    // and keeps s = inf windows finite.
    let s = s.min(39.0);
    let (y_lo, y_hi) = (c - b * s, c + b * s);
    let hi = view.hi();
    let extrapolated = y_lo < view.lo || y_hi > hi;

    // Piece index containing the sweep start.
    let mut piece: isize = if y_lo < view.lo {
        -1
    } else if y_lo >= hi {
        view.n() as isize - 1
    } else {
        (((y_lo - view.lo) / view.dx) as isize).min(view.n() as isize - 2)
    };
    // First interior grid node strictly above y_lo.
    let mut node = piece + 1;

    let (mut cdf_prev, mut pdf_prev) = {
        let (cdf, pdf) = normal_cdf_and_pdf(-s);
        (cdf, pdf)
    };
    let mut acc = atom_mass * atom_val;
    let n = view.n() as isize;
    let (end_cdf, end_pdf) = normal_cdf_and_pdf(s);
    loop {
        // Right end of the current segment: next grid node or the window end.
        let node_y = view.lo + view.dx * node as f64;
        let (cdf2, pdf2, last) = if node >= 0 && node < n && node_y < y_hi {
            let z = (node_y - c) / b;
            let (cdf, pdf) = normal_cdf_and_pdf(z);
            (cdf, pdf, false)
        } else {
            (end_cdf, end_pdf, true)
        };
        let (v_ref, y_ref, slope) = view.piece_affine(piece);
        let a = v_ref + slope * (c - y_ref);
        let bb = slope * b;
        acc += a * (cdf2 - cdf_prev) + bb * (pdf_prev - pdf2);
        if last {
            break;
        }
        cdf_prev = cdf2;
        pdf_prev = pdf2;
        piece = node;
        node += 1;
    }
    (acc, extrapolated)
}

/// Node-sampled counterpart: p0 f(E(x,0)) + sum_j w_j f(E(x,z_j)) with f
/// evaluated by grid interpolation. Diagnostic route; agrees with
/// `expect_truncated` up to quadrature error on smooth views.
pub fn expect_nodes(view: &PlView<'_>, c: f64, b: f64, measure: &TruncatedGaussianMeasure) -> f64 {
    let mut acc = measure.atom_mass * view.eval(c);
    for &(z, w) in &measure.nodes {
        acc += w * view.eval(c + b * z);
    }
    acc
}

/// Result of a kernel application with its diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelRun {
    pub f: GridFunction,
    /// Output nodes whose displacement window left the grid at least once.
    pub extrapolation_hits: usize,
}

/// One transition step applied to a grid function: beta and sigma are the
/// step's effective coefficient functions (time-integrated or point-frozen,
/// matching the scheme variant).
pub fn kernel_step<B, S>(
    f: &GridFunction,
    beta: B,
    sigma: S,
    h: f64,
    measure: &TruncatedGaussianMeasure,
) -> KernelRun
where
    B: Fn(f64) -> f64 + Sync,
    S: Fn(f64) -> f64 + Sync,
{
    let view = f.view();
    let grid = f.grid;
    let out: Vec<(f64, bool)> = (0..grid.n)
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            let c = x + h * beta(x);
            let b = h.sqrt() * sigma(x);
            expect_truncated(&view, c, b, measure.s, measure.atom_mass)
        })
        .collect();
    let extrapolation_hits = out.iter().filter(|&&(_, e)| e).count();
    let values = out.into_iter().map(|(v, _)| v).collect();
    KernelRun { f: GridFunction::from_values(grid, values).unwrap(), extrapolation_hits }
}

/// m-fold backward composition returning x -> E f(X^{m,x}_T) on the grid.
pub fn backward_induct_terminal(
    f: &GridFunction,
    spec: &SdeSpec,
    config: &SchemeConfig,
    measure: &TruncatedGaussianMeasure,
) -> Result<KernelRun> {
    if config.m < 1 {
        return Err(Error::InvalidArgument("need m >= 1".into()));
    }
    let h = config.step_size();
    let mut current = f.clone();
    let mut hits = 0;
    for k in (0..config.m).rev() {
        let run = kernel_step(
            &current,
            |x| effective_drift(spec, config, k, x),
            |x| effective_diffusion(spec, config, k, x).0,
            h,
            measure,
        );
        current = run.f;
        hits += run.extrapolation_hits;
    }
    Ok(KernelRun { f: current, extrapolation_hits: hits })
}

/// Function of several realized marginals plus the current state, carried
/// on a tensor grid; the last axis is the state.
#[derive(Debug, Clone)]
pub struct TensorGridFunction {
    pub axes: Vec<SpatialGrid>,
    pub values: Vec<f64>,
    /// Lipschitz bound along the state axis (tail clamping).
    pub lip: f64,
}

impl TensorGridFunction {
    fn state_len(&self) -> usize {
        self.axes.last().unwrap().n
    }

    fn lead_len(&self) -> usize {
        self.values.len() / self.state_len()
    }

    /// One transition step along the state axis. The closed-form segment
    /// decomposition depends only on the output node, so it is built once
    /// per node and applied to every carried row.
    fn step<B, S>(&self, beta: B, sigma: S, h: f64, measure: &TruncatedGaussianMeasure) -> (Self, usize)
    where
        B: Fn(f64) -> f64 + Sync,
        S: Fn(f64) -> f64 + Sync,
    {
        let state = *self.axes.last().unwrap();
        let ns = self.state_len();
        let nl = self.lead_len();
        let mut values = vec![0.0; self.values.len()];
        let columns: Vec<(usize, Vec<f64>, bool)> = (0..ns)
            .into_par_iter()
            .map(|ix| {
                let x = state.node(ix);
                let c = x + h * beta(x);
                let b = h.sqrt() * sigma(x);
                let mut col = Vec::with_capacity(nl);
                let mut hit = false;
                for lead in 0..nl {
                    let row = &self.values[lead * ns..(lead + 1) * ns];
                    let view = PlView { lo: state.lo, dx: state.dx(), values: row, lip: self.lip };
                    let (v, e) = expect_truncated(&view, c, b, measure.s, measure.atom_mass);
                    hit |= e;
                    col.push(v);
                }
                (ix, col, hit)
            })
            .collect();
        let mut hits = 0;
        for (ix, col, hit) in columns {
            if hit {
                hits += 1;
            }
            for (lead, v) in col.into_iter().enumerate() {
                values[lead * ns + ix] = v;
            }
        }
        let dx = state.dx();
        let lip = values
            .chunks(ns)
            .flat_map(|row| row.windows(2).map(move |w| ((w[1] - w[0]) / dx).abs()))
            .fold(0.0_f64, f64::max);
        (Self { axes: self.axes.clone(), values, lip }, hits)
    }

    /// Merges the innermost carried axis into the state axis (the marginal
    /// realized at the current time is the state): new(u.., x) = old(u.., x, x).
    fn collapse_last_marginal(&self) -> Self {
        let naxes = self.axes.len();
        assert!(naxes >= 2, "collapse needs a carried axis");
        let state = *self.axes.last().unwrap();
        let u_axis = self.axes[naxes - 2];
        let ns = state.n;
        let nu = u_axis.n;
        let lead = self.values.len() / (ns * nu);
        let mut values = vec![0.0; lead * ns];
        let same_grid = u_axis == state;
        for l in 0..lead {
            for ix in 0..ns {
                let x = state.node(ix);
                let v = if same_grid {
                    self.values[(l * nu + ix) * ns + ix]
                } else {
                    // Interpolate along the u axis at u = x.
                    let pos = ((x - u_axis.lo) / u_axis.dx()).clamp(0.0, (nu - 1) as f64);
                    let iu = (pos as usize).min(nu - 2);
                    let frac = pos - iu as f64;
                    let a = self.values[(l * nu + iu) * ns + ix];
                    let b = self.values[(l * nu + iu + 1) * ns + ix];
                    a + (b - a) * frac
                };
                values[l * ns + ix] = v;
            }
        }
        let mut axes = self.axes.clone();
        axes.remove(naxes - 2);
        let dx = state.dx();
        let lip = values
            .chunks(ns)
            .flat_map(|row| row.windows(2).map(move |w| ((w[1] - w[0]) / dx).abs()))
            .fold(0.0_f64, f64::max);
        Self { axes, values, lip }
    }
}

/// Multi-marginal backward induction: x -> E f(X^{m,x}_{t_{k_1}}, ..,
/// X^{m,x}_{t_{k_d}}) with d <= 3, carrying realized marginals on tensor
/// grids. `carried_axes` hold the d-1 leading axes (same grid as the state
/// makes the marginal collapse exact).
pub fn multi_marginal_induct<F>(
    f: F,
    marginal_steps: &[usize],
    carried_axes: &[SpatialGrid],
    state_grid: &SpatialGrid,
    spec: &SdeSpec,
    config: &SchemeConfig,
    measure: &TruncatedGaussianMeasure,
) -> Result<KernelRun>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = marginal_steps.len();
    if d == 0 || d > 3 {
        return Err(Error::UnsupportedDimension(d));
    }
    if carried_axes.len() != d - 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} carried axes for {} marginals",
            carried_axes.len(),
            d
        )));
    }
    if marginal_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("marginal step indices must be increasing".into()));
    }
    let k_last = *marginal_steps.last().unwrap();
    if k_last > config.m {
        return Err(Error::InvalidArgument(format!(
            "marginal index {k_last} beyond m={}",
            config.m
        )));
    }
    let h = config.step_size();

    // Initialize at k = k_d with the last marginal carried by the state.
    let mut axes: Vec<SpatialGrid> = carried_axes.to_vec();
    axes.push(*state_grid);
    let ns = state_grid.n;
    let lead: usize = carried_axes.iter().map(|g| g.n).product();
    let mut values = vec![0.0; lead * ns];
    let mut arg = vec![0.0; d];
    for l in 0..lead {
        // Decode the leading multi-index.
        let mut rem = l;
        for (j, g) in carried_axes.iter().enumerate().rev() {
            arg[j] = g.node(rem % g.n);
            rem /= g.n;
        }
        for ix in 0..ns {
            arg[d - 1] = state_grid.node(ix);
            values[l * ns + ix] = f(&arg);
        }
    }
    let dx = state_grid.dx();
    let lip = values
        .chunks(ns)
        .flat_map(|row| row.windows(2).map(move |w| ((w[1] - w[0]) / dx).abs()))
        .fold(0.0_f64, f64::max);
    let mut tensor = TensorGridFunction { axes, values, lip };
    let mut hits = 0;
    let mut next_marginal = d - 1; // index into marginal_steps of the next collapse

    for k in (0..k_last).rev() {
        let (stepped, h_hits) = tensor.step(
            |x| effective_drift(spec, config, k, x),
            |x| effective_diffusion(spec, config, k, x).0,
            h,
            measure,
        );
        tensor = stepped;
        hits += h_hits;
        if next_marginal >= 1 && k == marginal_steps[next_marginal - 1] {
            tensor = tensor.collapse_last_marginal();
            next_marginal -= 1;
        }
    }
    debug_assert_eq!(tensor.axes.len(), 1);
    let grid = tensor.axes[0];
    Ok(KernelRun {
        f: GridFunction::from_values(grid, tensor.values)?,
        extrapolation_hits: hits,
    })
}

/// Minimal undivided second/first differences of a grid function with
/// their locations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DefectReport {
    pub min_second_difference: f64,
    pub argmin_second: f64,
    pub min_first_difference: f64,
    pub argmin_first: f64,
}

pub fn grid_convexity_defect(g: &GridFunction) -> Result<DefectReport> {
    if g.grid.n < 3 {
        return Err(Error::InvalidGrid("defects need >= 3 nodes".into()));
    }
    let v = &g.values;
    let mut report = DefectReport {
        min_second_difference: f64::INFINITY,
        argmin_second: f64::NAN,
        min_first_difference: f64::INFINITY,
        argmin_first: f64::NAN,
    };
    for i in 1..g.grid.n - 1 {
        let d2 = v[i + 1] - 2.0 * v[i] + v[i - 1];
        if d2 < report.min_second_difference {
            report.min_second_difference = d2;
            report.argmin_second = g.grid.node(i);
        }
    }
    for i in 0..g.grid.n - 1 {
        let d1 = v[i + 1] - v[i];
        if d1 < report.min_first_difference {
            report.min_first_difference = d1;
            report.argmin_first = g.grid.node(i);
        }
    }
    Ok(report)
}

/// Grid points violating the coefficient domination hypotheses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisViolations {
    pub drift_violations: Vec<f64>,
    pub diffusion_violations: Vec<f64>,
}

impl HypothesisViolations {
    pub fn is_empty(&self) -> bool {
        self.drift_violations.is_empty() && self.diffusion_violations.is_empty()
    }
}

/// Checks b <= beta and 0 <= sigma <= theta on the grid at the scheme's
/// step times (left endpoints).
pub fn validate_domination(
    spec_x: &SdeSpec,
    spec_y: &SdeSpec,
    config: &SchemeConfig,
    grid: &SpatialGrid,
) -> HypothesisViolations {
    let h = config.step_size();
    let tol = 1e-12;
    let mut out = HypothesisViolations { drift_violations: vec![], diffusion_violations: vec![] };
    for x in grid.nodes() {
        for k in 0..config.m {
            let t = h * k as f64;
            let b = spec_x.drift.eval(t, x);
            let beta = spec_y.drift.eval(t, x);
            if b > beta + tol {
                out.drift_violations.push(x);
                break;
            }
        }
    }
    for x in grid.nodes() {
        for k in 0..config.m {
            let t = h * k as f64;
            let sig = spec_x.diffusion.eval(t, x);
            let theta = spec_y.diffusion.eval(t, x);
            if sig < -tol || sig > theta + tol {
                out.diffusion_violations.push(x);
                break;
            }
        }
    }
    out
}

/// Pointwise gap (P^{(beta,theta)} f - P^{(b,sigma)} f)(x_i) after full
/// backward induction of a non-decreasing convex terminal payoff under both
/// kernels. Fails fast when the domination hypotheses are violated.
pub fn kernel_ordering_gap(
    f: &GridFunction,
    spec_x: &SdeSpec,
    spec_y: &SdeSpec,
    config: &SchemeConfig,
    measure: &TruncatedGaussianMeasure,
) -> Result<KernelRun> {
    let violations = validate_domination(spec_x, spec_y, config, &f.grid);
    if !violations.is_empty() {
        return Err(Error::HypothesisViolation(format!(
            "domination fails at {} drift and {} diffusion grid points (first drift at {:?}, first diffusion at {:?})",
            violations.drift_violations.len(),
            violations.diffusion_violations.len(),
            violations.drift_violations.first(),
            violations.diffusion_violations.first(),
        )));
    }
    let lower = backward_induct_terminal(f, spec_x, config, measure)?;
    let upper = backward_induct_terminal(f, spec_y, config, measure)?;
    let gap: Vec<f64> = upper
        .f
        .values
        .iter()
        .zip(&lower.f.values)
        .map(|(u, l)| u - l)
        .collect();
    Ok(KernelRun {
        f: GridFunction::from_values(f.grid, gap)?,
        extrapolation_hits: lower.extrapolation_hits + upper.extrapolation_hits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{truncated_abs_moment, truncated_second_moment};
    use crate::coefficients::CoefficientField;
    use crate::coefficients::InitialLaw;
    use crate::euler::Variant;

    fn grid(lo: f64, hi: f64, n: usize) -> SpatialGrid {
        SpatialGrid::new(lo, hi, n).unwrap()
    }

    fn bm_spec(sigma: f64) -> SdeSpec {
        SdeSpec::new(
            CoefficientField::constant(0.0),
            CoefficientField::constant(sigma),
            1.0,
            InitialLaw::Dirac { x0: 0.0 },
        )
    }

    #[test]
    fn measure_moments() {
        // s = 0: single atom.
        let m0 = build_measure(0.0, 64).unwrap();
        assert_eq!(m0.atom_mass, 1.0);
        assert_eq!(m0.abs_moment(), 0.0);
        // s = 5: analytic moments to 1e-10 at 64+ nodes.
        let m = build_measure(5.0, 128).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 1e-12, "mass {}", m.total_mass());
        assert!(m.mean().abs() < 1e-12);
        assert!((m.abs_moment() - truncated_abs_moment(5.0)).abs() < 1e-10);
        assert!((m.second_moment() - truncated_second_moment(5.0)).abs() < 1e-10);
        assert!(m.nodes.iter().all(|&(_, w)| w >= 0.0));
        assert!(m.nodes.iter().all(|&(z, _)| z.abs() <= 5.0));
        // Large s recovers the untruncated second moment.
        let big = build_measure(30.0, 128).unwrap();
        assert!((big.second_moment() - 1.0).abs() < 1e-8);
        assert!((big.total_mass() - 1.0).abs() < 1e-12);
        // Odd node counts are rejected.
        assert!(build_measure(5.0, 63).is_err());
        assert!(build_measure(-1.0, 64).is_err());
    }

    #[test]
    fn one_step_map_examples() {
        assert!((one_step_map(0.0, 2.0, 0.0, 1.0, 0.25) - 1.0).abs() < 1e-15);
        // z = 0 leaves the drift branch only.
        assert!((one_step_map(1.3, 0.0, -1.3, 1.0, 0.1) - (1.3 - 0.13)).abs() < 1e-15);
        // beta = -x, sigma = 1, h = 0.1, x = 1, z = -1.
        let v = one_step_map(1.0, -1.0, -1.0, 1.0, 0.1);
        assert!((v - (1.0 - 0.1f64.sqrt() - 0.1)).abs() < 1e-15);
        assert!((v - 0.583_77).abs() < 1e-5);
    }

    #[test]
    fn kernel_step_martingale_and_constant() {
        let g = grid(-3.0, 3.0, 601);
        let measure = build_measure(4.0, 128).unwrap();
        let ident = GridFunction::from_fn(g, |x| x);
        let run = kernel_step(&ident, |_| 0.0, |_| 1.0, 0.05, &measure);
        for (i, v) in run.f.values.iter().enumerate() {
            assert!((v - g.node(i)).abs() < 1e-10, "node {i}: {v}");
        }
        let constf = GridFunction::from_fn(g, |_| 2.5);
        let run = kernel_step(&constf, |_| 0.0, |x| x.abs(), 0.05, &measure);
        for v in &run.f.values {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_step_square_adds_h_second_moment() {
        // Fine grid so the piecewise-linear bias (dx^2/6) sits below 1e-8.
        let g = grid(-2.0, 2.0, 20_001);
        let s = 5.0;
        let h = 4e-4;
        let measure = build_measure(s, 128).unwrap();
        let square = GridFunction::from_fn(g, |x| x * x);
        let run = kernel_step(&square, |_| 0.0, |_| 1.0, h, &measure);
        let expect_add = h * truncated_second_moment(s);
        for i in (g.n / 4)..(3 * g.n / 4) {
            let x = g.node(i);
            let got = run.f.values[i];
            assert!(
                (got - (x * x + expect_add)).abs() < 1e-8,
                "x={x}: {got} vs {}",
                x * x + expect_add
            );
        }
    }

    #[test]
    fn node_route_agrees_on_smooth_functions() {
        let g = grid(-3.0, 3.0, 2001);
        let f = GridFunction::from_fn(g, |x| (0.3 * x).exp());
        let measure = build_measure(3.0, 128).unwrap();
        let view = f.view();
        for &x in &[-1.0, 0.0, 0.7] {
            let exact = expect_truncated(&view, x, 0.2, measure.s, measure.atom_mass).0;
            let nodes = expect_nodes(&view, x, 0.2, &measure);
            assert!((exact - nodes).abs() < 1e-7, "x={x}: {exact} vs {nodes}");
        }
    }

    #[test]
    fn backward_induction_identity_and_variance() {
        let spec = bm_spec(1.0);
        let m = 4;
        let config = SchemeConfig::new(m, Variant::PointFrozen, 3.0, 0.01);
        let measure = build_measure(3.0, 128).unwrap();
        let g = grid(-3.0, 3.0, 30_001);
        let ident = GridFunction::from_fn(g, |x| x);
        let run = backward_induct_terminal(&ident, &spec, &config, &measure).unwrap();
        for i in (g.n / 4)..(3 * g.n / 4) {
            assert!((run.f.values[i] - g.node(i)).abs() < m as f64 * 1e-10);
        }
        // f = x^2: telescoping variance T E[(Z^s)^2] within 1e-7.
        let square = GridFunction::from_fn(g, |x| x * x);
        let run = backward_induct_terminal(&square, &spec, &config, &measure).unwrap();
        let expect_add = 0.01 * truncated_second_moment(3.0);
        for i in (2 * g.n / 5)..(3 * g.n / 5) {
            let x = g.node(i);
            assert!(
                (run.f.values[i] - (x * x + expect_add)).abs() < 1e-7,
                "x={x}"
            );
        }
    }

    #[test]
    fn convexity_defect_examples() {
        let g = grid(-2.0, 2.0, 101);
        let dx = g.dx();
        let square = GridFunction::from_fn(g, |x| x * x);
        let report = grid_convexity_defect(&square).unwrap();
        assert!((report.min_second_difference - 2.0 * dx * dx).abs() < 1e-12);
        // Kinks contribute positively; the floor is node-rounding noise.
        let absf = GridFunction::from_fn(g, |x| x.abs());
        assert!(grid_convexity_defect(&absf).unwrap().min_second_difference >= -1e-13);
        let neg = GridFunction::from_fn(g, |x| -x * x);
        let rep = grid_convexity_defect(&neg).unwrap();
        assert!(rep.min_second_difference < 0.0);
        assert!((rep.min_second_difference + 2.0 * dx * dx).abs() < 1e-12);
    }

    #[test]
    fn propagation_preserves_discrete_convexity_to_rounding() {
        // Call payoff through several steps of a non-constant volatility:
        // second differences stay above -1e-10 (f64 noise only).
        let spec = SdeSpec::new(
            CoefficientField::constant(0.0),
            CoefficientField::scaled_hyperbola(0.3),
            1.0,
            InitialLaw::Dirac { x0: 0.0 },
        );
        let m = 16;
        let s = crate::coefficients::s_default(m, 0.3, 1.0);
        let config = SchemeConfig::new(m, Variant::PointFrozen, s, 1.0);
        let measure = build_measure(s, 128).unwrap();
        let g = grid(-6.0, 6.0, 1201);
        let call = GridFunction::from_fn(g, |x| (x - 1.0).max(0.0));
        let run = backward_induct_terminal(&call, &spec, &config, &measure).unwrap();
        let report = grid_convexity_defect(&run.f).unwrap();
        assert!(
            report.min_second_difference >= -1e-10,
            "second diff {}",
            report.min_second_difference
        );
        assert!(
            report.min_first_difference >= -1e-10,
            "first diff {}",
            report.min_first_difference
        );
    }

    #[test]
    fn ordering_gap_examples() {
        // Far-left of this grid the gap is ~1e-30; much further out the true
        // values drop below f64 range and round to an exact zero gap.
        let g = grid(-2.5, 4.0, 651);
        let m = 8;
        // Constant volatilities have Lip = 0, so s_default = infinity and
        // every node reaches the strike.
        let config = SchemeConfig::new(m, Variant::PointFrozen, f64::INFINITY, 1.0);
        let measure = build_measure(f64::INFINITY, 128).unwrap();
        let call = GridFunction::from_fn(g, |x| (x - 1.0).max(0.0));
        // Identical specs: gap is zero to rounding.
        let spec = bm_spec(0.2);
        let run = kernel_ordering_gap(&call, &spec, &spec, &config, &measure).unwrap();
        assert!(run.f.values.iter().all(|v| v.abs() < 1e-12));
        // Strict volatility dominance: positive gap everywhere that f64 can
        // resolve it (deep in the money the true gap is ~1e-30 and drowns in
        // the ~1e-14 rounding of the values themselves).
        let run = kernel_ordering_gap(&call, &bm_spec(0.2), &bm_spec(0.3), &config, &measure).unwrap();
        assert!(run.f.values.iter().all(|&v| v > -1e-11));
        for (i, &v) in run.f.values.iter().enumerate() {
            if g.node(i) <= 2.0 {
                assert!(v > 0.0, "gap at x={} is {v}", g.node(i));
            }
        }
        assert!(run.f.values.iter().cloned().fold(0.0_f64, f64::max) > 1e-3);
        // Sanity against the normal-law closed form: the terminal law from
        // Dirac(x) is N(x, sigma^2 T), so the values match Bachelier prices.
        // The piecewise-linear representation biases values upward by
        // ~dx^2 * curvature per step; 2e-4 covers it at this resolution.
        let upper = backward_induct_terminal(&call, &bm_spec(0.3), &config, &measure).unwrap();
        let mid = g.n / 2;
        let bach = crate::analytic::bachelier_call(g.node(mid), 1.0, 0.3);
        assert!((upper.f.values[mid] - bach).abs() < 2e-4, "{} vs {bach}", upper.f.values[mid]);
        // Violated domination is reported.
        assert!(kernel_ordering_gap(&call, &bm_spec(0.3), &bm_spec(0.2), &config, &measure).is_err());
    }

    #[test]
    fn multi_marginal_sum_and_product() {
        let spec = bm_spec(1.0);
        let t = 0.02;
        let m = 2;
        let config = SchemeConfig::new(m, Variant::PointFrozen, 4.0, t);
        let h = t / m as f64;
        let measure = build_measure(4.0, 128).unwrap();
        let state = grid(-3.0, 3.0, 12_001);
        let coarse = grid(-3.0, 3.0, 61);
        // f(u, v) = u + v with b = 0: E = 2x up to rounding.
        let run = multi_marginal_induct(
            |a: &[f64]| a[0] + a[1],
            &[1, 2],
            &[coarse],
            &state,
            &spec,
            &config,
            &measure,
        )
        .unwrap();
        for i in (state.n / 4)..(3 * state.n / 4) {
            assert!((run.f.values[i] - 2.0 * state.node(i)).abs() < 1e-9);
        }
        // f(u, v) = u v: x^2 + t_{k1} E[(Z^s)^2] within 1e-6.
        let run = multi_marginal_induct(
            |a: &[f64]| a[0] * a[1],
            &[1, 2],
            &[coarse],
            &state,
            &spec,
            &config,
            &measure,
        )
        .unwrap();
        let expect_add = h * truncated_second_moment(4.0);
        for i in (2 * state.n / 5)..(3 * state.n / 5) {
            let x = state.node(i);
            assert!(
                (run.f.values[i] - (x * x + expect_add)).abs() < 1e-6,
                "x={x}: {} vs {}",
                run.f.values[i],
                x * x + expect_add
            );
        }
    }

    #[test]
    fn multi_marginal_abs_diff_tent_counterexample_shape() {
        // One step from the first marginal: g(x) = sqrt(h) sigma(x) E|Z^s|;
        // the tent makes it fail midpoint convexity at 0.
        let spec = SdeSpec::new(
            CoefficientField::constant(0.0),
            CoefficientField::tent(),
            0.01,
            InitialLaw::Dirac { x0: 0.0 },
        );
        let config = SchemeConfig::new(1, Variant::PointFrozen, 5.0, 0.01);
        let measure = build_measure(5.0, 128).unwrap();
        let state = grid(-2.0, 2.0, 801);
        let run = multi_marginal_induct(
            |a: &[f64]| (a[0] - a[1]).abs(),
            &[0, 1],
            &[state],
            &state,
            &spec,
            &config,
            &measure,
        )
        .unwrap();
        let g0 = run.f.eval(0.0);
        let g1 = run.f.eval(1.0);
        let gm1 = run.f.eval(-1.0);
        let violation = g0 - 0.5 * (g1 + gm1);
        let closed = 0.1 * truncated_abs_moment(5.0) * (2.0 - 0.5 * (1.0 + 1.0));
        assert!(
            (violation - closed).abs() < 1e-9,
            "violation {violation} vs closed form {closed}"
        );
        assert!(violation > 0.07);
    }

    #[test]
    fn dimension_guard() {
        let spec = bm_spec(1.0);
        let config = SchemeConfig::new(8, Variant::PointFrozen, 4.0, 1.0);
        let measure = build_measure(4.0, 64).unwrap();
        let g = grid(-1.0, 1.0, 11);
        let err = multi_marginal_induct(
            |a: &[f64]| a.iter().sum(),
            &[1, 2, 3, 4],
            &[g, g, g],
            &g,
            &spec,
            &config,
            &measure,
        );
        assert!(matches!(err, Err(Error::UnsupportedDimension(4))));
    }

    #[test]
    fn affine_drift_propagates_convexity_without_monotonicity() {
        // Affine drift: convex payoffs that are not monotone (put payoff,
        // square) keep nonnegative second differences through the induction.
        let spec = SdeSpec::new(
            CoefficientField::affine(0.05, -0.3),
            CoefficientField::scaled_hyperbola(0.25),
            1.0,
            InitialLaw::Dirac { x0: 0.0 },
        );
        let m = 32;
        let s = crate::coefficients::s_default(m, 0.25, 1.0);
        let config = SchemeConfig::new(m, Variant::PointFrozen, s, 1.0);
        let measure = build_measure(s, 128).unwrap();
        let g = grid(-5.0, 5.0, 1001);
        for payoff in [|x: f64| (1.0 - x).max(0.0), |x: f64| x * x] {
            let f = GridFunction::from_fn(g, payoff);
            let run = backward_induct_terminal(&f, &spec, &config, &measure).unwrap();
            let defect = grid_convexity_defect(&run.f).unwrap();
            assert!(
                defect.min_second_difference >= -1e-10,
                "d2 {}",
                defect.min_second_difference
            );
        }
    }

    #[test]
    fn tensor_propagation_with_nontrivial_coefficients() {
        // Prop-style 2-marginal propagation: non-decreasing directionally
        // convex input, convex (kinked) drift, semi-convex diffusion,
        // h <= h_bar and s = 1/(2 Lip sqrt(h)).
        let drift = CoefficientField::tabulated_from_fn(-8.0, 8.0, 1601, |x| -x.min(0.0)).unwrap();
        let spec = SdeSpec::new(drift, CoefficientField::scaled_hyperbola(0.3), 1.0, InitialLaw::Dirac { x0: 0.0 });
        let constants = crate::coefficients::ConstantsReport::with_default_grid(&spec).unwrap();
        let m = (constants.m_min.ceil() as usize).max(8);
        let h = 1.0 / m as f64;
        assert!(h <= constants.h_bar, "h {h} vs h_bar {}", constants.h_bar);
        let s = 1.0 / (2.0 * constants.lip * h.sqrt());
        let config = SchemeConfig::new(m, Variant::PointFrozen, s, 1.0);
        let measure = build_measure(s, 128).unwrap();
        let state = grid(-4.0, 4.0, 801);
        let coarse = grid(-4.0, 4.0, 81);
        let run = multi_marginal_induct(
            |a: &[f64]| (0.5 * (a[0] + a[1]) - 0.5).max(0.0),
            &[m / 2, m],
            &[coarse],
            &state,
            &spec,
            &config,
            &measure,
        )
        .unwrap();
        let defect = grid_convexity_defect(&run.f).unwrap();
        assert!(defect.min_second_difference >= -1e-8, "d2 {}", defect.min_second_difference);
        assert!(defect.min_first_difference >= -1e-8, "d1 {}", defect.min_first_difference);
    }

    #[test]
    fn oracle_agrees_with_monte_carlo_on_gbm_call() {
        // Backward induction and the path engine price the same scheme.
        let spec = crate::euler::gbm_spec(1.0, 0.2, 1.0);
        let m = 64;
        let s = crate::coefficients::s_default(m, 0.2, 1.0);
        let config = SchemeConfig::new(m, Variant::PointFrozen, s, 1.0);
        let measure = build_measure(s, 128).unwrap();
        let g = grid(-0.6, 2.6, 1601);
        let call = GridFunction::from_fn(g, |x| (x - 1.0).max(0.0));
        let run = backward_induct_terminal(&call, &spec, &config, &measure).unwrap();
        let oracle_at_1 = run.f.eval(1.0);
        let n = 200_000;
        let paths = crate::euler::simulate_batch(&spec, &config, &crate::euler::NoisePanel::new(n, m, 99)).unwrap();
        let payoffs: Vec<f64> = paths.terminal().iter().map(|&x| (x - 1.0).max(0.0)).collect();
        let mean = payoffs.iter().sum::<f64>() / n as f64;
        let var = payoffs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (oracle_at_1 - mean).abs() < 3.0 * se,
            "oracle {oracle_at_1} vs MC {mean} (se {se})"
        );
    }

    #[test]
    fn grid_function_round_trip_and_tails() {
        let g = grid(-1.0, 1.0, 5);
        let f = GridFunction::from_values(g, vec![1.0, 0.5, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(f.eval(-1.0), 1.0);
        assert_eq!(f.eval(0.0), 0.0);
        assert!((f.eval(0.25) - 0.25).abs() < 1e-15);
        // Tails extend with the clamped edge slope (|slope| = 1 here).
        assert!((f.eval(2.0) - 2.0).abs() < 1e-15);
        let clamped = f.clone().with_lipschitz(0.5);
        assert!((clamped.eval(2.0) - (1.0 + 0.5)).abs() < 1e-15);
        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        assert_eq!(csv.iter().filter(|&&b| b == b'\n').count(), 6);
    }
}
