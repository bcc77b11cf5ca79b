//! Registry of test functions and path functionals with declared convexity
//! classes, plus randomized verifiers of those declarations.
//!
//! Declarations are certified only up to sampling; known violations of
//! declared-false flags carry explicit witnesses that the tests replay
//! deterministically.

use crate::error::{Error, Result};
use crate::rng;
use serde::{Deserialize, Serialize};

/// Scalar shapes used by composite functionals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Identity,
    Square,
    Exp,
    Call { k: f64 },
}

impl Shape {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Shape::Identity => x,
            Shape::Square => x * x,
            Shape::Exp => x.exp(),
            Shape::Call { k } => (x - k).max(0.0),
        }
    }

    /// Non-decreasing on the whole line.
    pub fn is_nondecreasing(&self) -> bool {
        !matches!(self, Shape::Square)
    }

    /// Non-decreasing on the nonnegative half-line (enough for outer shapes
    /// fed a nonnegative integral).
    pub fn is_nondecreasing_on_nonneg(&self) -> bool {
        true
    }

    /// All registry shapes are convex.
    pub fn is_convex(&self) -> bool {
        true
    }

    /// Shape values are nonnegative everywhere.
    pub fn is_nonnegative(&self) -> bool {
        matches!(self, Shape::Exp | Shape::Call { .. } | Shape::Square)
    }

    pub fn from_config(id: &str, param: Option<f64>) -> Result<Self> {
        match (id, param) {
            ("identity", None) => Ok(Shape::Identity),
            ("square", None) => Ok(Shape::Square),
            ("exp", None) => Ok(Shape::Exp),
            ("call", Some(k)) => Ok(Shape::Call { k }),
            _ => Err(Error::Config(format!("unknown shape '{id}'"))),
        }
    }
}

/// Payoff of a terminal (1-marginal) functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalPayoff {
    Call { k: f64 },
    PutPayoff { k: f64 },
    Identity,
    Square,
    Constant { c: f64 },
}

impl TerminalPayoff {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TerminalPayoff::Call { k } => (x - k).max(0.0),
            TerminalPayoff::PutPayoff { k } => (k - x).max(0.0),
            TerminalPayoff::Identity => x,
            TerminalPayoff::Square => x * x,
            TerminalPayoff::Constant { c } => *c,
        }
    }
}

/// Payoff over a fixed tuple of marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalPayoff {
    /// |u - v| on two marginals: convex but not directionally convex.
    AbsDiff,
    /// a u^2 + 2 c u v + b v^2 on two marginals.
    Quadratic { a: f64, b: f64, c: f64 },
    /// u * v on two marginals: directionally convex, not convex.
    Product,
    /// Call on the average of the marginals.
    AvgCall { k: f64 },
    /// psi(sum_i w_i phi(u_i)): a discretized running-integral composite.
    Composite { psi: Shape, phi: Shape, weights: Vec<f64> },
}

impl MarginalPayoff {
    pub fn eval(&self, u: &[f64]) -> f64 {
        match self {
            MarginalPayoff::AbsDiff => (u[0] - u[1]).abs(),
            MarginalPayoff::Quadratic { a, b, c } => {
                a * u[0] * u[0] + 2.0 * c * u[0] * u[1] + b * u[1] * u[1]
            }
            MarginalPayoff::Product => u[0] * u[1],
            MarginalPayoff::AvgCall { k } => (u.iter().sum::<f64>() / u.len() as f64 - k).max(0.0),
            MarginalPayoff::Composite { psi, phi, weights } => {
                let acc: f64 = u.iter().zip(weights).map(|(&x, &w)| w * phi.eval(x)).sum();
                psi.eval(acc)
            }
        }
    }
}

/// Functionals of the whole interpolated path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathPayoff {
    /// Sup norm of the interpolated path (= max_k |x_k|).
    SupNorm,
    /// psi(integral of phi along the path), trapezoid discretization.
    IntegralComposite { psi: Shape, phi: Shape },
    /// Call on the time average of the grid values.
    AvgCall { k: f64 },
}

impl PathPayoff {
    pub fn eval(&self, path: &[f64], horizon: f64) -> f64 {
        match self {
            PathPayoff::SupNorm => path.iter().fold(0.0_f64, |a, &v| a.max(v.abs())),
            PathPayoff::IntegralComposite { psi, phi } => {
                let m = path.len() - 1;
                let h = horizon / m as f64;
                let mut acc = 0.0;
                for w in path.windows(2) {
                    acc += 0.5 * h * (phi.eval(w[0]) + phi.eval(w[1]));
                }
                psi.eval(acc)
            }
            PathPayoff::AvgCall { k } => (path.iter().sum::<f64>() / path.len() as f64 - k).max(0.0),
        }
    }
}

/// What the functional consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Terminal { f: TerminalPayoff },
    MultiMarginal { f: MarginalPayoff, times: Vec<f64> },
    Path { f: PathPayoff },
}

/// A test functional with its declared analytic properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunctional {
    pub id: String,
    pub kind: Kind,
    pub is_convex: bool,
    pub is_dir_convex: bool,
    pub is_nondecreasing: bool,
    /// Lipschitz constant with respect to the sup norm on arguments.
    pub lipschitz: Option<f64>,
    /// Polynomial growth order; capped at 4 for the exponential composite.
    pub growth_order: f64,
}

impl TestFunctional {
    pub fn terminal(id: &str, f: TerminalPayoff) -> Self {
        let (cvx, dir, mono, lip, p) = match f {
            TerminalPayoff::Call { .. } => (true, true, true, Some(1.0), 1.0),
            TerminalPayoff::PutPayoff { .. } => (true, true, false, Some(1.0), 1.0),
            TerminalPayoff::Identity => (true, true, true, Some(1.0), 1.0),
            TerminalPayoff::Square => (true, true, false, None, 2.0),
            TerminalPayoff::Constant { .. } => (true, true, true, Some(0.0), 0.0),
        };
        Self {
            id: id.into(),
            kind: Kind::Terminal { f },
            is_convex: cvx,
            is_dir_convex: dir,
            is_nondecreasing: mono,
            lipschitz: lip,
            growth_order: p,
        }
    }

    pub fn multi_marginal(id: &str, f: MarginalPayoff, times: Vec<f64>) -> Self {
        let (cvx, dir, mono, lip, p) = match &f {
            MarginalPayoff::AbsDiff => (true, false, false, Some(2.0), 1.0),
            MarginalPayoff::Quadratic { a, b, c } => {
                (c.abs() <= (a * b).sqrt(), *c >= 0.0, false, None, 2.0)
            }
            MarginalPayoff::Product => (false, true, false, None, 2.0),
            MarginalPayoff::AvgCall { .. } => (true, true, true, Some(1.0), 1.0),
            MarginalPayoff::Composite { psi, phi, weights } => {
                let ok = phi.is_convex()
                    && psi.is_convex()
                    && phi.is_nondecreasing()
                    && phi.is_nonnegative()
                    && psi.is_nondecreasing_on_nonneg()
                    && weights.iter().all(|&w| w >= 0.0);
                (ok, ok, ok, None, 4.0)
            }
        };
        Self {
            id: id.into(),
            kind: Kind::MultiMarginal { f, times },
            is_convex: cvx,
            is_dir_convex: dir,
            is_nondecreasing: mono,
            lipschitz: lip,
            growth_order: p,
        }
    }

    pub fn path(id: &str, f: PathPayoff) -> Self {
        let (cvx, dir, mono, lip, p) = match &f {
            PathPayoff::SupNorm => (true, false, false, Some(1.0), 1.0),
            PathPayoff::IntegralComposite { psi, phi } => {
                let ok = phi.is_convex()
                    && psi.is_convex()
                    && phi.is_nondecreasing()
                    && phi.is_nonnegative()
                    && psi.is_nondecreasing_on_nonneg();
                (ok, ok, ok, None, 4.0)
            }
            PathPayoff::AvgCall { .. } => (true, true, true, Some(1.0), 1.0),
        };
        Self {
            id: id.into(),
            kind: Kind::Path { f },
            is_convex: cvx,
            is_dir_convex: dir,
            is_nondecreasing: mono,
            lipschitz: lip,
            growth_order: p,
        }
    }

    /// Builds a registry functional from its config id, parameters and
    /// (when multi-marginal) marginal times.
    pub fn from_config(id: &str, params: &[f64], times: &[f64]) -> Result<Self> {
        match id {
            "call" => match params {
                [k] => Ok(Self::terminal("call", TerminalPayoff::Call { k: *k })),
                _ => Err(Error::Config("call expects [strike]".into())),
            },
            "put_payoff" => match params {
                [k] => Ok(Self::terminal("put_payoff", TerminalPayoff::PutPayoff { k: *k })),
                _ => Err(Error::Config("put_payoff expects [strike]".into())),
            },
            "identity" => Ok(Self::terminal("identity", TerminalPayoff::Identity)),
            "square" => Ok(Self::terminal("square", TerminalPayoff::Square)),
            "constant" => match params {
                [c] => Ok(Self::terminal("constant", TerminalPayoff::Constant { c: *c })),
                _ => Err(Error::Config("constant expects [value]".into())),
            },
            "abs_diff" => {
                if times.len() != 2 {
                    return Err(Error::Config("abs_diff needs exactly 2 marginal times".into()));
                }
                Ok(Self::multi_marginal("abs_diff", MarginalPayoff::AbsDiff, times.to_vec()))
            }
            "quadratic" => match params {
                [a, b, c] if times.len() == 2 => Ok(Self::multi_marginal(
                    "quadratic",
                    MarginalPayoff::Quadratic { a: *a, b: *b, c: *c },
                    times.to_vec(),
                )),
                _ => Err(Error::Config("quadratic expects [a, b, c] and 2 marginal times".into())),
            },
            "product" => {
                if times.len() != 2 {
                    return Err(Error::Config("product needs exactly 2 marginal times".into()));
                }
                Ok(Self::multi_marginal("product", MarginalPayoff::Product, times.to_vec()))
            }
            "avg_call" => match params {
                [k] if !times.is_empty() => Ok(Self::multi_marginal(
                    "avg_call",
                    MarginalPayoff::AvgCall { k: *k },
                    times.to_vec(),
                )),
                [k] => Ok(Self::path("avg_call", PathPayoff::AvgCall { k: *k })),
                _ => Err(Error::Config("avg_call expects [strike]".into())),
            },
            "sup_norm" => Ok(Self::path("sup_norm", PathPayoff::SupNorm)),
            "integral_composite" => Ok(Self::path(
                "integral_composite",
                PathPayoff::IntegralComposite { psi: Shape::Square, phi: Shape::Exp },
            )),
            other => Err(Error::Config(format!("unknown functional '{other}'"))),
        }
    }

    /// Evaluates the functional on one scheme path (values on the uniform
    /// grid of [0, horizon]); marginal times snap to the nearest grid index.
    pub fn eval_path(&self, path: &[f64], horizon: f64) -> f64 {
        match &self.kind {
            Kind::Terminal { f } => f.eval(*path.last().unwrap()),
            Kind::MultiMarginal { f, times } => {
                let m = path.len() - 1;
                let vals: Vec<f64> = times
                    .iter()
                    .map(|&t| {
                        let k = ((t / horizon * m as f64).round() as usize).min(m);
                        path[k]
                    })
                    .collect();
                f.eval(&vals)
            }
            Kind::Path { f } => f.eval(path, horizon),
        }
    }

    /// Evaluates on an argument vector of the functional's own dimension
    /// (marginal tuple, or path node values for path functionals).
    pub fn eval_vector(&self, u: &[f64]) -> f64 {
        match &self.kind {
            Kind::Terminal { f } => f.eval(u[0]),
            Kind::MultiMarginal { f, .. } => f.eval(u),
            Kind::Path { f } => f.eval(u, 1.0),
        }
    }

    /// Sampling dimension used by the randomized checkers.
    pub fn check_dimension(&self) -> usize {
        match &self.kind {
            Kind::Terminal { .. } => 1,
            Kind::MultiMarginal { f, .. } => match f {
                MarginalPayoff::Composite { weights, .. } => weights.len(),
                _ => 2,
            },
            Kind::Path { .. } => 9,
        }
    }

    /// Known witness violating directional convexity, for declared-false
    /// flags; replayed deterministically by the test suite.
    pub fn dir_convexity_witness(&self) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        match &self.kind {
            Kind::MultiMarginal { f: MarginalPayoff::AbsDiff, .. } => {
                Some((vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 2.5]))
            }
            Kind::MultiMarginal { f: MarginalPayoff::Quadratic { c, .. }, .. } if *c < 0.0 => {
                // With c < 0, the rectangle increment along (e1, e2) is 2c.
                Some((vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]))
            }
            Kind::Path { f: PathPayoff::SupNorm } => {
                // On positive paths the sup norm reduces to a coordinate max,
                // whose rectangle increments go negative.
                let dim = self.check_dimension();
                let mut x = vec![0.0; dim];
                let mut y = vec![0.0; dim];
                let mut z = vec![0.0; dim];
                x[0] = 1.0;
                y[0] = 1.0;
                z[0] = 1.0;
                z[dim - 1] = 2.5;
                Some((x, y, z))
            }
            _ => None,
        }
    }
}

/// Rectangle increment f(x+y+z) - f(x+y) - f(x+z) + f(x).
pub fn rectangle_defect(f: &TestFunctional, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
    let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + q).collect() };
    let xy = add(x, y);
    let xz = add(x, z);
    let xyz = add(&xy, z);
    f.eval_vector(&xyz) - f.eval_vector(&xy) - f.eval_vector(&xz) + f.eval_vector(x)
}

/// Outcome of a randomized verification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub trials: usize,
    pub violations: usize,
    pub worst_defect: f64,
    /// Sampled points achieving the worst defect.
    pub worst_witness: Vec<Vec<f64>>,
}

const DEFECT_TOL: f64 = 1e-10;

fn sample_box(seed: u64, trial: u64, tag: u64, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let u = rng::uniform(seed, rng::STREAM_CHECKER, trial, tag * 64 + i as u64);
            lo + (hi - lo) * u
        })
        .collect()
}

/// Randomized test of the rectangle-increment inequality defining
/// directional convexity: x uniform in the box, y and z uniform in the
/// nonnegative box. Path functionals are exercised through piecewise-linear
/// paths and nonnegative piecewise-linear bumps.
pub fn check_directional_convexity(
    f: &TestFunctional,
    trials: usize,
    lo: f64,
    hi: f64,
    seed: u64,
) -> CheckReport {
    let dim = f.check_dimension();
    let span = hi - lo;
    let mut report =
        CheckReport { trials, violations: 0, worst_defect: f64::INFINITY, worst_witness: vec![] };
    for t in 0..trials {
        let x = sample_box(seed, t as u64, 0, dim, lo, hi);
        let y = sample_box(seed, t as u64, 1, dim, 0.0, span);
        let z = sample_box(seed, t as u64, 2, dim, 0.0, span);
        let defect = rectangle_defect(f, &x, &y, &z);
        if defect < report.worst_defect {
            report.worst_defect = defect;
            report.worst_witness = vec![x.clone(), y.clone(), z.clone()];
        }
        if defect < -DEFECT_TOL {
            report.violations += 1;
        }
    }
    report
}

/// Randomized midpoint-convexity test on random pairs.
pub fn check_convexity(f: &TestFunctional, trials: usize, lo: f64, hi: f64, seed: u64) -> CheckReport {
    let dim = f.check_dimension();
    let mut report =
        CheckReport { trials, violations: 0, worst_defect: f64::INFINITY, worst_witness: vec![] };
    for t in 0..trials {
        let u = sample_box(seed, t as u64, 0, dim, lo, hi);
        let v = sample_box(seed, t as u64, 1, dim, lo, hi);
        let mid: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 0.5 * (a + b)).collect();
        let defect = 0.5 * (f.eval_vector(&u) + f.eval_vector(&v)) - f.eval_vector(&mid);
        if defect < report.worst_defect {
            report.worst_defect = defect;
            report.worst_witness = vec![u.clone(), v.clone()];
        }
        if defect < -DEFECT_TOL {
            report.violations += 1;
        }
    }
    report
}

/// Randomized componentwise-monotonicity test.
pub fn check_nondecreasing(f: &TestFunctional, trials: usize, lo: f64, hi: f64, seed: u64) -> CheckReport {
    let dim = f.check_dimension();
    let span = hi - lo;
    let mut report =
        CheckReport { trials, violations: 0, worst_defect: f64::INFINITY, worst_witness: vec![] };
    for t in 0..trials {
        let x = sample_box(seed, t as u64, 0, dim, lo, hi);
        let bump = sample_box(seed, t as u64, 1, dim, 0.0, span);
        let upper: Vec<f64> = x.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let defect = f.eval_vector(&upper) - f.eval_vector(&x);
        if defect < report.worst_defect {
            report.worst_defect = defect;
            report.worst_witness = vec![x.clone(), upper.clone()];
        }
        if defect < -DEFECT_TOL {
            report.violations += 1;
        }
    }
    report
}

/// Randomized Lipschitz test against the declared constant (sup norm on
/// arguments).
pub fn check_lipschitz(
    f: &TestFunctional,
    constant: f64,
    trials: usize,
    lo: f64,
    hi: f64,
    seed: u64,
) -> CheckReport {
    let dim = f.check_dimension();
    let mut report =
        CheckReport { trials, violations: 0, worst_defect: f64::INFINITY, worst_witness: vec![] };
    for t in 0..trials {
        let u = sample_box(seed, t as u64, 0, dim, lo, hi);
        let v = sample_box(seed, t as u64, 1, dim, lo, hi);
        let dist = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0_f64, f64::max);
        let defect = constant * dist - (f.eval_vector(&u) - f.eval_vector(&v)).abs();
        if defect < report.worst_defect {
            report.worst_defect = defect;
            report.worst_witness = vec![u.clone(), v.clone()];
        }
        if defect < -DEFECT_TOL {
            report.violations += 1;
        }
    }
    report
}

/// Convexity/directional-convexity classification of the quadratic
/// a u^2 + 2 c u v + b v^2 with a, b > 0: convex iff |c| <= sqrt(ab),
/// directionally convex iff c >= 0.
pub fn classify_quadratic(a: f64, b: f64, c: f64) -> (bool, bool) {
    assert!(a > 0.0 && b > 0.0, "quadratic classification needs a, b > 0");
    (c.abs() <= (a * b).sqrt(), c >= 0.0)
}

/// Restriction of a multi-marginal functional to one coordinate, the
/// others frozen; used for the dimension-one consistency check.
pub fn freeze_to_coordinate<'a>(
    f: &'a TestFunctional,
    coord: usize,
    frozen: &[f64],
) -> impl Fn(f64) -> f64 + 'a {
    let frozen = frozen.to_vec();
    move |x: f64| {
        let mut v = frozen.clone();
        v[coord] = x;
        f.eval_vector(&v)
    }
}

/// The built-in suite exercised by the verification tests.
pub fn builtin_suite() -> Vec<TestFunctional> {
    vec![
        TestFunctional::terminal("call", TerminalPayoff::Call { k: 1.0 }),
        TestFunctional::terminal("put_payoff", TerminalPayoff::PutPayoff { k: 1.0 }),
        TestFunctional::terminal("identity", TerminalPayoff::Identity),
        TestFunctional::terminal("square", TerminalPayoff::Square),
        TestFunctional::multi_marginal("abs_diff", MarginalPayoff::AbsDiff, vec![0.5, 1.0]),
        TestFunctional::multi_marginal(
            "quadratic_c1",
            MarginalPayoff::Quadratic { a: 1.0, b: 1.0, c: 1.0 },
            vec![0.5, 1.0],
        ),
        TestFunctional::multi_marginal("product", MarginalPayoff::Product, vec![0.5, 1.0]),
        TestFunctional::multi_marginal("avg_call", MarginalPayoff::AvgCall { k: 1.0 }, vec![0.5, 1.0]),
        TestFunctional::path("sup_norm", PathPayoff::SupNorm),
        TestFunctional::path(
            "integral_composite",
            PathPayoff::IntegralComposite { psi: Shape::Square, phi: Shape::Exp },
        ),
    ]
}
