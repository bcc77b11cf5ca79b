//! Simulation and verification toolkit for one-dimensional Brownian SDEs
//! discretized with truncated Euler schemes.
//!
//! The crate has two engines that check each other:
//!
//! * a Monte Carlo engine ([`euler`], [`ordering`], [`convergence`]) driving
//!   coupled path panels from a counter-based Gaussian generator, and
//! * a deterministic kernel engine ([`kernel`]) that pushes piecewise-linear
//!   grid functions through the one-step transition of the same schemes by
//!   exact integration against the truncated normal law.
//!
//! [`coefficients`] holds the coefficient registry and the regularity
//! constants that decide when a scheme configuration is admissible,
//! [`functionals`] the test-function registry with randomized convexity
//! verifiers, and [`smoothing`] the mollified coefficient construction used
//! when a diffusion coefficient is not semi-convex. [`config`] and
//! [`report`] back the `convord` command-line binary.

pub mod analytic;
pub mod coefficients;
pub mod config;
pub mod convergence;
pub mod error;
pub mod euler;
pub mod functionals;
pub mod kernel;
pub mod ordering;
pub mod quad;
pub mod report;
pub mod rng;
pub mod smoothing;

pub use error::{Error, Result};
