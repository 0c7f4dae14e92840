//! State estimation for hybrid stochastic systems.
//!
//! The crate implements a path-integral particle filter whose proposal is the
//! optimally controlled process of the smoothing/control duality, extended to
//! systems with guarded mode transitions via saltation matrices ("salted"
//! path integral particle filtering, SPIPF). It ships with:
//!
//! - [`hybrid`]: hybrid automata with stochastic per-mode flows, guards,
//!   resets, saltation matrices, and a finite-difference transition oracle;
//! - [`cost`]: discretized observation paths and the filtering costs;
//! - [`ilqr`]: a sliding-window salted iLQR solver for feedforward/feedback
//!   gains, differentiating through transitions with saltation matrices;
//! - [`filter`]: the particle filter itself (windowed weights, resampling,
//!   mode voting);
//! - [`baselines`]: a salted Kalman filter, a multi-mode SIR particle
//!   filter, and the zero-control ablation;
//! - [`systems`]: bouncing-ball and SLIP benchmarks plus truth simulation;
//! - [`harness`]: seeded Monte-Carlo experiment orchestration with CSV
//!   output and a CLI (`spipf simulate|filter|experiment`).

pub mod baselines;
pub mod cost;
pub mod error;
pub mod filter;
pub mod harness;
pub mod hybrid;
pub mod ilqr;
pub mod rng;
pub mod systems;

pub use error::{Error, Result};
