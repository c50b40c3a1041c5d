//! Core library of the pimpcs toolkit.
//!
//! The pipeline: a reference nonlinear MPC lands a planar quadcopter and its
//! trajectories are recorded ([`dataset`]); a quadratic Lyapunov stability
//! profile is fitted to those transitions ([`lyapunov`]); a small feed-forward
//! surrogate controller is trained against control-mimicry, dynamics-residual,
//! stability and feasibility losses ([`surrogate`]); and the surrogate is
//! benchmarked against the MPC on landing quality and CPU cost ([`evaluate`]).
//!
//! Modules:
//!
//! - [`numerics`]: fixed-dimension vectors, symmetric 6x6 matrices, Jacobi
//!   eigendecomposition and the positive-definite projection.
//! - [`dynamics`]: the planar quadcopter plant, stabilizer, integrators and
//!   the zero-order-hold simulation loop.
//! - [`mpc`]: the iLQR-based reference controller.
//! - [`dataset`]: reference-trajectory generation, auxiliary state sampling,
//!   and the on-disk dataset format.
//! - [`lyapunov`]: stability-profile fitting by projected subgradient descent.
//! - [`surrogate`]: the 312-parameter network, its four losses, exact
//!   reverse-mode gradients, Adam, and the training loop.
//! - [`evaluate`]: landing metrics, Monte Carlo campaigns and CPU benchmarks.
//! - [`config`]: key=value configuration files and the resolved run config.

// Explicit indexing across parallel fixed-size arrays is the clearest way to
// write the 6x6 kernels, and `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod evaluate;
mod fmtio;
pub mod lyapunov;
pub mod mpc;
pub mod numerics;
pub mod surrogate;
