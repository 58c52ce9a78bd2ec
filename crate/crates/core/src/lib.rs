//! Simulation and analysis toolkit for a fiber-coupled loop-and-switch
//! photonic quantum memory.
//!
//! * [`polar`]: 2×2 polarization algebra (states, density matrices, Jones operators).
//! * [`optics`]: component models (Pockels cell, PBS, circulator, fiber, FPC).
//! * [`engine`]: the timed figure-eight storage engine and the closed-form efficiency model.
//! * [`counting`]: Poissonian coincidence-count synthesis.
//! * [`tomography`]: maximum-likelihood single-qubit tomography with Monte Carlo errors.
//! * [`fitting`]: Malus and decay fits, loss-budget projections.
//! * [`scenario`]: configuration files, presets and report generation.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod counting;
pub mod engine;
pub mod fitting;
pub mod optics;
pub mod polar;
pub mod scenario;
pub mod tomography;
