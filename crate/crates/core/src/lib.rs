//! Curvature-guided flow matching.
//!
//! A flow-matching model learns a velocity field that transports Gaussian
//! noise to data along an interpolant `z_t = a(t) x0 + b(t) eps`. Rectified
//! flow fixes the coefficients to the straight line `a = 1 - t`, `b = t`.
//! This crate learns the coefficient functions instead, with small residual
//! networks whose boundary values are pinned by construction, and penalizes
//! the "turning" of the coefficient curve through a grid-based regularizer
//! on `a'b'' - b'a''`.
//!
//! Module map:
//!
//! - [`diffengine`]: reverse-mode gradients over dense 2D tensors, plus a
//!   central-difference oracle.
//! - [`schedule`]: neural and closed-form coefficient schedules, grid
//!   derivatives.
//! - [`trajectory`]: interpolant, target velocity, speed and curvature.
//! - [`losses`]: flow-matching loss, curvature regularizer, total loss.
//! - [`velocity_model`]: the trainable velocity network.
//! - [`training`]: timestep samplers, AdamW, learning-rate schedule, the
//!   training loop.
//! - [`sampling`]: Euler and Heun ODE integration from noise to data.
//! - [`datagen`]: seeded 2D toy datasets and the noise source.
//! - [`metrics`]: energy distance, sliced Wasserstein, schedule diagnostics.
//! - [`cli`]: experiment configuration, checkpoints and the command
//!   implementations behind the `curveflow` binary.

pub mod cli;
pub mod datagen;
pub mod diffengine;
mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod training;
pub mod trajectory;
pub mod velocity_model;

pub use diffengine::{GradientMap, Graph, ParameterSet, Tensor, Var};
pub use error::{Error, Result};
pub use schedule::{CoefficientSchedule, GridSpec, ScheduleKind};
pub use velocity_model::VelocityField;

/// Grid resolution used for the regularizer and the default derivative step.
pub const DEFAULT_GRID_M: usize = 1000;

/// Default finite-difference step for pointwise schedule derivatives (`1/M`).
pub const DEFAULT_STEP: f64 = 1.0 / DEFAULT_GRID_M as f64;
