//! Certified switching between a learned feedback gain and a stabilizing
//! fallback gain for noisy linear plants.
//!
//! The controller applies the primary gain `K₁` until the input deviation
//! `‖(K₁ − K₀)x‖` from the fallback gain reaches a threshold `M`, then holds
//! `K₀` for `t` steps. This crate provides the controller itself, the
//! Lyapunov/Riccati machinery for certificates, a seeded Monte-Carlo
//! simulator, and closed-form bounds on cost, fourth moments, switching
//! probability and the performance gap to unguarded `K₁`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod error;
pub mod linalg;
pub mod policy;
pub mod simulate;

pub use error::{Error, Result};
pub use linalg::{CommonLyapunovCertificate, DareSolution, SpdMatrix, StabilityCertificate};
pub use policy::{linear_step, switch_step, ControllerParams, SwitchOutput};
pub use simulate::{Controller, LinearSystem, NoiseKind, NoiseModel, Trajectory};
