//! Experiment driver for the switchguard safeguard: configuration, the
//! pinned surrogate plant, and the `certify`, `simulate`, `sweep` and
//! `verify` commands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;
pub mod surrogate;
