//! Acceptance suite for the switchguard workspace. The checks live in
//! `tests/acceptance.rs`.
