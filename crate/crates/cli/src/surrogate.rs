//! The pinned (n = 8, m = 4) open-loop-stable surrogate plant.

use switchguard::simulate::LinearSystem;

use crate::config::SystemFile;

const SURROGATE_TOML: &str = include_str!("../data/surrogate.toml");

pub fn surrogate_file() -> SystemFile {
    SystemFile::parse(SURROGATE_TOML).expect("shipped surrogate data file parses")
}

pub fn builtin_surrogate() -> LinearSystem {
    surrogate_file()
        .to_system()
        .expect("shipped surrogate data file is valid")
}

/// Rank-one coefficient `α` tuned so that `K⋆ + α𝟙𝟙ᵀ` is mildly destabilizing.
pub fn surrogate_alpha() -> f64 {
    surrogate_file()
        .alpha
        .expect("surrogate data file records alpha")
}
