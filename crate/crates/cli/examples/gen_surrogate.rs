//! Regenerates `data/surrogate.toml`.
//!
//! Draws random (8, 4) plants with spectral radius 0.95, keeps the first
//! controllable one, and tunes `α` so that `ρ(A + B(K⋆ + α𝟙𝟙ᵀ))` is close
//! to 1.01. The coefficient 0.33 is kept if it already lands in [1.005, 1.05].

use nalgebra::DMatrix;
use switchguard::linalg::{op_norm, solve_dare, spectral_radius};
use switchguard::simulate::LinearSystem;
use switchguard_cli::config::{matrix_to_rows, SystemFile};

const N: usize = 8;
const M: usize = 4;
const RADIUS: f64 = 0.95;
const TARGET: f64 = 1.01;

fn round6(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| (v * 1e6).round() / 1e6)
}

fn controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let mut blocks = Vec::new();
    let mut ak_b = b.clone();
    for _ in 0..N {
        blocks.push(ak_b.clone());
        ak_b = a * ak_b;
    }
    let ctrb = DMatrix::from_fn(N, N * M, |i, j| blocks[j / M][(i, j % M)]);
    let sv = ctrb.singular_values();
    sv.min() > 1e-8 * sv.max()
}

fn main() {
    for seed in 0u64.. {
        let raw = LinearSystem::random_stable(seed, N, M, RADIUS).expect("random plant");
        let a = round6(&raw.a);
        let b = round6(&(&raw.b / (N as f64).sqrt()));
        let radius = spectral_radius(&a);
        if !(0.9..=0.99).contains(&radius) || !controllable(&a, &b) {
            continue;
        }
        let sys = LinearSystem::new(
            a.clone(),
            b.clone(),
            raw.w.clone(),
            raw.q.clone(),
            raw.r.clone(),
        )
        .unwrap();
        let Ok(dare) = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r) else {
            continue;
        };
        let rho_at = |alpha: f64| {
            spectral_radius(&sys.closed_loop(&(&dare.k + DMatrix::from_element(M, N, alpha))))
        };

        let alpha = if (1.005..=1.05).contains(&rho_at(0.33)) {
            0.33
        } else {
            let Some(hi) = (1..=4000)
                .map(|i| i as f64 * 1e-3)
                .find(|&a| rho_at(a) >= TARGET)
            else {
                continue;
            };
            let (mut lo, mut hi) = (hi - 1e-3, hi);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if rho_at(mid) >= TARGET {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            (hi * 1e4).ceil() / 1e4
        };
        let rho1 = rho_at(alpha);
        if !(1.005..=1.05).contains(&rho1) {
            continue;
        }
        let file = SystemFile {
            a: matrix_to_rows(&a),
            b: matrix_to_rows(&b),
            w: None,
            q: None,
            r: None,
            alpha: Some(alpha),
            note: Some(format!(
                "generator seed {seed}; spectral radius of A {radius:.6}; \
                 spectral radius of A+B(K*+alpha*ones) {rho1:.6}; |K*| {:.6}",
                op_norm(&dare.k)
            )),
        };
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/surrogate.toml");
        let header = "# Surrogate plant (n = 8, m = 4); W = Q = I8, R = I4.\n\
                      # Regenerate with `cargo run -p switchguard-cli --example gen_surrogate`.\n";
        std::fs::write(path, format!("{header}{}", toml::to_string(&file).unwrap())).unwrap();
        println!("seed {seed}: rho(A) = {radius:.6}, alpha = {alpha}, rho(A1) = {rho1:.6}");
        return;
    }
}
