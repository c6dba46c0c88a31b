//! Dense linear algebra for stability certificates.
//!
//! Everything here works on small dense `f64` matrices (n of order 10).
//! Eigen and singular value decompositions come from `nalgebra`; the
//! Lyapunov, Riccati and dwell-time searches are implemented locally and
//! every solver output is residual-checked before it is returned.

use std::ops::Deref;

use nalgebra::linalg::{Schur, SymmetricEigen, SVD};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const TAU_SYM: f64 = 1e-10;
/// Smallest admissible eigenvalue of a positive definite matrix.
pub const TAU_PSD: f64 = 1e-9;
/// Margin below one required of a spectral radius.
pub const TAU_SPEC: f64 = 1e-9;
/// Residual tolerance for Lyapunov and Riccati solutions, relative to `max(1, ‖X‖_F)`.
pub const TAU_LYAP: f64 = 1e-10;
/// Default cap on the dwell time search.
pub const DEFAULT_T_MAX: usize = 1_000_000;

const MAX_DOUBLING_STEPS: usize = 80;
const MAX_REFINEMENTS: usize = 3;

/// A symmetric positive definite matrix.
///
/// The constructor symmetrizes its input (after checking the asymmetry is
/// within [`TAU_SYM`]) and rejects anything whose smallest eigenvalue is at
/// or below [`TAU_PSD`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m, "matrix")?;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "matrix has non-finite entries".into(),
            ));
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > TAU_SYM * scale {
            return Err(Error::InvalidArgument(format!(
                "matrix is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        let s = symmetrize(&m);
        let min_eig = min_eigenvalue(&s);
        if min_eig <= TAU_PSD {
            return Err(Error::NotPositiveDefinite { min_eig });
        }
        Ok(Self(s))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.0.clone())
    }

    fn spectral_fn(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let eig = self.eigen();
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
        symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()))
    }

    /// Principal square root.
    pub fn sqrt(&self) -> SpdMatrix {
        SpdMatrix(self.spectral_fn(f64::sqrt))
    }

    /// Inverse of the principal square root.
    pub fn inv_sqrt(&self) -> SpdMatrix {
        SpdMatrix(self.spectral_fn(|l| 1.0 / l.sqrt()))
    }

    pub fn inverse(&self) -> SpdMatrix {
        SpdMatrix(self.spectral_fn(|l| 1.0 / l))
    }

    /// Largest eigenvalue, which is also the induced 2-norm.
    pub fn norm(&self) -> f64 {
        self.eigen().eigenvalues.max()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().eigenvalues.min()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// `vᵀ P v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.0 * v))
    }
}

impl Deref for SpdMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

pub(crate) fn check_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{what} must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_same_dim(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn max_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SVD::new(m.clone(), false, false).singular_values.max()
}

/// `a^k` by repeated squaring.
pub fn mat_pow(a: &DMatrix<f64>, mut k: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = a.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Principal square root of an SPD matrix.
pub fn spd_sqrt(p: &DMatrix<f64>) -> Result<SpdMatrix> {
    Ok(SpdMatrix::new(p.clone())?.sqrt())
}

/// `‖Q‖_P = λ_max(P^{-1/2} Q P^{-1/2}) = sup_{‖v‖_P = 1} ‖v‖²_Q`.
pub fn weighted_matrix_norm(q: &SpdMatrix, p: &SpdMatrix) -> Result<f64> {
    check_same_dim(q.dim(), p.dim(), "weighted_matrix_norm")?;
    let pis = p.inv_sqrt();
    Ok(max_sym_eigenvalue(&(&*pis * &**q * &*pis)))
}

/// Induced operator norm of `mx` in the `Q`-norm: `‖Q^{1/2} Mx Q^{-1/2}‖`.
pub fn weighted_operator_norm(mx: &DMatrix<f64>, q: &SpdMatrix) -> Result<f64> {
    check_square(mx, "weighted_operator_norm")?;
    check_same_dim(mx.nrows(), q.dim(), "weighted_operator_norm")?;
    let qs = q.sqrt();
    let qis = q.inv_sqrt();
    Ok(op_norm(&(&*qs * mx * &*qis)))
}

/// Smallest `ρ` with `AᵀPA ⪯ ρP`.
pub fn contraction_factor(a: &DMatrix<f64>, p: &SpdMatrix) -> Result<f64> {
    check_square(a, "contraction_factor")?;
    check_same_dim(a.nrows(), p.dim(), "contraction_factor")?;
    let ps = p.sqrt();
    let pis = p.inv_sqrt();
    let s = op_norm(&(&*ps * a * &*pis));
    Ok(s * s)
}

/// Maximum eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    if a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    match Schur::try_new(a.clone(), f64::EPSILON, 10_000) {
        Some(schur) => schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
        // Gelfand's formula as a fallback; the Schur iteration essentially never stalls
        // at these sizes.
        None => {
            let k = 1 << 12;
            let scale = a.amax();
            let pk = mat_pow(&(a / scale), k);
            scale * op_norm(&pk).powf(1.0 / k as f64)
        }
    }
}

fn require_schur_stable(a: &DMatrix<f64>) -> Result<()> {
    let radius = spectral_radius(a);
    if radius >= 1.0 - TAU_SPEC {
        return Err(Error::Unstable { radius });
    }
    Ok(())
}

/// Residual `AᵀXA − X + S`.
pub fn lyapunov_residual(a: &DMatrix<f64>, x: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * x * a - x + s
}

/// Sum `Σ_k (Aᵀ)^k S A^k` by doubling; `a` must be Schur stable.
fn lyapunov_doubling(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut x = s.clone();
    let mut ak = a.clone();
    for _ in 0..MAX_DOUBLING_STEPS {
        let inc = ak.transpose() * &x * &ak;
        x += &inc;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NoConvergence("Lyapunov doubling overflowed".into()));
        }
        if inc.norm() <= 1e-17 * x.norm().max(f64::MIN_POSITIVE) {
            return Ok(symmetrize(&x));
        }
        ak = &ak * &ak;
    }
    Err(Error::NoConvergence(format!(
        "Lyapunov doubling did not settle in {MAX_DOUBLING_STEPS} steps"
    )))
}

fn lyapunov_refined(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut x = lyapunov_doubling(a, s)?;
    for _ in 0..MAX_REFINEMENTS {
        let res = lyapunov_residual(a, &x, s);
        if res.norm() <= TAU_LYAP * x.norm().max(1.0) * 1e-3 {
            break;
        }
        // The correction solves the same equation with the residual as forcing.
        let corr = lyapunov_doubling(a, &symmetrize(&res))?;
        x = symmetrize(&(x + corr));
    }
    let res = lyapunov_residual(a, &x, s).norm();
    if res > TAU_LYAP * x.norm().max(1.0) {
        return Err(Error::NoConvergence(format!(
            "Lyapunov residual {res:.3e} above tolerance"
        )));
    }
    Ok(x)
}

/// Solves `AᵀXA − X + S = 0` for Schur-stable `A`.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, s: &SpdMatrix) -> Result<SpdMatrix> {
    check_square(a, "A")?;
    check_same_dim(a.nrows(), s.dim(), "solve_discrete_lyapunov")?;
    require_schur_stable(a)?;
    SpdMatrix::new(lyapunov_refined(a, s)?)
}

/// Stationary covariance of noise `W` filtered through `A0`:
/// `W̃ = Σ_τ A0^τ W (A0^τ)ᵀ`, i.e. the solution of `A0 W̃ A0ᵀ − W̃ + W = 0`.
pub fn noise_gramian(a0: &DMatrix<f64>, w: &SpdMatrix) -> Result<SpdMatrix> {
    solve_discrete_lyapunov(&a0.transpose(), w)
}

/// Stabilizing solution of the discrete algebraic Riccati equation with the
/// associated optimal gain `K⋆ = −(R + BᵀPB)⁻¹BᵀPA` (so `u = K⋆x`).
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: SpdMatrix,
    pub k: DMatrix<f64>,
}

/// `AᵀPA − P − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q`.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let btp = b.transpose() * p;
    let g = r + &btp * b;
    let g_inv = g
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(r.nrows(), r.ncols(), f64::NAN));
    let atpb = a.transpose() * btp.transpose();
    a.transpose() * p * a - p - &atpb * g_inv * atpb.transpose() + q
}

fn optimal_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p;
    let g = r + &btp * b;
    let rhs = &btp * a;
    let lu = g.lu();
    lu.solve(&rhs)
        .map(|k| -k)
        .ok_or_else(|| Error::NoConvergence("R + BᵀPB is singular".into()))
}

pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &SpdMatrix,
    r: &SpdMatrix,
) -> Result<DareSolution> {
    check_square(a, "A")?;
    let n = a.nrows();
    check_same_dim(b.nrows(), n, "B rows vs state dimension")?;
    check_same_dim(q.dim(), n, "Q vs state dimension")?;
    check_same_dim(r.dim(), b.ncols(), "R vs input dimension")?;

    // Structured doubling: H_k converges quadratically to the stabilizing solution.
    let ident = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * r.inverse().as_matrix() * b.transpose();
    let mut hk = q.as_matrix().clone();
    let mut converged = false;
    for _ in 0..MAX_DOUBLING_STEPS {
        let w = &ident + &gk * &hk;
        let w_inv = w
            .try_inverse()
            .ok_or_else(|| Error::NotStabilizable("doubling step hit a singular matrix".into()))?;
        let ak_w = &ak * &w_inv;
        let a_next = &ak_w * &ak;
        let g_next = &gk + &ak_w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w_inv * &ak;
        let delta = (&h_next - &hk).norm();
        ak = a_next;
        gk = symmetrize(&g_next);
        hk = symmetrize(&h_next);
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(Error::NotStabilizable("Riccati iteration diverged".into()));
        }
        if delta <= 1e-15 * hk.norm().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(
            "Riccati doubling did not settle".into(),
        ));
    }

    let mut p = hk;
    let mut k = optimal_gain(a, b, r, &p)?;
    // Newton (Hewer) polishing from the doubling estimate.
    for _ in 0..MAX_REFINEMENTS {
        let res = riccati_residual(a, b, q, r, &p).norm();
        if res <= TAU_LYAP * p.norm().max(1.0) * 1e-3 {
            break;
        }
        let acl = a + b * &k;
        if spectral_radius(&acl) >= 1.0 {
            break;
        }
        let forcing = q.as_matrix() + k.transpose() * r.as_matrix() * &k;
        let Ok(p_next) = lyapunov_refined(&acl, &symmetrize(&forcing)) else {
            break;
        };
        p = p_next;
        k = optimal_gain(a, b, r, &p)?;
    }

    let radius = spectral_radius(&(a + b * &k));
    if radius >= 1.0 - TAU_SPEC {
        return Err(Error::NotStabilizable(format!(
            "closed loop under the Riccati gain has spectral radius {radius:.6}"
        )));
    }
    let res = riccati_residual(a, b, q, r, &p).norm();
    if res > TAU_LYAP * p.norm().max(1.0) {
        return Err(Error::NoConvergence(format!(
            "Riccati residual {res:.3e} above tolerance"
        )));
    }
    Ok(DareSolution {
        p: SpdMatrix::new(p)?,
        k,
    })
}

/// Certificate `(P₀, ρ₀)` with `A₀ᵀP₀A₀ ⪯ ρ₀P₀` for the fallback loop `A₀ = A + BK₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    pub p0: SpdMatrix,
    pub rho0: f64,
}

impl StabilityCertificate {
    /// Checks `A₀ᵀP₀A₀ ⪯ ρ₀P₀` with slack [`TAU_PSD`].
    pub fn verify(&self, a0: &DMatrix<f64>) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho0) {
            return Err(Error::CertificateViolated(format!(
                "rho0 = {} outside [0, 1)",
                self.rho0
            )));
        }
        let needed = contraction_factor(a0, &self.p0)?;
        if needed > self.rho0 + TAU_PSD {
            return Err(Error::CertificateViolated(format!(
                "A0ᵀP0A0 ⪯ rho0·P0 fails: contraction factor {needed:.6} > rho0 {:.6}",
                self.rho0
            )));
        }
        Ok(())
    }
}

/// Common quadratic Lyapunov function `(P, ρ)` for `A₁` and `A₀ᵗ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonLyapunovCertificate {
    pub p: SpdMatrix,
    pub rho: f64,
    pub dwell: usize,
}

impl CommonLyapunovCertificate {
    /// Checks `A₁ᵀPA₁ ⪯ ρP` and `(A₀ᵗ)ᵀPA₀ᵗ ⪯ ρP` with slack [`TAU_PSD`].
    pub fn verify(&self, a1: &DMatrix<f64>, a0: &DMatrix<f64>) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) || self.dwell == 0 {
            return Err(Error::CertificateViolated(format!(
                "need 0 < rho < 1 and t >= 1, got rho = {}, t = {}",
                self.rho, self.dwell
            )));
        }
        let c1 = contraction_factor(a1, &self.p)?;
        if c1 > self.rho + TAU_PSD {
            return Err(Error::CertificateViolated(format!(
                "A1ᵀPA1 ⪯ rho·P fails: {c1:.6} > {:.6}",
                self.rho
            )));
        }
        let c0 = contraction_factor(&mat_pow(a0, self.dwell), &self.p)?;
        if c0 > self.rho + TAU_PSD {
            return Err(Error::CertificateViolated(format!(
                "(A0^t)ᵀP(A0^t) ⪯ rho·P fails at t = {}: {c0:.6} > {:.6}",
                self.dwell, self.rho
            )));
        }
        Ok(())
    }

    /// Raises `ρ` to at least `floor`; both inequalities keep holding.
    pub fn with_rho_floor(mut self, floor: f64) -> Self {
        if self.rho < floor {
            self.rho = floor.min(1.0 - TAU_SPEC);
        }
        self
    }

    /// Replaces the dwell time, checking the second inequality for the new value.
    pub fn with_dwell(mut self, dwell: usize, a0: &DMatrix<f64>) -> Result<Self> {
        self.dwell = dwell;
        if dwell == 0 {
            return Err(Error::InvalidArgument("dwell time must be positive".into()));
        }
        let c0 = contraction_factor(&mat_pow(a0, dwell), &self.p)?;
        if c0 >= self.rho {
            return Err(Error::CertificateViolated(format!(
                "dwell time {dwell} does not certify the fallback block: {c0:.6} >= rho {:.6}",
                self.rho
            )));
        }
        Ok(self)
    }
}

/// Builds `(P, ρ, t)`: `P` solves `A₁ᵀPA₁ − P + I = 0`, `ρ` is the contraction
/// factor of `A₁` plus `rho_margin` (capped below one), and `t` is the
/// smallest dwell time with `contraction_factor(A₀ᵗ, P) < ρ`.
pub fn find_common_lyapunov(
    a1: &DMatrix<f64>,
    a0: &DMatrix<f64>,
    rho_margin: f64,
    t_max: usize,
) -> Result<CommonLyapunovCertificate> {
    check_square(a1, "A1")?;
    check_square(a0, "A0")?;
    check_same_dim(a1.nrows(), a0.nrows(), "find_common_lyapunov")?;
    if !(rho_margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rho_margin must be >= 0, got {rho_margin}"
        )));
    }
    require_schur_stable(a0)?;
    let n = a1.nrows();
    let p = solve_discrete_lyapunov(a1, &SpdMatrix::identity(n))?;
    let rho = (contraction_factor(a1, &p)? + rho_margin).min(1.0 - TAU_SPEC);

    let mut power = a0.clone();
    for t in 1..=t_max {
        if contraction_factor(&power, &p)? < rho {
            return Ok(CommonLyapunovCertificate { p, rho, dwell: t });
        }
        power = &power * a0;
    }
    Err(Error::DwellTimeOverflow { t_max })
}
