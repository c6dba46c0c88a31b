//! Closed-form stability, moment, switching-probability and performance-gap
//! bounds for the switching safeguard, in the Gaussian and the
//! bounded-fourth-moment noise regimes.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{
    self, contraction_factor, op_norm, spectral_radius, weighted_matrix_norm,
    weighted_operator_norm, CommonLyapunovCertificate, SpdMatrix, StabilityCertificate, TAU_SPEC,
};
use crate::simulate::LinearSystem;

/// Default slack added to the fallback contraction factor.
pub const DEFAULT_RHO0_MARGIN: f64 = 1e-6;

/// Lower limit on the common contraction factor `ρ` used by the
/// switching-probability bounds.
pub const RHO_FLOOR: f64 = 0.250_000_1;

/// Terms of `Σ_s ‖A₁^s‖_{Q₁}` below this value end the explicit summation.
pub const SERIES_CUTOFF: f64 = 1e-12;

const SERIES_MAX_TERMS: usize = 10_000_000;

/// `P₀` from `A₀ᵀP₀A₀ − P₀ + Q + K₀ᵀRK₀ = 0` and `ρ₀` = contraction factor plus
/// [`DEFAULT_RHO0_MARGIN`].
pub fn certify_fallback(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k0: &DMatrix<f64>,
    q: &SpdMatrix,
    r: &SpdMatrix,
) -> Result<StabilityCertificate> {
    certify_fallback_with_margin(a, b, k0, q, r, DEFAULT_RHO0_MARGIN)
}

pub fn certify_fallback_with_margin(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k0: &DMatrix<f64>,
    q: &SpdMatrix,
    r: &SpdMatrix,
    margin: f64,
) -> Result<StabilityCertificate> {
    if b.nrows() != a.nrows()
        || k0.nrows() != b.ncols()
        || k0.ncols() != a.ncols()
        || r.dim() != b.ncols()
    {
        return Err(Error::DimensionMismatch(format!(
            "A {:?}, B {:?}, K0 {:?}, R {:?}",
            a.shape(),
            b.shape(),
            k0.shape(),
            r.shape()
        )));
    }
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be >= 0, got {margin}"
        )));
    }
    let a0 = a + b * k0;
    let forcing = SpdMatrix::new(linalg::symmetrize(
        &(q.as_matrix() + k0.transpose() * r.as_matrix() * k0),
    ))?;
    let p0 = linalg::solve_discrete_lyapunov(&a0, &forcing)?;
    let rho0 = (contraction_factor(&a0, &p0)? + margin).min(1.0 - TAU_SPEC);
    let cert = StabilityCertificate { p0, rho0 };
    cert.verify(&a0)?;
    Ok(cert)
}

/// Bound on `E‖x_k‖²_{P₀}` for any `k`:
/// `4(1+ρ₀)(M²‖B‖²‖P₀‖ + tr(WP₀)) / (1−ρ₀)²`.
pub fn lemma1_ev_bound(
    cert0: &StabilityCertificate,
    b: &DMatrix<f64>,
    w: &SpdMatrix,
    threshold: f64,
) -> f64 {
    let rho0 = cert0.rho0;
    let bn = op_norm(b);
    let trwp = trace_product(w, &cert0.p0);
    4.0 * (1.0 + rho0) * (threshold * threshold * bn * bn * cert0.p0.norm() + trwp)
        / (1.0 - rho0).powi(2)
}

/// Cap on the average LQ cost of the switched loop, independent of `K₁`:
/// `(8(1+ρ₀)‖B‖²‖P₀‖/(1−ρ₀)² + 2‖R‖)M² + 8(1+ρ₀)tr(WP₀)/(1−ρ₀)²`.
pub fn theorem1_cost_cap(
    cert0: &StabilityCertificate,
    b: &DMatrix<f64>,
    r: &SpdMatrix,
    w: &SpdMatrix,
    threshold: f64,
) -> f64 {
    let rho0 = cert0.rho0;
    let bn = op_norm(b);
    let den = (1.0 - rho0).powi(2);
    let m2 = threshold * threshold;
    (8.0 * (1.0 + rho0) * bn * bn * cert0.p0.norm() / den + 2.0 * r.norm()) * m2
        + 8.0 * (1.0 + rho0) * trace_product(w, &cert0.p0) / den
}

fn trace_product(a: &SpdMatrix, b: &SpdMatrix) -> f64 {
    (a.as_matrix() * b.as_matrix()).trace()
}

/// Sub-Gaussian envelope of `S_k = Σ ϱ^{k−i}X_i` given `P(X_i ≥ a) ≤ C₁exp(−C₂a²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailConstants {
    pub c1_tilde: f64,
    pub c2_tilde: f64,
    /// The envelope holds for `a ≥ a_min`.
    pub a_min: f64,
}

impl TailConstants {
    pub fn envelope(&self, a: f64) -> f64 {
        self.c1_tilde * (-self.c2_tilde * a * a).exp()
    }
}

pub fn theorem2_tail_constants(c1: f64, c2: f64, varrho: f64) -> Result<TailConstants> {
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need C1, C2 > 0, got {c1}, {c2}"
        )));
    }
    if !(varrho > 0.0 && varrho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < varrho < 1, got {varrho}"
        )));
    }
    let sr = varrho.sqrt();
    Ok(TailConstants {
        c1_tilde: 2.0 * c1 / (1.0 / varrho - 1.0).min(1.0),
        c2_tilde: (1.0 - sr).powi(2) * c2,
        a_min: 2.0 / c2.sqrt() / (1.0 - sr),
    })
}

/// Everything the Gaussian and heavy-tail calculators read.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBoundInputs {
    pub cert0: StabilityCertificate,
    pub cert: CommonLyapunovCertificate,
    /// Noise Gramian of the fallback loop.
    pub wtilde: SpdMatrix,
    /// `𝒦 = ‖K₁ − K₀‖`.
    pub kdiff_norm: f64,
    pub threshold: f64,
    pub n: usize,
    pub b: DMatrix<f64>,
    pub r: SpdMatrix,
    pub w: SpdMatrix,
    /// `Q + K₁ᵀRK₁`.
    pub q1: SpdMatrix,
    /// `A + BK₁`.
    pub a1: DMatrix<f64>,
    /// `B(K₀ − K₁)`.
    pub delta1: DMatrix<f64>,
    /// `K₀ᵀRK₀ − K₁ᵀRK₁`.
    pub delta2: DMatrix<f64>,
}

impl GaussianBoundInputs {
    /// Assembles the inputs; `ρ` is raised to [`RHO_FLOOR`] if needed.
    pub fn new(
        sys: &LinearSystem,
        k0: &DMatrix<f64>,
        k1: &DMatrix<f64>,
        cert0: StabilityCertificate,
        cert: CommonLyapunovCertificate,
        threshold: f64,
    ) -> Result<Self> {
        let n = sys.state_dim();
        let m = sys.input_dim();
        if k0.shape() != (m, n) || k1.shape() != (m, n) {
            return Err(Error::DimensionMismatch(format!(
                "gains must be {m}x{n}, got {:?} and {:?}",
                k0.shape(),
                k1.shape()
            )));
        }
        if cert0.p0.dim() != n || cert.p.dim() != n {
            return Err(Error::DimensionMismatch(
                "certificate dimension differs from the plant".into(),
            ));
        }
        if !(threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must be > 0, got {threshold}"
            )));
        }
        let a0 = sys.closed_loop(k0);
        let wtilde = linalg::noise_gramian(&a0, &sys.w)?;
        let r = sys.r.as_matrix();
        Ok(Self {
            cert0,
            cert: cert.with_rho_floor(RHO_FLOOR),
            wtilde,
            kdiff_norm: op_norm(&(k1 - k0)),
            threshold,
            n,
            b: sys.b.clone(),
            r: sys.r.clone(),
            w: sys.w.clone(),
            q1: SpdMatrix::new(sys.closed_loop_weight(k1))?,
            a1: sys.closed_loop(k1),
            delta1: &sys.b * (k0 - k1),
            delta2: linalg::symmetrize(&(k0.transpose() * r * k0 - k1.transpose() * r * k1)),
        })
    }

    pub fn with_threshold(&self, threshold: f64) -> Self {
        Self {
            threshold,
            ..self.clone()
        }
    }

    /// `‖W̃‖‖P‖‖P⁻¹‖`.
    fn spread(&self) -> f64 {
        self.wtilde.norm() * self.cert.p.norm() * self.cert.p.inverse().norm()
    }

    /// `‖P₀‖²_P` and `‖P₀‖²_{W̃⁻¹}`.
    fn p0_weights(&self) -> Result<(f64, f64)> {
        let p0_p = weighted_matrix_norm(&self.cert0.p0, &self.cert.p)?;
        let p0_w = weighted_matrix_norm(&self.cert0.p0, &self.wtilde.inverse())?;
        Ok((p0_p * p0_p, p0_w * p0_w))
    }
}

/// `ℰ(a) = coef · exp(−rate · a²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EscapeFn {
    pub coef: f64,
    pub rate: f64,
}

impl EscapeFn {
    pub fn eval(&self, a: f64) -> f64 {
        self.coef * (-self.rate * a * a).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBounds {
    /// `𝒬`, the bound on `E(x̃ᵀPx̃)²` along the collapsed subsequence.
    pub q_const: f64,
    pub fourth_moment_bound: f64,
    pub a0: f64,
    /// `t·ℰ(M/𝒦)`; zero when `𝒦 = 0`.
    pub switch_prob_bound: f64,
    pub escape: EscapeFn,
    /// Whether `M ≥ a₀𝒦`; the bounds are certified only when this holds.
    pub valid: bool,
}

pub fn theorem3_gaussian(inp: &GaussianBoundInputs) -> Result<GaussianBounds> {
    let rho = inp.cert.rho;
    let n = inp.n as f64;
    let nn = n * n + 2.0 * n;
    let p = &inp.cert.p;
    let trwp = trace_product(&inp.wtilde, p);
    let p_w = weighted_matrix_norm(p, &inp.wtilde.inverse())?;
    let q_const = (6.0 * rho * trwp * trwp + (1.0 - rho) * nn * p_w * p_w)
        / ((1.0 - rho) * (1.0 - rho * rho));
    let (p0_p2, p0_w2) = inp.p0_weights()?;
    let fourth_moment_bound = 8.0 * (q_const * p0_p2 + nn * p0_w2);

    let spread = inp.spread();
    let r4 = rho.powf(0.25);
    let a0 = (8.0 * n * spread).sqrt() / (1.0 - r4);
    let escape = EscapeFn {
        coef: 4.0 * n / (rho.powf(-0.5) - 1.0),
        rate: (1.0 - r4).powi(2) / (2.0 * n * spread),
    };
    let switch_prob_bound = escape_at_threshold(inp, |a| escape.eval(a));
    Ok(GaussianBounds {
        q_const,
        fourth_moment_bound,
        a0,
        switch_prob_bound,
        escape,
        valid: inp.threshold >= a0 * inp.kdiff_norm,
    })
}

/// `t·f(M/𝒦)`, with the `𝒦 = 0` case defined as zero.
fn escape_at_threshold(inp: &GaussianBoundInputs, f: impl Fn(f64) -> f64) -> f64 {
    if inp.kdiff_norm == 0.0 {
        0.0
    } else {
        inp.cert.dwell as f64 * f(inp.threshold / inp.kdiff_norm)
    }
}

/// `C₁`, `C₂`, `C₃`, which the Gaussian and heavy-tail gap bounds share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Value of `Σ_s ‖A₁^s‖_{Q₁}` (summed terms plus certified tail).
    pub series: f64,
}

impl GapConstants {
    fn gap(&self, g: f64) -> f64 {
        2.0 * self.c1 * self.c2 * g + (self.c2 * self.c2 + self.c3) * g * g
    }
}

pub fn gap_constants(inp: &GaussianBoundInputs) -> Result<GapConstants> {
    let radius = spectral_radius(&inp.a1);
    if radius >= 1.0 - TAU_SPEC {
        return Err(Error::Unstable { radius });
    }
    let p = &inp.cert.p;
    let rho = inp.cert.rho;
    let q1_p = weighted_matrix_norm(&inp.q1, p)?;
    let c1 = (trace_product(&inp.w, p) * q1_p / (1.0 - rho)).sqrt();
    let series = operator_norm_series(inp)?;
    let c2 = op_norm(&inp.delta1) * weighted_matrix_norm(&inp.q1, &inp.cert0.p0)? * series;
    let c3 = op_norm(&inp.delta2) * inp.cert0.p0.inverse().norm();
    Ok(GapConstants { c1, c2, c3, series })
}

/// `Σ_{s≥0} ‖A₁^s‖_{Q₁}`, summed over `s < L` where `L` is the first power
/// with `q = ‖A₁^L‖_{Q₁}` below [`SERIES_CUTOFF`]. Submultiplicativity gives
/// `Σ_{s≥L} ‖A₁^s‖ ≤ q/(1−q) · Σ_{s<L} ‖A₁^s‖`, so the returned value
/// `Σ_{s<L} ‖A₁^s‖ / (1 − q)` is an upper bound on the full series.
fn operator_norm_series(inp: &GaussianBoundInputs) -> Result<f64> {
    let q1 = &inp.q1;
    let (qs, qis) = (q1.sqrt(), q1.inv_sqrt());
    let step = &*qs * &inp.a1 * &*qis;
    let mut power = DMatrix::<f64>::identity(inp.n, inp.n);
    let mut sum = 0.0;
    for _ in 0..SERIES_MAX_TERMS {
        let term = op_norm(&power);
        if term < SERIES_CUTOFF {
            return Ok(sum / (1.0 - term));
        }
        sum += term;
        power = &step * power;
    }
    Err(Error::NoConvergence(
        "operator-norm series did not reach the cutoff".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapBound {
    pub gap_bound: f64,
    pub constants: GapConstants,
    pub c4: f64,
    /// `𝒢 = C₄(t·ℰ(M/𝒦))^{1/4}`.
    pub g: f64,
    pub valid: bool,
}

/// `J^{K₁,M,t} − J^{K₁} ≤ 2C₁C₂𝒢 + (C₂² + C₃)𝒢²`.
pub fn theorem4_gap_bound(inp: &GaussianBoundInputs) -> Result<GapBound> {
    let constants = gap_constants(inp)?;
    let t3 = theorem3_gaussian(inp)?;
    let n = inp.n as f64;
    let (p0_p2, p0_w2) = inp.p0_weights()?;
    let c4 = 2f64.powf(0.75) * (t3.q_const * p0_p2 + (n * n + 2.0 * n) * p0_w2).powf(0.25);
    let g = c4 * t3.switch_prob_bound.powf(0.25);
    Ok(GapBound {
        gap_bound: constants.gap(g),
        constants,
        c4,
        g,
        valid: t3.valid,
    })
}

/// `c = (1 − ρ^{1/4})² / (16‖W̃‖‖P‖‖P⁻¹‖𝒦²)`, the rate in the `O(t^{1/4}exp(−cM²))` gap decay.
pub fn corollary1_rate_constant(inp: &GaussianBoundInputs) -> Result<f64> {
    if inp.kdiff_norm == 0.0 {
        return Err(Error::DegenerateGains);
    }
    let k = inp.kdiff_norm;
    Ok((1.0 - inp.cert.rho.powf(0.25)).powi(2) / (16.0 * inp.spread() * k * k))
}

/// `μ̃₄ = ‖P₀‖²μ₄/(1−ρ₀²) + 2ρ₀tr(WP₀)/((1−ρ₀²)(1−ρ₀))`.
pub fn heavytail_mu4tilde(cert0: &StabilityCertificate, w: &SpdMatrix, mu4: f64) -> f64 {
    let rho0 = cert0.rho0;
    let d = 1.0 - rho0 * rho0;
    cert0.p0.norm().powi(2) * mu4 / d
        + 2.0 * rho0 * trace_product(w, &cert0.p0) / (d * (1.0 - rho0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeavyTailBoundInputs {
    pub base: GaussianBoundInputs,
    /// `E‖w‖⁴`.
    pub mu4: f64,
}

impl HeavyTailBoundInputs {
    pub fn new(base: GaussianBoundInputs, mu4: f64) -> Result<Self> {
        let floor = base.w.trace().powi(2) / base.n as f64;
        if !(mu4.is_finite() && mu4 >= floor * (1.0 - 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "fourth moment {mu4} is below the (tr W)²/n floor {floor}"
            )));
        }
        Ok(Self { base, mu4 })
    }
}

/// `𝒫(a) = coef / a⁴`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyTailFn {
    pub coef: f64,
}

impl PolyTailFn {
    pub fn eval(&self, a: f64) -> f64 {
        self.coef / a.powi(4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeavyTailBounds {
    pub mu4_tilde: f64,
    /// `𝒬̃`.
    pub q_tilde: f64,
    pub fourth_moment_bound: f64,
    /// `min(1, t·𝒫(M/𝒦))`.
    pub switch_prob_bound: f64,
    /// `t·𝒫(M/𝒦)` before clipping.
    pub switch_prob_raw: f64,
    pub tail: PolyTailFn,
}

pub fn theorem5_heavytail(inp: &HeavyTailBoundInputs) -> Result<HeavyTailBounds> {
    let b = &inp.base;
    let rho = b.cert.rho;
    let p = &b.cert.p;
    let mu4_tilde = heavytail_mu4tilde(&b.cert0, &b.w, inp.mu4);
    let trwp = trace_product(&b.wtilde, p);
    let p_p0 = weighted_matrix_norm(p, &b.cert0.p0)?;
    let q_tilde = (6.0 * rho * trwp * trwp + (1.0 - rho) * p_p0 * p_p0 * mu4_tilde)
        / ((1.0 - rho) * (1.0 - rho * rho));
    let (p0_p2, _) = b.p0_weights()?;
    let fourth_moment_bound = 8.0 * (q_tilde * p0_p2 + mu4_tilde);
    let tail = PolyTailFn {
        coef: p_p0 * p_p0 * mu4_tilde / ((1.0 - rho.powf(0.25)).powi(4) * (1.0 - rho)),
    };
    let switch_prob_raw = escape_at_threshold(b, |a| tail.eval(a));
    Ok(HeavyTailBounds {
        mu4_tilde,
        q_tilde,
        fourth_moment_bound,
        switch_prob_bound: switch_prob_raw.min(1.0),
        switch_prob_raw,
        tail,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeavyGapBound {
    pub gap_bound: f64,
    pub constants: GapConstants,
    /// `𝒢̃ = 2^{3/4}(𝒬̃‖P₀‖²_P + μ̃₄)^{1/4}(t𝒫(M/𝒦))^{1/4}`, from the unclipped `𝒫`.
    pub g_tilde: f64,
}

pub fn theorem6_gap_bound(inp: &HeavyTailBoundInputs) -> Result<HeavyGapBound> {
    let constants = gap_constants(&inp.base)?;
    let t5 = theorem5_heavytail(inp)?;
    let (p0_p2, _) = inp.base.p0_weights()?;
    let g_tilde = 2f64.powf(0.75)
        * (t5.q_tilde * p0_p2 + t5.mu4_tilde).powf(0.25)
        * t5.switch_prob_raw.powf(0.25);
    Ok(HeavyGapBound {
        gap_bound: constants.gap(g_tilde),
        constants,
        g_tilde,
    })
}

/// Quantities that need a common Lyapunov certificate (a stable `A + BK₁`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifiedBounds {
    pub rho: f64,
    pub dwell: usize,
    pub gaussian: GaussianBounds,
    pub gap: GapBound,
    pub c_rate: Option<f64>,
    pub heavy: HeavyTailBounds,
    pub heavy_gap: HeavyGapBound,
}

/// Every evaluated constant for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub n: usize,
    pub m: usize,
    pub threshold: f64,
    pub kdiff_norm: f64,
    pub rho0: f64,
    /// Fourth moment of the configured noise.
    pub mu4: f64,
    /// Which family the headline numbers refer to: `gaussian` or `heavy_tail`.
    pub regime: &'static str,
    pub lemma1_ev_bound: f64,
    pub cost_cap: f64,
    pub certified: Option<CertifiedBounds>,
}

/// Field names in output order; part of the stable report format.
pub const REPORT_FIELDS: [&str; 34] = [
    "regime",
    "n",
    "m",
    "M",
    "kdiff_norm",
    "rho0",
    "rho",
    "t",
    "mu4",
    "lemma1_ev_bound",
    "cost_cap",
    "fourth_moment_bound",
    "switch_prob_bound",
    "gap_bound",
    "certified",
    "a0",
    "escape_coef",
    "escape_rate",
    "Q",
    "C1",
    "C2",
    "C3",
    "C4",
    "G",
    "c_rate",
    "gaussian_fourth_moment_bound",
    "gaussian_switch_prob_bound",
    "gaussian_gap_bound",
    "mu4_tilde",
    "Q_tilde",
    "P_coef",
    "G_tilde",
    "heavy_switch_prob_raw",
    "heavy_gap_bound",
];

impl BoundReport {
    /// Evaluates every bound. `cert` is `None` when `A + BK₁` admits no common
    /// Lyapunov certificate; only the `K₁`-independent quantities are then filled.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        sys: &LinearSystem,
        k0: &DMatrix<f64>,
        k1: &DMatrix<f64>,
        cert0: &StabilityCertificate,
        cert: Option<&CommonLyapunovCertificate>,
        threshold: f64,
        mu4: f64,
        heavy_tail: bool,
    ) -> Result<Self> {
        let certified = match cert {
            None => None,
            Some(c) => {
                let inp =
                    GaussianBoundInputs::new(sys, k0, k1, cert0.clone(), c.clone(), threshold)?;
                let heavy_inp = HeavyTailBoundInputs::new(inp.clone(), mu4)?;
                Some(CertifiedBounds {
                    rho: inp.cert.rho,
                    dwell: inp.cert.dwell,
                    gaussian: theorem3_gaussian(&inp)?,
                    gap: theorem4_gap_bound(&inp)?,
                    c_rate: corollary1_rate_constant(&inp).ok(),
                    heavy: theorem5_heavytail(&heavy_inp)?,
                    heavy_gap: theorem6_gap_bound(&heavy_inp)?,
                })
            }
        };
        Ok(Self {
            n: sys.state_dim(),
            m: sys.input_dim(),
            threshold,
            kdiff_norm: op_norm(&(k1 - k0)),
            rho0: cert0.rho0,
            mu4,
            regime: if heavy_tail { "heavy_tail" } else { "gaussian" },
            lemma1_ev_bound: lemma1_ev_bound(cert0, &sys.b, &sys.w, threshold),
            cost_cap: theorem1_cost_cap(cert0, &sys.b, &sys.r, &sys.w, threshold),
            certified,
        })
    }

    pub fn is_heavy_tail(&self) -> bool {
        self.regime == "heavy_tail"
    }

    /// Headline `(fourth_moment_bound, switch_prob_bound, gap_bound)` for the configured regime.
    pub fn headline(&self) -> Option<(f64, f64, f64)> {
        self.certified.map(|c| {
            if self.is_heavy_tail() {
                (
                    c.heavy.fourth_moment_bound,
                    c.heavy.switch_prob_bound,
                    c.heavy_gap.gap_bound,
                )
            } else {
                (
                    c.gaussian.fourth_moment_bound,
                    c.gaussian.switch_prob_bound,
                    c.gap.gap_bound,
                )
            }
        })
    }

    /// Whether the headline bounds are certified at this threshold. The
    /// heavy-tail statements carry no threshold floor.
    pub fn is_certified(&self) -> bool {
        match self.certified {
            None => false,
            Some(c) => self.is_heavy_tail() || c.gaussian.valid,
        }
    }

    /// `(name, value)` pairs in [`REPORT_FIELDS`] order; unavailable values are `nan`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let num = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), fmt_num);
        let c = self.certified.as_ref();
        let head = self.headline();
        let values = vec![
            self.regime.to_string(),
            self.n.to_string(),
            self.m.to_string(),
            fmt_num(self.threshold),
            fmt_num(self.kdiff_norm),
            fmt_num(self.rho0),
            num(c.map(|c| c.rho)),
            c.map_or_else(|| "nan".to_string(), |c| c.dwell.to_string()),
            fmt_num(self.mu4),
            fmt_num(self.lemma1_ev_bound),
            fmt_num(self.cost_cap),
            num(head.map(|h| h.0)),
            num(head.map(|h| h.1)),
            num(head.map(|h| h.2)),
            u8::from(self.is_certified()).to_string(),
            num(c.map(|c| c.gaussian.a0)),
            num(c.map(|c| c.gaussian.escape.coef)),
            num(c.map(|c| c.gaussian.escape.rate)),
            num(c.map(|c| c.gaussian.q_const)),
            num(c.map(|c| c.gap.constants.c1)),
            num(c.map(|c| c.gap.constants.c2)),
            num(c.map(|c| c.gap.constants.c3)),
            num(c.map(|c| c.gap.c4)),
            num(c.map(|c| c.gap.g)),
            num(c.and_then(|c| c.c_rate)),
            num(c.map(|c| c.gaussian.fourth_moment_bound)),
            num(c.map(|c| c.gaussian.switch_prob_bound)),
            num(c.map(|c| c.gap.gap_bound)),
            num(c.map(|c| c.heavy.mu4_tilde)),
            num(c.map(|c| c.heavy.q_tilde)),
            num(c.map(|c| c.heavy.tail.coef)),
            num(c.map(|c| c.heavy_gap.g_tilde)),
            num(c.map(|c| c.heavy.switch_prob_raw)),
            num(c.map(|c| c.heavy_gap.gap_bound)),
        ];
        REPORT_FIELDS.iter().copied().zip(values).collect()
    }

    /// `name = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn csv_header() -> String {
        REPORT_FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(_, v)| v)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Shortest round-trip representation, `inf`/`nan` spelled out.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:e}")
    }
}

/// `‖A₁^s‖_{Q₁}` for a single power; exposed for diagnostics.
pub fn weighted_power_norm(a1: &DMatrix<f64>, q1: &SpdMatrix, s: usize) -> Result<f64> {
    weighted_operator_norm(&linalg::mat_pow(a1, s), q1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::dmatrix;

    fn scalar_cert0() -> StabilityCertificate {
        StabilityCertificate {
            p0: SpdMatrix::from_diagonal(&[4.0 / 3.0]).unwrap(),
            rho0: 0.25,
        }
    }

    fn scalar_system() -> LinearSystem {
        LinearSystem::new(
            dmatrix![0.5],
            dmatrix![1.0],
            SpdMatrix::identity(1),
            SpdMatrix::identity(1),
            SpdMatrix::identity(1),
        )
        .unwrap()
    }

    /// Scalar plant `a = 0.5`, `K₀ = 0`, `K₁ = −0.1`, with a common certificate
    /// built by hand: `P = 4/3`, `ρ = 0.26`, `t = 1`.
    fn scalar_inputs(threshold: f64) -> GaussianBoundInputs {
        let sys = scalar_system();
        let cert = CommonLyapunovCertificate {
            p: SpdMatrix::from_diagonal(&[4.0 / 3.0]).unwrap(),
            rho: 0.26,
            dwell: 1,
        };
        GaussianBoundInputs::new(
            &sys,
            &dmatrix![0.0],
            &dmatrix![-0.1],
            scalar_cert0(),
            cert,
            threshold,
        )
        .unwrap()
    }

    #[test]
    fn certify_fallback_scalar() {
        let sys = scalar_system();
        let c = certify_fallback_with_margin(&sys.a, &sys.b, &dmatrix![0.0], &sys.q, &sys.r, 0.0)
            .unwrap();
        assert_abs_diff_eq!(c.p0[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.rho0, 0.25, epsilon = 1e-12);
        let c = certify_fallback(&sys.a, &sys.b, &dmatrix![0.0], &sys.q, &sys.r).unwrap();
        assert_abs_diff_eq!(c.rho0, 0.25 + DEFAULT_RHO0_MARGIN, epsilon = 1e-12);
    }

    #[test]
    fn certify_fallback_deadbeat() {
        let a = dmatrix![0.0, 1.0; 0.0, 0.0];
        let b = dmatrix![0.0; 1.0];
        let q = SpdMatrix::identity(2);
        let r = SpdMatrix::identity(1);
        // K₀ = 0 keeps the nilpotent A; A² = 0 but A itself does not contract in every norm.
        let c = certify_fallback_with_margin(
            &DMatrix::zeros(2, 2),
            &b,
            &DMatrix::zeros(1, 2),
            &q,
            &r,
            0.05,
        )
        .unwrap();
        assert_abs_diff_eq!(*c.p0, DMatrix::identity(2, 2), epsilon = 1e-14);
        assert_abs_diff_eq!(c.rho0, 0.05, epsilon = 1e-14);
        assert!(c.verify(&DMatrix::zeros(2, 2)).is_ok());
        assert!(certify_fallback(&a, &b, &DMatrix::zeros(1, 2), &q, &r).is_ok());
    }

    #[test]
    fn certify_fallback_rejects_unstable() {
        let err = certify_fallback(
            &dmatrix![1.2],
            &dmatrix![1.0],
            &dmatrix![0.0],
            &SpdMatrix::identity(1),
            &SpdMatrix::identity(1),
        );
        assert!(matches!(err, Err(Error::Unstable { .. })));
    }

    #[test]
    fn lemma1_scalar_value() {
        let v = lemma1_ev_bound(
            &scalar_cert0(),
            &dmatrix![1.0],
            &SpdMatrix::identity(1),
            0.0,
        );
        assert_relative_eq!(v, 4.0 * 1.25 * (4.0 / 3.0) / 0.5625, max_relative = 1e-14);
        assert_relative_eq!(v, 11.851_851_851_851_85, max_relative = 1e-12);
        let w2 = SpdMatrix::from_diagonal(&[2.0]).unwrap();
        let v2 = lemma1_ev_bound(&scalar_cert0(), &dmatrix![1.0], &w2, 0.0);
        assert_relative_eq!(v2, 2.0 * v, max_relative = 1e-14);
        assert!(
            lemma1_ev_bound(
                &scalar_cert0(),
                &dmatrix![1.0],
                &SpdMatrix::identity(1),
                0.5
            ) > v
        );
    }

    #[test]
    fn theorem1_scalar_value() {
        let c = scalar_cert0();
        let b = dmatrix![1.0];
        let r = SpdMatrix::identity(1);
        let w = SpdMatrix::identity(1);
        let cap = theorem1_cost_cap(&c, &b, &r, &w, 1.0);
        let threshold_term = 10.0 * (4.0 / 3.0) / 0.5625 + 2.0;
        let free_term = 10.0 * (4.0 / 3.0) / 0.5625;
        assert_relative_eq!(cap, threshold_term + free_term, max_relative = 1e-14);
        assert_relative_eq!(cap, 49.407_407_407_407, max_relative = 1e-12);
        assert_relative_eq!(
            theorem1_cost_cap(&c, &b, &r, &w, 0.0),
            free_term,
            max_relative = 1e-14
        );
    }

    #[test]
    fn theorem2_example() {
        let t = theorem2_tail_constants(1.0, 1.0, 0.25).unwrap();
        assert_abs_diff_eq!(t.c1_tilde, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.c2_tilde, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(t.a_min, 4.0, epsilon = 1e-14);
        let t = theorem2_tail_constants(1.5, 0.7, 1e-12).unwrap();
        assert_relative_eq!(t.c1_tilde, 3.0, max_relative = 1e-9);
        assert_relative_eq!(t.c2_tilde, 0.7, max_relative = 1e-5);
        assert!(theorem2_tail_constants(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn theorem3_scalar_double_entry() {
        let inp = scalar_inputs(5.0);
        let t3 = theorem3_gaussian(&inp).unwrap();
        // W̃ = 1/(1 − a²) = 4/3 for the scalar fallback loop.
        let wt: f64 = 4.0 / 3.0;
        let p = 4.0 / 3.0;
        let rho: f64 = 0.26;
        let spread = wt * p * (1.0 / p);
        let a0 = (8.0 * spread).sqrt() / (1.0 - rho.powf(0.25));
        assert_relative_eq!(t3.a0, a0, max_relative = 1e-12);
        let e = |a: f64| {
            4.0 / (1.0 / rho.sqrt() - 1.0)
                * (-(1.0 - rho.powf(0.25)).powi(2) * a * a / (2.0 * spread)).exp()
        };
        assert_relative_eq!(t3.switch_prob_bound, e(5.0 / 0.1), max_relative = 1e-12);
        // 𝒬 with tr(W̃P) = 16/9, ‖P‖_{W̃⁻¹} = p·w̃ = 16/9, n² + 2n = 3.
        let q = (6.0 * rho * (16.0f64 / 9.0).powi(2) + (1.0 - rho) * 3.0 * (16.0f64 / 9.0).powi(2))
            / ((1.0 - rho) * (1.0 - rho * rho));
        assert_relative_eq!(t3.q_const, q, max_relative = 1e-12);
        // ‖P₀‖_P = 1 and ‖P₀‖_{W̃⁻¹} = 16/9.
        assert_relative_eq!(
            t3.fourth_moment_bound,
            8.0 * (q + 3.0 * (16.0f64 / 9.0).powi(2)),
            max_relative = 1e-12
        );
        assert!(t3.valid);
        assert!(
            theorem3_gaussian(&inp.with_threshold(a0 * 0.1))
                .unwrap()
                .valid
        );
        assert!(
            !theorem3_gaussian(&inp.with_threshold(a0 * 0.1 * 0.99))
                .unwrap()
                .valid
        );
    }

    #[test]
    fn escape_fn_is_gaussian_in_a() {
        let t3 = theorem3_gaussian(&scalar_inputs(1.0)).unwrap();
        let base = t3.escape.eval(0.0);
        for a in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let v = t3.escape.eval(a) * (t3.escape.rate * a * a).exp();
            assert_relative_eq!(v, base, max_relative = 1e-12);
        }
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let v = t3.escape.eval(i as f64 * 0.3);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn zero_gain_difference() {
        let sys = scalar_system();
        let cert = CommonLyapunovCertificate {
            p: SpdMatrix::from_diagonal(&[4.0 / 3.0]).unwrap(),
            rho: 0.26,
            dwell: 1,
        };
        let inp = GaussianBoundInputs::new(
            &sys,
            &dmatrix![0.0],
            &dmatrix![0.0],
            scalar_cert0(),
            cert,
            1.0,
        )
        .unwrap();
        assert_eq!(theorem3_gaussian(&inp).unwrap().switch_prob_bound, 0.0);
        assert_eq!(theorem4_gap_bound(&inp).unwrap().gap_bound, 0.0);
        assert!(matches!(
            corollary1_rate_constant(&inp),
            Err(Error::DegenerateGains)
        ));
    }

    #[test]
    fn rho_floor_is_applied() {
        let sys = scalar_system();
        let cert = CommonLyapunovCertificate {
            p: SpdMatrix::identity(1),
            rho: 0.1,
            dwell: 1,
        };
        let inp = GaussianBoundInputs::new(
            &sys,
            &dmatrix![0.0],
            &dmatrix![-0.1],
            scalar_cert0(),
            cert,
            1.0,
        )
        .unwrap();
        assert_eq!(inp.cert.rho, RHO_FLOOR);
    }

    #[test]
    fn gap_bound_monotone_and_vanishing() {
        let inp = scalar_inputs(1.0);
        let mut prev = f64::INFINITY;
        for i in 1..60 {
            let g = theorem4_gap_bound(&inp.with_threshold(i as f64 * 0.5))
                .unwrap()
                .gap_bound;
            assert!(g <= prev);
            prev = g;
        }
        assert!(
            theorem4_gap_bound(&inp.with_threshold(1e3))
                .unwrap()
                .gap_bound
                < 1e-300
        );
    }

    #[test]
    fn gap_constants_scalar() {
        let inp = scalar_inputs(1.0);
        let c = gap_constants(&inp).unwrap();
        // a₁ = 0.4, q₁ = 1.01: Σ 0.4^s = 5/3 (scalar similarity is trivial).
        assert_relative_eq!(c.series, 5.0 / 3.0, max_relative = 1e-10);
        assert!(c.series >= 5.0 / 3.0);
        let p = 4.0 / 3.0;
        assert_relative_eq!(
            c.c1,
            (p * (1.01 / p) / 0.74f64).sqrt(),
            max_relative = 1e-12
        );
        assert_relative_eq!(c.c2, 0.1 * (1.01 / p) * c.series, max_relative = 1e-12);
        assert_relative_eq!(c.c3, 0.01 * (3.0 / 4.0), max_relative = 1e-12);
    }

    #[test]
    fn series_tail_is_an_upper_bound() {
        // Non-normal A₁: ‖A₁^s‖ grows before decaying.
        let sys = LinearSystem::new(
            dmatrix![0.9, 5.0; 0.0, 0.9],
            dmatrix![0.0; 1.0],
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            SpdMatrix::identity(1),
        )
        .unwrap();
        let k0 = DMatrix::zeros(1, 2);
        let k1 = dmatrix![0.0, -0.2];
        let cert0 = certify_fallback(&sys.a, &sys.b, &k0, &sys.q, &sys.r).unwrap();
        let a1 = sys.closed_loop(&k1);
        let cert = linalg::find_common_lyapunov(&a1, &sys.closed_loop(&k0), 0.01, 10_000).unwrap();
        let inp = GaussianBoundInputs::new(&sys, &k0, &k1, cert0, cert, 1.0).unwrap();
        let c = gap_constants(&inp).unwrap();
        let exact: f64 = (0..5000)
            .map(|s| weighted_power_norm(&a1, &inp.q1, s).unwrap())
            .sum();
        assert!(c.series >= exact, "{} < {exact}", c.series);
        assert!(c.series <= exact * (1.0 + 1e-9), "{} vs {exact}", c.series);
    }

    #[test]
    fn gap_bound_rejects_unstable_primary() {
        let sys = scalar_system();
        let cert = CommonLyapunovCertificate {
            p: SpdMatrix::identity(1),
            rho: 0.5,
            dwell: 1,
        };
        let inp = GaussianBoundInputs::new(
            &sys,
            &dmatrix![0.0],
            &dmatrix![0.7],
            scalar_cert0(),
            cert,
            1.0,
        )
        .unwrap();
        assert!(matches!(
            theorem4_gap_bound(&inp),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn corollary1_scaling() {
        let sys = scalar_system();
        let cert = CommonLyapunovCertificate {
            p: SpdMatrix::from_diagonal(&[4.0 / 3.0]).unwrap(),
            rho: 0.26,
            dwell: 1,
        };
        let one = GaussianBoundInputs::new(
            &sys,
            &dmatrix![0.0],
            &dmatrix![-0.1],
            scalar_cert0(),
            cert.clone(),
            1.0,
        )
        .unwrap();
        let two = GaussianBoundInputs::new(
            &sys,
            &dmatrix![0.0],
            &dmatrix![-0.2],
            scalar_cert0(),
            cert,
            1.0,
        )
        .unwrap();
        let c1 = corollary1_rate_constant(&one).unwrap();
        let c2 = corollary1_rate_constant(&two).unwrap();
        assert!(c1 > 0.0);
        assert_relative_eq!(c1 / c2, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn mu4tilde_examples() {
        let v = heavytail_mu4tilde(&scalar_cert0(), &SpdMatrix::identity(1), 3.0);
        let first = (16.0 / 9.0) * 3.0 / 0.9375;
        let second = 2.0 * 0.25 * (4.0 / 3.0) / (0.9375 * 0.75);
        assert_relative_eq!(v, first + second, max_relative = 1e-14);
        assert_relative_eq!(v, 6.637_037_037_037, max_relative = 1e-12);
        let dead = StabilityCertificate {
            p0: SpdMatrix::from_diagonal(&[2.0]).unwrap(),
            rho0: 0.0,
        };
        assert_relative_eq!(
            heavytail_mu4tilde(&dead, &SpdMatrix::identity(1), 3.0),
            12.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn theorem5_scaling_and_double_entry() {
        let inp = HeavyTailBoundInputs::new(scalar_inputs(2.0), 3.0).unwrap();
        let t5 = theorem5_heavytail(&inp).unwrap();
        assert_relative_eq!(
            t5.tail.eval(4.0),
            t5.tail.eval(2.0) / 16.0,
            max_relative = 1e-14
        );
        let doubled = theorem5_heavytail(&HeavyTailBoundInputs {
            base: inp.base.with_threshold(4.0),
            mu4: 3.0,
        })
        .unwrap();
        assert_relative_eq!(
            doubled.switch_prob_raw,
            t5.switch_prob_raw / 16.0,
            max_relative = 1e-14
        );

        let rho: f64 = 0.26;
        let mu4t = 6.637_037_037_037_037;
        // ‖P‖_{P₀} = 1, tr(W̃P) = 16/9, ‖P₀‖_P = 1.
        let q_tilde = (6.0 * rho * (16.0f64 / 9.0).powi(2) + (1.0 - rho) * mu4t)
            / ((1.0 - rho) * (1.0 - rho * rho));
        assert_relative_eq!(t5.q_tilde, q_tilde, max_relative = 1e-12);
        assert_relative_eq!(
            t5.fourth_moment_bound,
            8.0 * (q_tilde + mu4t),
            max_relative = 1e-12
        );
        let coef = mu4t / ((1.0 - rho.powf(0.25)).powi(4) * (1.0 - rho));
        assert_relative_eq!(
            t5.switch_prob_raw,
            coef / 20.0f64.powi(4),
            max_relative = 1e-12
        );
        assert!(t5.switch_prob_bound <= 1.0);
    }

    #[test]
    fn heavy_tail_rejects_small_mu4() {
        assert!(HeavyTailBoundInputs::new(scalar_inputs(1.0), 0.5).is_err());
    }

    #[test]
    fn theorem6_decays_like_inverse_threshold() {
        let inp = HeavyTailBoundInputs::new(scalar_inputs(1.0), 3.0).unwrap();
        let ratios: Vec<f64> = [1e3, 1e4, 1e5]
            .iter()
            .map(|&m| {
                let b = HeavyTailBoundInputs {
                    base: inp.base.with_threshold(m),
                    mu4: 3.0,
                };
                theorem6_gap_bound(&b).unwrap().gap_bound * m
            })
            .collect();
        assert_relative_eq!(ratios[1], ratios[2], max_relative = 0.01);
        assert_relative_eq!(ratios[0], ratios[2], max_relative = 0.1);
    }

    #[test]
    fn report_fields_are_stable() {
        let sys = scalar_system();
        let cert = CommonLyapunovCertificate {
            p: SpdMatrix::from_diagonal(&[4.0 / 3.0]).unwrap(),
            rho: 0.26,
            dwell: 1,
        };
        let rep = BoundReport::evaluate(
            &sys,
            &dmatrix![0.0],
            &dmatrix![-0.1],
            &scalar_cert0(),
            Some(&cert),
            1.0,
            3.0,
            false,
        )
        .unwrap();
        let kv = rep.to_key_value();
        for name in [
            "cost_cap",
            "fourth_moment_bound",
            "switch_prob_bound",
            "gap_bound",
            "a0",
            "rho0",
            "rho",
            "t",
            "c_rate",
            "C1",
            "C2",
            "C3",
            "C4",
        ] {
            assert!(
                kv.lines().any(|l| l.starts_with(&format!("{name} = "))),
                "missing {name}"
            );
        }
        assert_eq!(
            BoundReport::csv_header().split(',').count(),
            rep.csv_row().split(',').count()
        );

        let uncert = BoundReport::evaluate(
            &sys,
            &dmatrix![0.0],
            &dmatrix![-0.1],
            &scalar_cert0(),
            None,
            1.0,
            3.0,
            false,
        )
        .unwrap();
        assert!(uncert.to_key_value().contains("gap_bound = nan"));
        assert!(!uncert.is_certified());
    }
}
