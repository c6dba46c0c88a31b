//! The switching safeguard: apply the primary gain `K₁` unless the input
//! deviation from the fallback gain `K₀` reaches the threshold `M`, in which
//! case hold `K₀` for `t` steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Gains and hyper-parameters of the switching controller.
///
/// A threshold of `f64::INFINITY` disables switching entirely, which is how
/// the unguarded `u = K₁x` baseline is expressed.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    k0: DMatrix<f64>,
    k1: DMatrix<f64>,
    kdiff: DMatrix<f64>,
    threshold: f64,
    dwell: usize,
}

impl ControllerParams {
    pub fn new(k0: DMatrix<f64>, k1: DMatrix<f64>, threshold: f64, dwell: usize) -> Result<Self> {
        if k0.shape() != k1.shape() {
            return Err(Error::DimensionMismatch(format!(
                "K0 is {:?} but K1 is {:?}",
                k0.shape(),
                k1.shape()
            )));
        }
        if threshold.is_nan() || threshold < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "threshold must be >= 0, got {threshold}"
            )));
        }
        if dwell == 0 {
            return Err(Error::InvalidArgument("dwell time must be >= 1".into()));
        }
        let kdiff = &k1 - &k0;
        Ok(Self {
            k0,
            k1,
            kdiff,
            threshold,
            dwell,
        })
    }

    pub fn k0(&self) -> &DMatrix<f64> {
        &self.k0
    }

    pub fn k1(&self) -> &DMatrix<f64> {
        &self.k1
    }

    /// `K₁ − K₀`.
    pub fn gain_difference(&self) -> &DMatrix<f64> {
        &self.kdiff
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn dwell(&self) -> usize {
        self.dwell
    }

    pub fn state_dim(&self) -> usize {
        self.k0.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.k0.nrows()
    }
}

/// Result of one controller evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchOutput {
    pub u: DVector<f64>,
    pub xi_next: usize,
    /// True when the `K₀` branch produced `u` (the event `u_k ≠ K₁x_k`).
    pub fallback_active: bool,
}

/// Slice-level decision shared by [`switch_step`] and the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub xi_next: usize,
    pub fallback_active: bool,
}

/// Dense matrix-vector product `out = m x` over nalgebra's column-major storage.
#[inline]
pub(crate) fn matvec_into(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    let data = m.as_slice();
    out[..rows].fill(0.0);
    for j in 0..cols {
        let xj = x[j];
        let col = &data[j * rows..(j + 1) * rows];
        for i in 0..rows {
            out[i] += col[i] * xj;
        }
    }
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl ControllerParams {
    /// Evaluates the switching rule on raw slices; `u` and `scratch` must have
    /// length `m`. Used by the simulator's inner loop.
    #[inline]
    pub fn decide_into(
        &self,
        x: &[f64],
        xi: usize,
        u: &mut [f64],
        scratch: &mut [f64],
    ) -> Decision {
        let mut xi = xi;
        let fallback = if xi > 0 {
            true
        } else {
            matvec_into(&self.kdiff, x, scratch);
            if norm(scratch) >= self.threshold {
                xi = self.dwell;
                true
            } else {
                false
            }
        };
        let gain = if fallback { &self.k0 } else { &self.k1 };
        matvec_into(gain, x, u);
        Decision {
            xi_next: xi.saturating_sub(1),
            fallback_active: fallback,
        }
    }
}

/// One evaluation of the switching controller at state `x` with counter `xi`.
pub fn switch_step(x: &DVector<f64>, xi: usize, params: &ControllerParams) -> Result<SwitchOutput> {
    if x.len() != params.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state has length {} but gains expect {}",
            x.len(),
            params.state_dim()
        )));
    }
    if xi > params.dwell {
        return Err(Error::InvalidArgument(format!(
            "counter {xi} exceeds dwell time {}",
            params.dwell
        )));
    }
    let m = params.input_dim();
    let mut u = DVector::zeros(m);
    let mut scratch = vec![0.0; m];
    let d = params.decide_into(x.as_slice(), xi, u.as_mut_slice(), &mut scratch);
    Ok(SwitchOutput {
        u,
        xi_next: d.xi_next,
        fallback_active: d.fallback_active,
    })
}

/// Plain linear feedback `u = Kx`.
pub fn linear_step(x: &DVector<f64>, k: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.len() != k.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "state has length {} but gain has {} columns",
            x.len(),
            k.ncols()
        )));
    }
    let mut u = DVector::zeros(k.nrows());
    matvec_into(k, x.as_slice(), u.as_mut_slice());
    Ok(u)
}
