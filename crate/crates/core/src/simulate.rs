//! Seeded closed-loop rollouts and the Monte-Carlo estimators built on them.
//!
//! Noise for trajectory `i` of a run with master seed `s` comes from a ChaCha8
//! stream keyed by `(s, i)`. The draw sequence does not depend on the
//! controller, so a switched run and its unguarded baseline see identical
//! noise, and results do not depend on how trajectories are spread across
//! worker threads.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, SpdMatrix};
use crate::policy::{matvec_into, ControllerParams};

/// States with any entry above this magnitude end the rollout.
pub const EXPLOSION_LIMIT: f64 = 1e15;

/// Plant `x⁺ = Ax + Bu + w` with noise covariance `W` and stage cost `xᵀQx + uᵀRu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub w: SpdMatrix,
    pub q: SpdMatrix,
    pub r: SpdMatrix,
}

impl LinearSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: SpdMatrix,
        q: SpdMatrix,
        r: SpdMatrix,
    ) -> Result<Self> {
        linalg::check_square(&a, "A")?;
        let n = a.nrows();
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "B is {}x{}, expected {n}xm",
                b.nrows(),
                b.ncols()
            )));
        }
        if w.dim() != n || q.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "W is {0}x{0} and Q is {1}x{1}, expected {n}x{n}",
                w.dim(),
                q.dim()
            )));
        }
        if r.dim() != b.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "R is {0}x{0}, expected {1}x{1}",
                r.dim(),
                b.ncols()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("A and B must be finite".into()));
        }
        Ok(Self { a, b, w, q, r })
    }

    /// Random plant with `ρ(A) = radius`, Gaussian `B`, and `W = Q = I`, `R = I`.
    pub fn random_stable(seed: u64, n: usize, m: usize, radius: f64) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw =
            |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        let a0: DMatrix<f64> = draw(n, n);
        let b: DMatrix<f64> = draw(n, m);
        let rad = linalg::spectral_radius(&a0);
        let a = if rad > 0.0 { a0 * (radius / rad) } else { a0 };
        Self::new(
            a,
            b,
            SpdMatrix::identity(n),
            SpdMatrix::identity(n),
            SpdMatrix::identity(m),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// `A + BK`.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * k
    }

    /// `Q + KᵀRK`.
    pub fn closed_loop_weight(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::symmetrize(&(self.q.as_matrix() + k.transpose() * self.r.as_matrix() * k))
    }

    /// Stationary cost `tr(W P_K)` of `u = Kx`, where `P_K` solves
    /// `(A+BK)ᵀP_K(A+BK) − P_K + Q + KᵀRK = 0`.
    pub fn stationary_cost(&self, k: &DMatrix<f64>) -> Result<f64> {
        let pk = linalg::solve_discrete_lyapunov(
            &self.closed_loop(k),
            &SpdMatrix::new(self.closed_loop_weight(k))?,
        )?;
        Ok((self.w.as_matrix() * pk.as_matrix()).trace())
    }

    /// Expected value of the time-averaged cost over `horizon` steps from
    /// `x₀ = 0` under `u = Kx`, by propagating the state covariance.
    pub fn finite_horizon_cost(&self, k: &DMatrix<f64>, horizon: usize) -> f64 {
        let acl = self.closed_loop(k);
        let qk = self.closed_loop_weight(k);
        let n = self.state_dim();
        let mut sigma = DMatrix::<f64>::zeros(n, n);
        let mut total = 0.0;
        for _ in 0..horizon {
            total += (&qk * &sigma).trace();
            sigma = &acl * sigma * acl.transpose() + self.w.as_matrix();
        }
        total / horizon as f64
    }
}

/// Distribution of the unit-variance components before shaping by `W^{1/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    Gaussian,
    /// Student-t with the given degrees of freedom, rescaled to unit variance.
    StudentT {
        dof: f64,
    },
    /// Laplace components with unit variance.
    Laplace,
    /// Equal mixture of Uniform(−√3, √3) and Rademacher components; bounded, unit variance.
    BoundedMixture,
}

impl NoiseKind {
    /// `E z⁴` of one standardized component.
    pub fn component_kurtosis(&self) -> f64 {
        match *self {
            NoiseKind::Gaussian => 3.0,
            NoiseKind::StudentT { dof } => 3.0 + 6.0 / (dof - 4.0),
            NoiseKind::Laplace => 6.0,
            NoiseKind::BoundedMixture => 0.5 * 9.0 / 5.0 + 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::StudentT { .. } => "student_t",
            NoiseKind::Laplace => "laplace",
            NoiseKind::BoundedMixture => "bounded_mixture",
        }
    }
}

/// i.i.d. zero-mean noise `w = S z` with `S = W^{1/2}` and independent
/// unit-variance components `z_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    kind: NoiseKind,
    shaping: DMatrix<f64>,
    mu4: f64,
    student: Option<StudentT<f64>>,
}

impl NoiseModel {
    /// `covariance` may be singular (including zero); it must be symmetric PSD.
    pub fn new(kind: NoiseKind, covariance: &DMatrix<f64>) -> Result<Self> {
        linalg::check_square(covariance, "noise covariance")?;
        let student = match kind {
            NoiseKind::StudentT { dof } => {
                if !(dof >= 5.0) {
                    return Err(Error::InvalidDof(dof));
                }
                Some(StudentT::new(dof).map_err(|e| Error::InvalidArgument(e.to_string()))?)
            }
            _ => None,
        };
        let sym = linalg::symmetrize(covariance);
        let eig = nalgebra::linalg::SymmetricEigen::new(sym.clone());
        if eig.eigenvalues.min() < -linalg::TAU_PSD * sym.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite {
                min_eig: eig.eigenvalues.min(),
            });
        }
        let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let shaping =
            linalg::symmetrize(&(&eig.eigenvectors * root * eig.eigenvectors.transpose()));

        // E‖Sz‖⁴ = (tr W)² + 2 tr(W²) + (κ − 3) Σ_i G_ii² with G = SᵀS = W.
        let g = shaping.transpose() * &shaping;
        let kappa = kind.component_kurtosis();
        let diag_sq: f64 = (0..g.nrows()).map(|i| g[(i, i)] * g[(i, i)]).sum();
        let mu4 = g.trace().powi(2) + 2.0 * (&g * &g).trace() + (kappa - 3.0) * diag_sq;
        Ok(Self {
            kind,
            shaping,
            mu4,
            student,
        })
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.shaping.nrows()
    }

    /// `E‖w‖⁴`.
    pub fn fourth_moment(&self) -> f64 {
        self.mu4
    }

    pub fn shaping(&self) -> &DMatrix<f64> {
        &self.shaping
    }

    fn unit_component(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => StandardNormal.sample(rng),
            NoiseKind::StudentT { dof } => {
                let t: f64 = self
                    .student
                    .as_ref()
                    .expect("student-t sampler")
                    .sample(rng);
                t * ((dof - 2.0) / dof).sqrt()
            }
            NoiseKind::Laplace => {
                // Inverse CDF with scale 1/√2 (variance 2b² = 1).
                let u: f64 = rng.random::<f64>() - 0.5;
                let mag = -(1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln();
                u.signum() * mag * std::f64::consts::FRAC_1_SQRT_2
            }
            NoiseKind::BoundedMixture => {
                if rng.random::<bool>() {
                    (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt()
                } else if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Noise source for one trajectory: ChaCha8 keyed by `(seed, stream)`.
pub struct NoiseStream<'a> {
    model: &'a NoiseModel,
    rng: ChaCha8Rng,
    z: Vec<f64>,
}

impl<'a> NoiseStream<'a> {
    pub fn new(model: &'a NoiseModel, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            model,
            rng,
            z: vec![0.0; model.dim()],
        }
    }

    pub fn next_into(&mut self, out: &mut [f64]) {
        for i in 0..self.z.len() {
            self.z[i] = self.model.unit_component(&mut self.rng);
        }
        matvec_into(&self.model.shaping, &self.z, out);
    }
}

/// `count` i.i.d. draws; identical to the noise consumed by `rollout(.., seed)`.
pub fn sample_noise(model: &NoiseModel, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut stream = NoiseStream::new(model, seed, 0);
    (0..count)
        .map(|_| {
            let mut w = DVector::zeros(model.dim());
            stream.next_into(w.as_mut_slice());
            w
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    Switching(ControllerParams),
    Linear(DMatrix<f64>),
}

impl Controller {
    fn input_dim(&self) -> usize {
        match self {
            Controller::Switching(p) => p.input_dim(),
            Controller::Linear(k) => k.nrows(),
        }
    }

    fn state_dim(&self) -> usize {
        match self {
            Controller::Switching(p) => p.state_dim(),
            Controller::Linear(k) => k.ncols(),
        }
    }
}

/// What the kernel reports for each completed step.
pub struct StepView<'s> {
    pub k: usize,
    pub x: &'s [f64],
    pub u: &'s [f64],
    pub fallback: bool,
    pub stage_cost: f64,
}

/// Runs `x₀ = 0, x_{k+1} = Ax_k + Bu_k + w_k`, calling `on_step` after each
/// input is chosen. Returns the final state and the step at which the state
/// exceeded [`EXPLOSION_LIMIT`], if it did.
fn run_kernel(
    sys: &LinearSystem,
    ctrl: &Controller,
    noise: &NoiseModel,
    horizon: usize,
    seed: u64,
    stream: u64,
    mut on_step: impl FnMut(StepView<'_>),
) -> Result<(Vec<f64>, Option<usize>)> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    if ctrl.state_dim() != n || ctrl.input_dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "controller maps R^{} -> R^{}, plant has n = {n}, m = {m}",
            ctrl.state_dim(),
            ctrl.input_dim()
        )));
    }
    if noise.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "noise has dimension {}, plant has {n}",
            noise.dim()
        )));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let mut noise_stream = NoiseStream::new(noise, seed, stream);
    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut bu = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut qx = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut ru = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    let mut xi = 0usize;

    for k in 0..horizon {
        let fallback = match ctrl {
            Controller::Switching(p) => {
                let d = p.decide_into(&x, xi, &mut u, &mut scratch);
                xi = d.xi_next;
                d.fallback_active
            }
            Controller::Linear(gain) => {
                matvec_into(gain, &x, &mut u);
                false
            }
        };
        matvec_into(&sys.q, &x, &mut qx);
        matvec_into(&sys.r, &u, &mut ru);
        let stage_cost = dot(&x, &qx) + dot(&u, &ru);
        on_step(StepView {
            k,
            x: &x,
            u: &u,
            fallback,
            stage_cost,
        });

        noise_stream.next_into(&mut w);
        matvec_into(&sys.a, &x, &mut next);
        matvec_into(&sys.b, &u, &mut bu);
        for i in 0..n {
            next[i] += bu[i] + w[i];
        }
        std::mem::swap(&mut x, &mut next);
        if x.iter().any(|v| !(v.abs() <= EXPLOSION_LIMIT)) {
            return Ok((x, Some(k + 1)));
        }
    }
    Ok((x, None))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A stored closed-loop rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_0 .. x_T` (shorter if the run exploded; the last entry is the offending state).
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub fallback_flags: Vec<bool>,
    pub stage_costs: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
    pub exploded_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn exploded(&self) -> bool {
        self.exploded_at.is_some()
    }
}

/// Single trajectory with noise stream 0 of `seed`.
pub fn rollout(
    sys: &LinearSystem,
    ctrl: &Controller,
    noise: &NoiseModel,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    rollout_stream(sys, ctrl, noise, horizon, seed, 0)
}

pub fn rollout_stream(
    sys: &LinearSystem,
    ctrl: &Controller,
    noise: &NoiseModel,
    horizon: usize,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon);
    let mut fallback_flags = Vec::with_capacity(horizon);
    let mut stage_costs = Vec::with_capacity(horizon);
    let (last, exploded_at) = run_kernel(sys, ctrl, noise, horizon, seed, stream, |s| {
        states.push(DVector::from_column_slice(s.x));
        inputs.push(DVector::from_column_slice(s.u));
        fallback_flags.push(s.fallback);
        stage_costs.push(s.stage_cost);
    })?;
    states.push(DVector::from_vec(last));
    Ok(Trajectory {
        states,
        inputs,
        fallback_flags,
        stage_costs,
        seed,
        stream,
        exploded_at,
    })
}

/// `(1/T) Σ_k stage_cost_k`; infinite for an exploded trajectory.
pub fn empirical_cost(traj: &Trajectory) -> f64 {
    if traj.exploded() {
        return f64::INFINITY;
    }
    if traj.stage_costs.is_empty() {
        return 0.0;
    }
    traj.stage_costs.iter().sum::<f64>() / traj.stage_costs.len() as f64
}

/// Fraction of steps, over all trajectories, on which the fallback gain was applied.
pub fn empirical_switch_frequency(trajs: &[Trajectory]) -> f64 {
    let total: usize = trajs.iter().map(|t| t.fallback_flags.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let active: usize = trajs
        .iter()
        .map(|t| t.fallback_flags.iter().filter(|f| **f).count())
        .sum();
    active as f64 / total as f64
}

/// Average of `‖x_k‖⁴_{P₀}` over steps `k ≥ T/2` of every trajectory.
pub fn empirical_weighted_fourth_moment(trajs: &[Trajectory], p0: &SpdMatrix) -> f64 {
    let from = trajs.iter().map(|t| t.len() / 2).min().unwrap_or(0);
    empirical_weighted_fourth_moment_from(trajs, p0, from)
}

pub fn empirical_weighted_fourth_moment_from(
    trajs: &[Trajectory],
    p0: &SpdMatrix,
    from: usize,
) -> f64 {
    let mut values = Vec::new();
    for t in trajs {
        for x in t.states.iter().take(t.len()).skip(from) {
            let v = p0.quad_form(x);
            values.push(v * v);
        }
    }
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(&values) / values.len() as f64
}

/// Pairwise summation with a fixed split, so the result depends only on the input order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl MeanEstimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let count = v.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                count,
            };
        }
        let mean = pairwise_sum(v) / count as f64;
        let stderr = if count > 1 {
            let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
            (pairwise_sum(&dev) / (count - 1) as f64 / count as f64).sqrt()
        } else {
            f64::NAN
        };
        Self {
            mean,
            stderr,
            count,
        }
    }
}

/// Monte-Carlo run settings. `workers = None` uses the global rayon pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    pub horizon: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub workers: Option<usize>,
}

/// Optional per-trajectory statistics collected during a Monte-Carlo run.
#[derive(Debug, Clone, Default)]
pub struct SummaryOptions {
    /// Accumulate `‖x_k‖⁴_{P₀}` with this weight for `k ≥ fourth_moment_from`.
    pub fourth_moment_weight: Option<SpdMatrix>,
    /// Defaults to `T/2`.
    pub fourth_moment_from: Option<usize>,
    /// Record the first step whose running average cost exceeds this value.
    pub running_cost_cap: Option<f64>,
}

/// Per-trajectory reduction of a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    /// Time-averaged cost over the horizon; infinite if the run exploded.
    pub cost: f64,
    pub steps: usize,
    pub fallback_steps: usize,
    pub fourth_sum: f64,
    pub fourth_count: usize,
    pub exploded_at: Option<usize>,
    pub cap_exceeded_at: Option<usize>,
}

pub fn summarize_stream(
    sys: &LinearSystem,
    ctrl: &Controller,
    noise: &NoiseModel,
    horizon: usize,
    seed: u64,
    stream: u64,
    opts: &SummaryOptions,
) -> Result<RunSummary> {
    let from = opts.fourth_moment_from.unwrap_or(horizon / 2);
    let weight = opts
        .fourth_moment_weight
        .as_ref()
        .map(|p| p.as_matrix().clone());
    let mut px = vec![0.0; sys.state_dim()];
    let mut cost_sum = 0.0;
    let mut steps = 0usize;
    let mut fallback_steps = 0usize;
    let mut fourth_sum = 0.0;
    let mut fourth_count = 0usize;
    let mut cap_exceeded_at = None;
    let (_, exploded_at) = run_kernel(sys, ctrl, noise, horizon, seed, stream, |s| {
        cost_sum += s.stage_cost;
        steps += 1;
        if s.fallback {
            fallback_steps += 1;
        }
        if let Some(w) = &weight {
            if s.k >= from {
                matvec_into(w, s.x, &mut px);
                let v = dot(s.x, &px);
                fourth_sum += v * v;
                fourth_count += 1;
            }
        }
        if let Some(cap) = opts.running_cost_cap {
            if cap_exceeded_at.is_none() && cost_sum / steps as f64 > cap {
                cap_exceeded_at = Some(s.k);
            }
        }
    })?;
    let cost = if exploded_at.is_some() {
        f64::INFINITY
    } else {
        cost_sum / horizon as f64
    };
    if exploded_at.is_some() && opts.running_cost_cap.is_some() && cap_exceeded_at.is_none() {
        // The state left the representable range, so the running average is past any finite cap.
        cap_exceeded_at = exploded_at;
    }
    Ok(RunSummary {
        cost,
        steps,
        fallback_steps,
        fourth_sum,
        fourth_count,
        exploded_at,
        cap_exceeded_at,
    })
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Summaries of `n_traj` trajectories, in stream order.
pub fn monte_carlo_summaries(
    sys: &LinearSystem,
    ctrl: &Controller,
    noise: &NoiseModel,
    cfg: &McConfig,
    opts: &SummaryOptions,
) -> Result<Vec<RunSummary>> {
    if cfg.n_traj < 2 {
        return Err(Error::InvalidArgument(
            "need at least two trajectories".into(),
        ));
    }
    with_workers(cfg.workers, || {
        (0..cfg.n_traj as u64)
            .into_par_iter()
            .map(|i| summarize_stream(sys, ctrl, noise, cfg.horizon, cfg.seed, i, opts))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Cost estimate over non-exploded trajectories, with the number that exploded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub mean: f64,
    pub stderr: f64,
    pub n_used: usize,
    pub explosions: usize,
}

pub fn cost_report(summaries: &[RunSummary]) -> CostReport {
    let costs: Vec<f64> = summaries
        .iter()
        .filter(|s| s.exploded_at.is_none())
        .map(|s| s.cost)
        .collect();
    let est = MeanEstimate::from_samples(&costs);
    CostReport {
        mean: est.mean,
        stderr: est.stderr,
        n_used: costs.len(),
        explosions: summaries.len() - costs.len(),
    }
}

pub fn monte_carlo_cost(
    sys: &LinearSystem,
    ctrl: &Controller,
    noise: &NoiseModel,
    cfg: &McConfig,
) -> Result<CostReport> {
    let summaries = monte_carlo_summaries(sys, ctrl, noise, cfg, &SummaryOptions::default())?;
    Ok(cost_report(&summaries))
}

/// Fraction of fallback steps across summaries.
pub fn switch_frequency(summaries: &[RunSummary]) -> f64 {
    let steps: usize = summaries.iter().map(|s| s.steps).sum();
    if steps == 0 {
        return 0.0;
    }
    summaries.iter().map(|s| s.fallback_steps).sum::<usize>() as f64 / steps as f64
}

/// Per-trajectory fallback fractions, for standard errors on the switch frequency.
pub fn switch_fraction_estimate(summaries: &[RunSummary]) -> MeanEstimate {
    let v: Vec<f64> = summaries
        .iter()
        .map(|s| {
            if s.steps == 0 {
                0.0
            } else {
                s.fallback_steps as f64 / s.steps as f64
            }
        })
        .collect();
    MeanEstimate::from_samples(&v)
}

/// Per-trajectory weighted fourth moments (trajectories with no samples are skipped).
pub fn fourth_moment_estimate(summaries: &[RunSummary]) -> MeanEstimate {
    let v: Vec<f64> = summaries
        .iter()
        .filter(|s| s.fourth_count > 0)
        .map(|s| s.fourth_sum / s.fourth_count as f64)
        .collect();
    MeanEstimate::from_samples(&v)
}

/// Paired difference `cost(switched) − cost(baseline)` over trajectories that
/// share noise streams. Exploded pairs are skipped.
pub fn paired_gap(switched: &[RunSummary], baseline: &[RunSummary]) -> MeanEstimate {
    let v: Vec<f64> = switched
        .iter()
        .zip(baseline)
        .filter(|(s, b)| s.exploded_at.is_none() && b.exploded_at.is_none())
        .map(|(s, b)| s.cost - b.cost)
        .collect();
    MeanEstimate::from_samples(&v)
}

/// Which update of the block-collapsed system applies at a subsequence index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsequenceLabel {
    /// `K₁` applied: advance one step with `A + BK₁`.
    Primary,
    /// Switch triggered: advance `t` steps with `(A + BK₀)ᵗ`.
    FallbackBlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subsequence {
    pub indices: Vec<usize>,
    pub labels: Vec<SubsequenceLabel>,
}

/// Indices `i(0) = 0`, `i(j+1) = i(j) + 1` after a primary step and
/// `i(j) + t` after a trigger, restricted to `i(j) < T`.
pub fn transformed_subsequence(traj: &Trajectory, dwell: usize) -> Result<Subsequence> {
    if dwell == 0 {
        return Err(Error::InvalidArgument("dwell time must be >= 1".into()));
    }
    let flags = &traj.fallback_flags;
    let horizon = flags.len();
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    let mut i = 0;
    while i < horizon {
        indices.push(i);
        if flags[i] {
            let end = (i + dwell).min(horizon);
            if let Some(bad) = (i..end).find(|&k| !flags[k]) {
                return Err(Error::InconsistentDwell { dwell, step: bad });
            }
            labels.push(SubsequenceLabel::FallbackBlock);
            i += dwell;
        } else {
            labels.push(SubsequenceLabel::Primary);
            i += 1;
        }
    }
    Ok(Subsequence { indices, labels })
}

/// Scalar sequences with a known envelope `P(X_i ≥ a) ≤ C₁ exp(−C₂a²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailSource {
    /// i.i.d. N(0, 1): `P(X ≥ a) ≤ ½ exp(−a²/2)`.
    IidGaussian,
    /// Stationary AR(1) with N(0, 1) marginals and lag-one correlation `phi`.
    Ar1Gaussian { phi: f64 },
    /// i.i.d. ±1: `P(X ≥ a) ≤ exp(−a²/2)`.
    IidRademacher,
    /// Norm of an i.i.d. standard Gaussian vector: `P(‖z‖ ≥ a) ≤ 2d exp(−a²/(2d))`.
    GaussianNorm { dim: usize },
}

impl TailSource {
    /// `(C₁, C₂)`.
    pub fn envelope(&self) -> (f64, f64) {
        match *self {
            TailSource::IidGaussian | TailSource::Ar1Gaussian { .. } => (0.5, 0.5),
            TailSource::IidRademacher => (1.0, 0.5),
            TailSource::GaussianNorm { dim } => (2.0 * dim as f64, 0.5 / dim as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailCurve {
    pub a: Vec<f64>,
    pub prob: Vec<f64>,
    pub n_samples: usize,
}

const TAIL_CHUNK: usize = 8192;

/// Empirical `P(S_k ≥ a)` for `S_k = Σ_{i=0}^k ϱ^{k−i} X_i` over `a_grid`.
pub fn exp_weighted_sum_tail_experiment(
    varrho: f64,
    source: TailSource,
    k: usize,
    n_samples: usize,
    a_grid: &[f64],
    seed: u64,
) -> Result<TailCurve> {
    if !(varrho > 0.0 && varrho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < varrho < 1, got {varrho}"
        )));
    }
    if let TailSource::Ar1Gaussian { phi } = source {
        if !(phi.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "AR(1) coefficient must satisfy |phi| < 1, got {phi}"
            )));
        }
    }
    let chunks = n_samples.div_ceil(TAIL_CHUNK);
    let counts: Vec<Vec<usize>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = TAIL_CHUNK.min(n_samples - c * TAIL_CHUNK);
            let mut counts = vec![0usize; a_grid.len()];
            for _ in 0..len {
                let s = weighted_sum_sample(varrho, source, k, &mut rng);
                for (cnt, a) in counts.iter_mut().zip(a_grid) {
                    if s >= *a {
                        *cnt += 1;
                    }
                }
            }
            counts
        })
        .collect();
    let prob = (0..a_grid.len())
        .map(|j| counts.iter().map(|c| c[j]).sum::<usize>() as f64 / n_samples as f64)
        .collect();
    Ok(TailCurve {
        a: a_grid.to_vec(),
        prob,
        n_samples,
    })
}

fn weighted_sum_sample(varrho: f64, source: TailSource, k: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut s = 0.0;
    let mut prev: f64 = StandardNormal.sample(rng);
    for i in 0..=k {
        let x = match source {
            TailSource::IidGaussian => StandardNormal.sample(rng),
            TailSource::Ar1Gaussian { phi } => {
                if i > 0 {
                    let e: f64 = StandardNormal.sample(rng);
                    prev = phi * prev + (1.0 - phi * phi).sqrt() * e;
                }
                prev
            }
            TailSource::IidRademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            TailSource::GaussianNorm { dim } => (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * z
                })
                .sum::<f64>()
                .sqrt(),
        };
        s = varrho * s + x;
    }
    s
}

/// Writes a trajectory as CSV: `[trajectory,]k,x_1..x_n,u_1..u_m,fallback_flag,stage_cost`.
pub fn write_trajectory_csv<W: Write>(
    out: &mut W,
    traj: &Trajectory,
    trajectory_id: Option<usize>,
    header: bool,
) -> io::Result<()> {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.inputs.first().map_or(0, |u| u.len());
    if header {
        let mut cols: Vec<String> = Vec::new();
        if trajectory_id.is_some() {
            cols.push("trajectory".into());
        }
        cols.push("k".into());
        cols.extend((1..=n).map(|i| format!("x_{i}")));
        cols.extend((1..=m).map(|i| format!("u_{i}")));
        cols.push("fallback_flag".into());
        cols.push("stage_cost".into());
        writeln!(out, "{}", cols.join(","))?;
    }
    for k in 0..traj.len() {
        let mut row = String::new();
        if let Some(id) = trajectory_id {
            row.push_str(&format!("{id},"));
        }
        row.push_str(&k.to_string());
        for v in traj.states[k].iter().chain(traj.inputs[k].iter()) {
            row.push_str(&format!(",{v:e}"));
        }
        row.push_str(&format!(
            ",{},{:e}",
            u8::from(traj.fallback_flags[k]),
            traj.stage_costs[k]
        ));
        writeln!(out, "{row}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn scalar_system(a: f64, b: f64) -> LinearSystem {
        LinearSystem::new(
            dmatrix![a],
            dmatrix![b],
            SpdMatrix::identity(1),
            SpdMatrix::identity(1),
            SpdMatrix::identity(1),
        )
        .unwrap()
    }

    fn gaussian(n: usize) -> NoiseModel {
        NoiseModel::new(NoiseKind::Gaussian, &DMatrix::identity(n, n)).unwrap()
    }

    #[test]
    fn gaussian_covariance_matches() {
        let w = dmatrix![2.0, 0.5; 0.5, 1.0];
        let model = NoiseModel::new(NoiseKind::Gaussian, &w).unwrap();
        let draws = sample_noise(&model, 1_000_000, 11);
        let mut cov = DMatrix::zeros(2, 2);
        for d in &draws {
            cov += d * d.transpose();
        }
        cov /= draws.len() as f64;
        for (c, e) in cov.iter().zip(w.iter()) {
            assert!((c - e).abs() < 0.01 * w.amax(), "{cov} vs {w}");
        }
    }

    #[test]
    fn identity_covariance_within_one_percent() {
        let draws = sample_noise(&gaussian(3), 1_000_000, 5);
        let mut cov = DMatrix::zeros(3, 3);
        for d in &draws {
            cov += d * d.transpose();
        }
        cov /= draws.len() as f64;
        assert!((cov - DMatrix::<f64>::identity(3, 3)).amax() < 0.01);
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let m = gaussian(2);
        assert_eq!(sample_noise(&m, 100, 3), sample_noise(&m, 100, 3));
        assert_ne!(sample_noise(&m, 100, 3), sample_noise(&m, 100, 4));
    }

    #[test]
    fn student_t_standardized_variance() {
        // Raw t(5) has variance 5/3; the model rescales by √(3/5).
        let model =
            NoiseModel::new(NoiseKind::StudentT { dof: 5.0 }, &DMatrix::identity(1, 1)).unwrap();
        let draws = sample_noise(&model, 1_000_000, 17);
        let var = draws.iter().map(|d| d[0] * d[0]).sum::<f64>() / draws.len() as f64;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
        assert!(matches!(
            NoiseModel::new(NoiseKind::StudentT { dof: 4.0 }, &DMatrix::identity(1, 1)),
            Err(Error::InvalidDof(_))
        ));
    }

    #[test]
    fn fourth_moment_formula_matches_sampling() {
        let w = dmatrix![1.0, 0.3; 0.3, 0.5];
        for kind in [
            NoiseKind::Gaussian,
            NoiseKind::Laplace,
            NoiseKind::BoundedMixture,
        ] {
            let model = NoiseModel::new(kind, &w).unwrap();
            let draws = sample_noise(&model, 400_000, 23);
            let est =
                draws.iter().map(|d| d.norm_squared().powi(2)).sum::<f64>() / draws.len() as f64;
            let var = draws.iter().map(|d| d[0] * d[0]).sum::<f64>() / draws.len() as f64;
            assert!((var - 1.0).abs() < 0.02, "{kind:?} variance {var}");
            assert!(
                (est / model.fourth_moment() - 1.0).abs() < 0.03,
                "{kind:?}: {est} vs {}",
                model.fourth_moment()
            );
        }
        // Isotropic Gaussian: E‖w‖⁴ = n² + 2n.
        assert_abs_diff_eq!(gaussian(8).fourth_moment(), 80.0, epsilon = 1e-9);
    }

    #[test]
    fn pure_noise_plant() {
        let sys = LinearSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            SpdMatrix::identity(1),
        )
        .unwrap();
        let noise = gaussian(2);
        let traj = rollout(&sys, &Controller::Linear(dmatrix![1.0, 2.0]), &noise, 50, 9).unwrap();
        let w = sample_noise(&noise, 50, 9);
        assert_eq!(traj.states[0], DVector::zeros(2));
        for k in 1..=50 {
            assert_eq!(traj.states[k], w[k - 1]);
        }
    }

    #[test]
    fn zero_noise_stays_at_origin() {
        let sys = scalar_system(0.9, 1.0);
        let noise = NoiseModel::new(NoiseKind::Gaussian, &DMatrix::zeros(1, 1)).unwrap();
        let params = ControllerParams::new(dmatrix![0.0], dmatrix![-0.5], 1e-3, 3).unwrap();
        let traj = rollout(&sys, &Controller::Switching(params), &noise, 100, 1).unwrap();
        assert!(traj.states.iter().all(|x| x[0] == 0.0));
        assert!(traj.fallback_flags.iter().all(|f| !f));
        assert_eq!(empirical_cost(&traj), 0.0);
    }

    #[test]
    fn unbounded_threshold_matches_linear_rollout() {
        let sys = LinearSystem::random_stable(3, 4, 2, 0.9).unwrap();
        let k1 = DMatrix::from_fn(2, 4, |i, j| 0.1 * (i as f64 - j as f64));
        let params =
            ControllerParams::new(DMatrix::zeros(2, 4), k1.clone(), f64::INFINITY, 5).unwrap();
        let noise = gaussian(4);
        let a = rollout(&sys, &Controller::Switching(params), &noise, 300, 42).unwrap();
        let b = rollout(&sys, &Controller::Linear(k1), &noise, 300, 42).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.stage_costs, b.stage_costs);
    }

    #[test]
    fn stored_states_reproduce_noise() {
        let sys = LinearSystem::random_stable(8, 3, 2, 0.95).unwrap();
        let params = ControllerParams::new(
            DMatrix::zeros(2, 3),
            DMatrix::from_element(2, 3, 0.2),
            1.0,
            4,
        )
        .unwrap();
        let noise = gaussian(3);
        let traj = rollout(&sys, &Controller::Switching(params), &noise, 500, 77).unwrap();
        let w = sample_noise(&noise, 500, 77);
        for (k, wk) in w.iter().enumerate() {
            let rec = &traj.states[k + 1] - &sys.a * &traj.states[k] - &sys.b * &traj.inputs[k];
            assert!((rec - wk).amax() <= 1e-12 * (1.0 + traj.states[k + 1].amax()));
        }
        assert!(traj.fallback_flags.iter().any(|f| *f));
    }

    #[test]
    fn explosion_truncates() {
        let sys = scalar_system(1.5, 0.0);
        let traj = rollout(
            &sys,
            &Controller::Linear(dmatrix![0.0]),
            &gaussian(1),
            10_000,
            2,
        )
        .unwrap();
        let at = traj.exploded_at.expect("unstable plant must explode");
        assert!(at < 200);
        assert_eq!(traj.len(), at);
        assert_eq!(traj.states.len(), at + 1);
        assert!(empirical_cost(&traj).is_infinite());
    }

    #[test]
    fn empirical_cost_of_white_noise_state() {
        // a = b = 0: x_k = w_{k-1}, so the cost tends to tr(W) = 1.
        let sys = scalar_system(0.0, 0.0);
        let traj = rollout(
            &sys,
            &Controller::Linear(dmatrix![0.0]),
            &gaussian(1),
            100_000,
            13,
        )
        .unwrap();
        let c = empirical_cost(&traj);
        // x_k² has variance 2; the first stage is deterministic zero.
        let se = (2.0f64 / 100_000.0).sqrt();
        assert!((c - 1.0).abs() < 3.0 * se + 1e-5, "cost {c}");
    }

    #[test]
    fn monte_carlo_is_seed_deterministic_and_partition_free() {
        let sys = scalar_system(0.7, 1.0);
        let ctrl = Controller::Linear(dmatrix![-0.2]);
        let noise = gaussian(1);
        let cfg = McConfig {
            horizon: 200,
            n_traj: 64,
            seed: 5,
            workers: Some(1),
        };
        let a = monte_carlo_cost(&sys, &ctrl, &noise, &cfg).unwrap();
        let b = monte_carlo_cost(
            &sys,
            &ctrl,
            &noise,
            &McConfig {
                workers: Some(4),
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(a, b);
        let c = monte_carlo_cost(&sys, &ctrl, &noise, &McConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn monte_carlo_matches_finite_horizon_expectation() {
        let sys = scalar_system(0.8, 1.0);
        let k = dmatrix![-0.3];
        let noise = gaussian(1);
        let cfg = McConfig {
            horizon: 500,
            n_traj: 2000,
            seed: 99,
            workers: None,
        };
        let rep = monte_carlo_cost(&sys, &Controller::Linear(k.clone()), &noise, &cfg).unwrap();
        let expected = sys.finite_horizon_cost(&k, 500);
        assert!(
            (rep.mean - expected).abs() < 3.0 * rep.stderr,
            "{} vs {expected} ± {}",
            rep.mean,
            rep.stderr
        );
        // The finite-horizon expectation approaches the stationary cost from below.
        let stationary = sys.stationary_cost(&k).unwrap();
        assert!(expected < stationary);
        assert!(sys.finite_horizon_cost(&k, 100_000) > expected);
        assert!((sys.finite_horizon_cost(&k, 100_000) - stationary).abs() < 1e-4 * stationary);
    }

    #[test]
    fn switch_frequency_extremes() {
        let sys = scalar_system(0.5, 1.0);
        let noise = gaussian(1);
        let run = |m: f64| {
            let p = ControllerParams::new(dmatrix![0.0], dmatrix![-0.3], m, 2).unwrap();
            (0..4)
                .map(|s| rollout(&sys, &Controller::Switching(p.clone()), &noise, 500, s).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(empirical_switch_frequency(&run(f64::INFINITY)), 0.0);
        // M = 0 triggers whenever ξ = 0, x₀ = 0 included.
        assert_eq!(empirical_switch_frequency(&run(0.0)), 1.0);
    }

    #[test]
    fn fourth_moment_zero_noise() {
        let sys = scalar_system(0.5, 1.0);
        let noise = NoiseModel::new(NoiseKind::Gaussian, &DMatrix::zeros(1, 1)).unwrap();
        let traj = rollout(&sys, &Controller::Linear(dmatrix![0.0]), &noise, 100, 0).unwrap();
        assert_eq!(
            empirical_weighted_fourth_moment(&[traj], &SpdMatrix::identity(1)),
            0.0
        );
    }

    #[test]
    fn fourth_moment_of_stationary_gaussian() {
        // x stationary N(0, σ²) with σ² = 1/(1 − a²); E(p x²)² = 3p²σ⁴.
        let a = 0.5;
        let sys = scalar_system(a, 0.0);
        let noise = gaussian(1);
        let p0 = SpdMatrix::from_diagonal(&[4.0 / 3.0]).unwrap();
        let trajs: Vec<_> = (0..400)
            .map(|s| rollout(&sys, &Controller::Linear(dmatrix![0.0]), &noise, 1000, s).unwrap())
            .collect();
        let est = empirical_weighted_fourth_moment(&trajs, &p0);
        let sigma2 = 1.0 / (1.0 - a * a);
        let expected = 3.0 * p0[(0, 0)].powi(2) * sigma2 * sigma2;
        assert!((est / expected - 1.0).abs() < 0.03, "{est} vs {expected}");
    }

    #[test]
    fn subsequence_examples() {
        let mk = |flags: Vec<bool>| Trajectory {
            states: vec![DVector::zeros(1); flags.len() + 1],
            inputs: vec![DVector::zeros(1); flags.len()],
            stage_costs: vec![0.0; flags.len()],
            fallback_flags: flags,
            seed: 0,
            stream: 0,
            exploded_at: None,
        };
        let sub = transformed_subsequence(&mk(vec![false; 6]), 3).unwrap();
        assert_eq!(sub.indices, vec![0, 1, 2, 3, 4, 5]);

        let mut flags = vec![false; 11];
        flags[5] = true;
        flags[6] = true;
        flags[7] = true;
        let sub = transformed_subsequence(&mk(flags.clone()), 3).unwrap();
        assert_eq!(sub.indices, vec![0, 1, 2, 3, 4, 5, 8, 9, 10]);
        assert_eq!(sub.labels[5], SubsequenceLabel::FallbackBlock);
        assert!(sub
            .labels
            .iter()
            .enumerate()
            .all(|(j, l)| (j == 5) == (*l == SubsequenceLabel::FallbackBlock)));

        flags[7] = false;
        assert!(matches!(
            transformed_subsequence(&mk(flags), 3),
            Err(Error::InconsistentDwell { dwell: 3, step: 7 })
        ));
    }

    #[test]
    fn tail_experiment_small_varrho_recovers_base_tail() {
        // ϱ → 0 leaves S_k ≈ X_k ~ N(0, 1); P(Z ≥ 1) = 0.158655.
        let curve =
            exp_weighted_sum_tail_experiment(1e-9, TailSource::IidGaussian, 5, 200_000, &[1.0], 3)
                .unwrap();
        let p = 0.158_655_253_931_457;
        let se = (p * (1.0 - p) / 200_000.0f64).sqrt();
        assert!((curve.prob[0] - p).abs() < 4.0 * se, "{}", curve.prob[0]);
    }

    #[test]
    fn csv_layout() {
        let sys = scalar_system(0.5, 1.0);
        let traj = rollout(
            &sys,
            &Controller::Linear(dmatrix![-0.1]),
            &gaussian(1),
            3,
            0,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj, Some(7), true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "trajectory,k,x_1,u_1,fallback_flag,stage_cost");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("7,0,0e0,"));
    }
}
