//! The `certify`, `simulate`, `sweep` and `verify` commands.

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use switchguard::bounds::{self, fmt_num, BoundReport};
use switchguard::linalg::{
    self, CommonLyapunovCertificate, DareSolution, StabilityCertificate, DEFAULT_T_MAX,
};
use switchguard::simulate::{
    self, cost_report, fourth_moment_estimate, monte_carlo_summaries, paired_gap, rollout,
    switch_fraction_estimate, Controller, LinearSystem, McConfig, NoiseKind, NoiseModel,
    RunSummary, SummaryOptions, Trajectory,
};
use switchguard::ControllerParams;

use crate::config::{self, ExperimentConfig};
use crate::output::{csv, OutputOptions};

/// A resolved configuration together with everything derived from it.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub sys: LinearSystem,
    pub k0: DMatrix<f64>,
    pub k1: DMatrix<f64>,
    pub kstar: DareSolution,
    pub dwell: usize,
    pub cert0: StabilityCertificate,
    /// Present when `A + BK₁` is stable and the dwell time satisfies the common Lyapunov condition.
    pub cert: Option<CommonLyapunovCertificate>,
    pub noise: NoiseModel,
}

impl Experiment {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let plant = config::load_plant(cfg)?;
        let (k0, k1) = config::resolve_gains(cfg, &plant)?;
        let sys = plant.sys;
        let dwell = match cfg.dwell() {
            Some(t) => t,
            None => config::auto_dwell(&sys, &k0, &k1, cfg.controller.rho_margin)?,
        };
        let a0 = sys.closed_loop(&k0);
        let cert0 = bounds::certify_fallback(&sys.a, &sys.b, &k0, &sys.q, &sys.r).map_err(|e| match e {
            switchguard::Error::Unstable { radius } => {
                anyhow!("fallback gain K0 is not stabilizing: spectral radius of A+BK0 is {radius:.6}")
            }
            other => anyhow!(other),
        })?;
        let kstar = linalg::solve_dare(&sys.a, &sys.b, &sys.q, &sys.r)
            .context("solving the Riccati equation")?;
        let a1 = sys.closed_loop(&k1);
        let cert = if linalg::spectral_radius(&a1) < 1.0 - linalg::TAU_SPEC {
            linalg::find_common_lyapunov(&a1, &a0, cfg.controller.rho_margin, DEFAULT_T_MAX)
                .ok()
                .and_then(|c| {
                    if c.dwell == dwell {
                        Some(c)
                    } else {
                        c.with_dwell(dwell, &a0).ok()
                    }
                })
        } else {
            None
        };
        let noise = cfg.noise_model(&sys)?;
        Ok(Self {
            config: cfg.clone(),
            sys,
            k0,
            k1,
            kstar,
            dwell,
            cert0,
            cert,
            noise,
        })
    }

    pub fn params(&self, threshold: f64) -> Result<ControllerParams> {
        Ok(ControllerParams::new(
            self.k0.clone(),
            self.k1.clone(),
            threshold,
            self.dwell,
        )?)
    }

    pub fn heavy_tail(&self) -> bool {
        self.noise.kind() != NoiseKind::Gaussian
    }

    pub fn report(&self, threshold: f64) -> Result<BoundReport> {
        Ok(BoundReport::evaluate(
            &self.sys,
            &self.k0,
            &self.k1,
            &self.cert0,
            self.cert.as_ref(),
            threshold,
            self.noise.fourth_moment(),
            self.heavy_tail(),
        )?)
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            horizon: self.config.horizon(),
            n_traj: self.config.n_traj(),
            seed: self.config.seed,
            workers: self.config.workers,
        }
    }

    /// Optimal cost `J⋆ = tr(W P⋆)`.
    pub fn optimal_cost(&self) -> f64 {
        (self.sys.w.as_matrix() * self.kstar.p.as_matrix()).trace()
    }

    /// `a₀𝒦`, the smallest threshold certified by the Gaussian bounds.
    pub fn certified_threshold(&self) -> Option<f64> {
        let rep = self.report(1.0).ok()?;
        rep.certified.map(|c| c.gaussian.a0 * rep.kdiff_norm)
    }

    fn summaries(&self, ctrl: &Controller, opts: &SummaryOptions) -> Result<Vec<RunSummary>> {
        Ok(monte_carlo_summaries(
            &self.sys,
            ctrl,
            &self.noise,
            &self.mc_config(),
            opts,
        )?)
    }
}

/// Bound report at the configured threshold (`report.txt`) and at every
/// grid threshold (`report.csv`).
pub fn cmd_certify(exp: &Experiment, out: &OutputOptions) -> Result<Vec<BoundReport>> {
    let main = exp.report(exp.config.controller.threshold)?;
    out.write("report.txt", &main.to_key_value())?;
    let mut reports = vec![main];
    if let Some(grid) = exp.config.thresholds() {
        reports = grid.iter().map(|&m| exp.report(m)).collect::<Result<_>>()?;
    }
    let rows: Vec<Vec<String>> = reports.iter().map(|r| vec![r.csv_row()]).collect();
    out.write("report.csv", &csv(&[&BoundReport::csv_header()], &rows))?;
    Ok(reports)
}

#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub switched: Trajectory,
    pub baseline: Trajectory,
    pub spectral_radius_a1: f64,
    pub cost_cap: f64,
}

impl SimulateSummary {
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.switched;
        let b = &self.baseline;
        let exploded_at = |t: &Trajectory| {
            t.exploded_at
                .map_or_else(|| "none".to_string(), |k| k.to_string())
        };
        vec![
            ("spectral_radius_a1", fmt_num(self.spectral_radius_a1)),
            ("cost_cap", fmt_num(self.cost_cap)),
            ("switched_steps", s.len().to_string()),
            ("switched_cost", fmt_num(simulate::empirical_cost(s))),
            (
                "switched_fallback_fraction",
                fmt_num(simulate::empirical_switch_frequency(std::slice::from_ref(
                    s,
                ))),
            ),
            ("switched_exploded", u8::from(s.exploded()).to_string()),
            ("switched_exploded_at", exploded_at(s)),
            ("baseline_steps", b.len().to_string()),
            ("baseline_cost", fmt_num(simulate::empirical_cost(b))),
            ("baseline_exploded", u8::from(b.exploded()).to_string()),
            ("baseline_exploded_at", exploded_at(b)),
        ]
    }
}

/// One switched trajectory and its unguarded `K₁` counterpart under the same noise.
pub fn cmd_simulate(exp: &Experiment, out: &OutputOptions) -> Result<SimulateSummary> {
    let cfg = &exp.config;
    let threshold = cfg.controller.threshold;
    let switched = rollout(
        &exp.sys,
        &Controller::Switching(exp.params(threshold)?),
        &exp.noise,
        cfg.horizon(),
        cfg.seed,
    )?;
    let baseline = rollout(
        &exp.sys,
        &Controller::Linear(exp.k1.clone()),
        &exp.noise,
        cfg.baseline_horizon,
        cfg.seed,
    )?;

    for (name, traj) in [("switched.csv", &switched), ("baseline.csv", &baseline)] {
        let mut buf = Vec::new();
        simulate::write_trajectory_csv(&mut buf, traj, None, true)?;
        out.write(name, &String::from_utf8(buf)?)?;
    }
    let len = switched.states.len().max(baseline.states.len());
    let norm_at =
        |t: &Trajectory, k: usize| t.states.get(k).map_or(String::new(), |x| fmt_num(x.norm()));
    let rows: Vec<Vec<String>> = (0..len)
        .map(|k| vec![k.to_string(), norm_at(&switched, k), norm_at(&baseline, k)])
        .collect();
    out.write(
        "norms.csv",
        &csv(&["k", "switched_norm", "baseline_norm"], &rows),
    )?;

    let summary = SimulateSummary {
        spectral_radius_a1: linalg::spectral_radius(&exp.sys.closed_loop(&exp.k1)),
        cost_cap: bounds::theorem1_cost_cap(
            &exp.cert0, &exp.sys.b, &exp.sys.r, &exp.sys.w, threshold,
        ),
        switched,
        baseline,
    };
    out.write("summary.txt", &key_value(&summary.entries()))?;
    Ok(summary)
}

fn key_value(entries: &[(&str, String)]) -> String {
    entries
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// One threshold of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub cost: f64,
    pub cost_stderr: f64,
    pub j_star: f64,
    /// `(Ĵ − J⋆)/J⋆`.
    pub rel_gap: f64,
    /// Paired estimate of `J^{K₁,M,t} − J^{K₁}` under common noise.
    pub gap: f64,
    pub gap_stderr: f64,
    pub gap_bound: f64,
    pub switch_freq: f64,
    pub switch_freq_stderr: f64,
    pub switch_bound: f64,
    pub certified: bool,
    pub explosions: usize,
    pub status: String,
}

pub const SWEEP_HEADER: [&str; 19] = [
    "M",
    "log_M",
    "cost",
    "cost_stderr",
    "J_star",
    "rel_gap",
    "log_rel_gap",
    "gap",
    "gap_stderr",
    "rel_gap_paired",
    "log_rel_gap_paired",
    "gap_bound",
    "rel_gap_bound",
    "switch_freq",
    "switch_freq_stderr",
    "switch_bound",
    "certified",
    "explosions",
    "status",
];

fn log_or_nan(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NAN
    }
}

impl SweepRow {
    pub fn rel_gap_paired(&self) -> f64 {
        self.gap / self.j_star
    }

    pub fn csv_fields(&self) -> Vec<String> {
        let f = fmt_num;
        vec![
            f(self.threshold),
            f(log_or_nan(self.threshold)),
            f(self.cost),
            f(self.cost_stderr),
            f(self.j_star),
            f(self.rel_gap),
            f(log_or_nan(self.rel_gap)),
            f(self.gap),
            f(self.gap_stderr),
            f(self.rel_gap_paired()),
            f(log_or_nan(self.rel_gap_paired())),
            f(self.gap_bound),
            f(self.gap_bound / self.j_star),
            f(self.switch_freq),
            f(self.switch_freq_stderr),
            f(self.switch_bound),
            u8::from(self.certified).to_string(),
            self.explosions.to_string(),
            self.status.clone(),
        ]
    }
}

/// Monte-Carlo cost, paired gap and switching frequency at every grid threshold,
/// next to the certified bounds.
pub fn cmd_sweep(exp: &Experiment, out: &OutputOptions) -> Result<Vec<SweepRow>> {
    let grid = exp
        .config
        .thresholds()
        .ok_or_else(|| anyhow!("sweep needs controller.thresholds"))?;
    let j_star = exp.optimal_cost();
    let baseline = exp.summaries(
        &Controller::Linear(exp.k1.clone()),
        &SummaryOptions::default(),
    )?;
    let mut rows = Vec::with_capacity(grid.len());
    for &m in &grid {
        let row = sweep_row(exp, m, j_star, &baseline).unwrap_or_else(|e| SweepRow {
            threshold: m,
            cost: f64::NAN,
            cost_stderr: f64::NAN,
            j_star,
            rel_gap: f64::NAN,
            gap: f64::NAN,
            gap_stderr: f64::NAN,
            gap_bound: f64::NAN,
            switch_freq: f64::NAN,
            switch_freq_stderr: f64::NAN,
            switch_bound: f64::NAN,
            certified: false,
            explosions: 0,
            status: format!("error: {}", e.to_string().replace([',', '\n'], ";")),
        });
        rows.push(row);
    }
    let table: Vec<Vec<String>> = rows.iter().map(SweepRow::csv_fields).collect();
    out.write("sweep.csv", &csv(&SWEEP_HEADER, &table))?;
    Ok(rows)
}

fn sweep_row(exp: &Experiment, m: f64, j_star: f64, baseline: &[RunSummary]) -> Result<SweepRow> {
    let switched = exp.summaries(
        &Controller::Switching(exp.params(m)?),
        &SummaryOptions::default(),
    )?;
    let cost = cost_report(&switched);
    let gap = paired_gap(&switched, baseline);
    let freq = switch_fraction_estimate(&switched);
    let report = exp.report(m)?;
    let (gap_bound, switch_bound) = report
        .headline()
        .map_or((f64::NAN, f64::NAN), |h| (h.2, h.1));
    Ok(SweepRow {
        threshold: m,
        cost: cost.mean,
        cost_stderr: cost.stderr,
        j_star,
        rel_gap: (cost.mean - j_star) / j_star,
        gap: gap.mean,
        gap_stderr: gap.stderr,
        gap_bound,
        switch_freq: freq.mean,
        switch_freq_stderr: freq.stderr,
        switch_bound,
        certified: report.is_certified(),
        explosions: cost.explosions,
        status: "ok".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skip => "skip",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub certified: f64,
    /// Allowed Monte-Carlo slack (three standard errors), zero for exact checks.
    pub tolerance: f64,
    pub status: Status,
}

impl Check {
    fn statistical(name: &'static str, measured: f64, stderr: f64, certified: f64) -> Self {
        let tolerance = 3.0 * stderr;
        let pass = measured.is_finite() && measured <= certified + tolerance;
        Self {
            name,
            measured,
            certified,
            tolerance,
            status: if pass { Status::Pass } else { Status::Fail },
        }
    }

    fn skipped(name: &'static str) -> Self {
        Self {
            name,
            measured: f64::NAN,
            certified: f64::NAN,
            tolerance: f64::NAN,
            status: Status::Skip,
        }
    }
}

pub fn verify_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.status != Status::Fail)
}

/// Soundness checks of the certificates and of every certified bound against
/// Monte-Carlo estimates.
pub fn cmd_verify(exp: &Experiment, out: &OutputOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let a0 = exp.sys.closed_loop(&exp.k0);

    let mut cert0 = exp.cert0.clone();
    if let Some(r) = exp.config.verify.rho0_override {
        cert0.rho0 = r;
    }
    let contraction0 = linalg::contraction_factor(&a0, &cert0.p0)?;
    checks.push(Check {
        name: "fallback_certificate",
        measured: contraction0,
        certified: cert0.rho0,
        tolerance: linalg::TAU_PSD,
        status: if cert0.verify(&a0).is_ok() {
            Status::Pass
        } else {
            Status::Fail
        },
    });

    match &exp.cert {
        Some(c) => {
            let a1 = exp.sys.closed_loop(&exp.k1);
            let worst = linalg::contraction_factor(&a1, &c.p)?.max(linalg::contraction_factor(
                &linalg::mat_pow(&a0, c.dwell),
                &c.p,
            )?);
            checks.push(Check {
                name: "common_certificate",
                measured: worst,
                certified: c.rho,
                tolerance: linalg::TAU_PSD,
                status: if c.verify(&a1, &a0).is_ok() {
                    Status::Pass
                } else {
                    Status::Fail
                },
            });
        }
        None => checks.push(Check::skipped("common_certificate")),
    }

    let threshold = match (
        exp.config.verify.certified_threshold_factor,
        exp.certified_threshold(),
    ) {
        (Some(f), Some(m)) => f * m,
        (Some(_), None) => bail!("verify.certified_threshold_factor needs a stable A+BK1"),
        (None, _) => exp.config.controller.threshold,
    };
    let mut report = exp.report(threshold)?;
    report.rho0 = cert0.rho0;
    report.cost_cap =
        bounds::theorem1_cost_cap(&cert0, &exp.sys.b, &exp.sys.r, &exp.sys.w, threshold);

    let opts = SummaryOptions {
        fourth_moment_weight: Some(exp.cert0.p0.clone()),
        ..Default::default()
    };
    let switched = exp.summaries(&Controller::Switching(exp.params(threshold)?), &opts)?;
    let cost = cost_report(&switched);
    let mut cost_check = Check::statistical("cost_cap", cost.mean, cost.stderr, report.cost_cap);
    if cost.explosions > 0 {
        cost_check.status = Status::Fail;
    }
    checks.push(cost_check);

    match report.headline() {
        Some((fourth_bound, switch_bound, gap_bound)) if report.is_certified() => {
            let freq = switch_fraction_estimate(&switched);
            checks.push(Check::statistical(
                "switch_frequency",
                freq.mean,
                freq.stderr,
                switch_bound,
            ));
            let fourth = fourth_moment_estimate(&switched);
            checks.push(Check::statistical(
                "fourth_moment",
                fourth.mean,
                fourth.stderr,
                fourth_bound,
            ));
            let baseline = exp.summaries(
                &Controller::Linear(exp.k1.clone()),
                &SummaryOptions::default(),
            )?;
            let gap = paired_gap(&switched, &baseline);
            checks.push(Check::statistical("gap", gap.mean, gap.stderr, gap_bound));
        }
        _ => {
            for name in ["switch_frequency", "fourth_moment", "gap"] {
                checks.push(Check::skipped(name));
            }
        }
    }

    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.name.to_string(),
                fmt_num(c.measured),
                fmt_num(c.certified),
                fmt_num(c.tolerance),
                c.status.as_str().to_string(),
            ]
        })
        .collect();
    out.write(
        "verify.csv",
        &csv(
            &["check", "measured", "certified", "tolerance", "status"],
            &rows,
        ),
    )?;
    out.write("report.txt", &report.to_key_value())?;
    Ok(checks)
}
