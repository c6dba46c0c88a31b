//! Experiment configuration: parsing, validation and resolution of defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use switchguard::linalg::{self, SpdMatrix, DEFAULT_T_MAX};
use switchguard::simulate::{LinearSystem, NoiseKind, NoiseModel};

use crate::surrogate;

pub const DESK_N_TRAJ: usize = 10_000;
pub const PAPER_N_TRAJ: usize = 100_000;
pub const DEFAULT_HORIZON: usize = 1_000;
pub const DEFAULT_BASELINE_HORIZON: usize = 200;
/// Dwell time used when `A + BK₁` is not stable and no common certificate exists.
pub const UNCERTIFIED_DWELL: usize = 10;
pub const DEFAULT_RHO_MARGIN: f64 = 0.01;
/// Rank-one perturbation size when the system file does not carry a tuned value.
pub const DEFAULT_RANK_ONE_ALPHA: f64 = 0.33;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    /// 10⁴ trajectories × 10³ steps.
    Desk,
    /// 10⁵ trajectories × 10³ steps.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_traj: Option<usize>,
    /// Worker threads for Monte-Carlo runs; unset uses all cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Horizon of the unguarded baseline trajectory in `simulate`.
    #[serde(default = "default_baseline_horizon")]
    pub baseline_horizon: usize,
    #[serde(default)]
    pub system: SystemSpec,
    #[serde(default)]
    pub controller: ControllerSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub verify: VerifySpec,
}

fn default_baseline_horizon() -> usize {
    DEFAULT_BASELINE_HORIZON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    #[default]
    Surrogate,
    Random {
        seed: u64,
        n: usize,
        m: usize,
        /// Spectral radius of `A`.
        radius: f64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    #[serde(default = "default_k0")]
    pub k0: GainSpec,
    #[serde(default = "default_k1")]
    pub k1: GainSpec,
    /// Switching threshold `M`; `inf` disables switching.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Threshold grid for `sweep`: a list, or `"start:step:stop"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<GridSpec>,
    #[serde(default)]
    pub dwell: DwellSpec,
    #[serde(default = "default_rho_margin")]
    pub rho_margin: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self {
            k0: default_k0(),
            k1: default_k1(),
            threshold: default_threshold(),
            thresholds: None,
            dwell: DwellSpec::default(),
            rho_margin: default_rho_margin(),
        }
    }
}

fn default_k0() -> GainSpec {
    GainSpec::Zero
}

fn default_k1() -> GainSpec {
    GainSpec::Dare
}

fn default_threshold() -> f64 {
    1.0
}

fn default_rho_margin() -> f64 {
    DEFAULT_RHO_MARGIN
}

/// How a gain matrix is obtained. Written in the config as `"zero"`,
/// `"dare"`, `"dare_plus_rank_one"`, `"dare_plus_rank_one(0.33)"` or `"file:path"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GainSpec {
    Zero,
    Dare,
    /// `K⋆ + α𝟙𝟙ᵀ`; `None` takes `α` from the system file.
    DarePlusRankOne(Option<f64>),
    File(PathBuf),
}

impl TryFrom<String> for GainSpec {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let t = s.trim();
        if t == "zero" {
            return Ok(Self::Zero);
        }
        if t == "dare" {
            return Ok(Self::Dare);
        }
        if t == "dare_plus_rank_one" {
            return Ok(Self::DarePlusRankOne(None));
        }
        if let Some(arg) = t
            .strip_prefix("dare_plus_rank_one(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let alpha: f64 = arg
                .trim()
                .parse()
                .map_err(|_| format!("bad rank-one coefficient in {t:?}"))?;
            return Ok(Self::DarePlusRankOne(Some(alpha)));
        }
        if let Some(p) = t.strip_prefix("file:") {
            return Ok(Self::File(PathBuf::from(p)));
        }
        Err(format!(
            "unknown gain spec {t:?}; expected zero, dare, dare_plus_rank_one[(alpha)] or file:<path>"
        ))
    }
}

impl From<GainSpec> for String {
    fn from(g: GainSpec) -> String {
        g.to_string()
    }
}

impl fmt::Display for GainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GainSpec::Zero => write!(f, "zero"),
            GainSpec::Dare => write!(f, "dare"),
            GainSpec::DarePlusRankOne(None) => write!(f, "dare_plus_rank_one"),
            GainSpec::DarePlusRankOne(Some(a)) => write!(f, "dare_plus_rank_one({a})"),
            GainSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    List(Vec<f64>),
    Range(String),
}

impl GridSpec {
    pub fn expand(&self) -> Result<Vec<f64>> {
        match self {
            GridSpec::List(v) => Ok(v.clone()),
            GridSpec::Range(s) => parse_range(s),
        }
    }
}

/// Expands `"start:step:stop"` inclusively.
pub fn parse_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("threshold range {s:?} must have the form start:step:stop");
    }
    let num = |p: &str| {
        p.parse::<f64>()
            .map_err(|_| anyhow!("bad number {p:?} in threshold range {s:?}"))
    };
    let (a, step, b) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
    if !(step > 0.0) || !(b >= a) || !a.is_finite() || !b.is_finite() {
        bail!("threshold range {s:?} needs step > 0 and stop >= start");
    }
    let count = ((b - a) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| round12(a + i as f64 * step)).collect())
}

fn round12(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DwellSpec {
    Fixed(usize),
    Named(String),
}

impl Default for DwellSpec {
    fn default() -> Self {
        DwellSpec::Named("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    #[default]
    Gaussian,
    StudentT {
        dof: f64,
    },
    Laplace,
    BoundedMixture,
}

impl NoiseSpec {
    pub fn kind(&self) -> NoiseKind {
        match *self {
            NoiseSpec::Gaussian => NoiseKind::Gaussian,
            NoiseSpec::StudentT { dof } => NoiseKind::StudentT { dof },
            NoiseSpec::Laplace => NoiseKind::Laplace,
            NoiseSpec::BoundedMixture => NoiseKind::BoundedMixture,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    /// Replace the fallback contraction factor before checking it (fault injection).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0_override: Option<f64>,
    /// Use `M = factor · a₀𝒦` instead of the configured threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certified_threshold_factor: Option<f64>,
}

/// Matrices of a system file. `w`, `q`, `r` default to identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    /// Rank-one coefficient used by `dare_plus_rank_one` without an argument.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainFile {
    k: Vec<Vec<f64>>,
}

/// Dense matrix from rows, checked against an expected shape.
pub fn matrix_from_rows(
    field: &str,
    rows: &[Vec<f64>],
    shape: Option<(usize, usize)>,
) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        bail!("field `{field}`: matrix is empty");
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        bail!(
            "field `{field}`: row {bad} has {} entries, row 0 has {ncols}",
            rows[bad].len()
        );
    }
    if let Some((er, ec)) = shape {
        if (nrows, ncols) != (er, ec) {
            bail!("field `{field}`: expected {er}x{ec}, got {nrows}x{ncols}");
        }
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        bail!("field `{field}`: entries must be finite");
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl SystemFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("system file: {e}"))
    }

    pub fn to_system(&self) -> Result<LinearSystem> {
        let a = matrix_from_rows("a", &self.a, None)?;
        let n = a.nrows();
        if a.ncols() != n {
            bail!(
                "field `a`: expected a square matrix, got {}x{}",
                n,
                a.ncols()
            );
        }
        let b = matrix_from_rows("b", &self.b, None)?;
        if b.nrows() != n {
            bail!("field `b`: expected {n} rows, got {}", b.nrows());
        }
        let m = b.ncols();
        let spd = |field: &str, rows: &Option<Vec<Vec<f64>>>, d: usize| -> Result<SpdMatrix> {
            match rows {
                None => Ok(SpdMatrix::identity(d)),
                Some(r) => SpdMatrix::new(matrix_from_rows(field, r, Some((d, d)))?)
                    .map_err(|e| anyhow!("field `{field}`: {e}")),
            }
        };
        let w = spd("w", &self.w, n)?;
        let q = spd("q", &self.q, n)?;
        let r = spd("r", &self.r, m)?;
        Ok(LinearSystem::new(a, b, w, q, r)?)
    }
}

/// Loads and validates a config file, resolving every default: paths are
/// made absolute, threshold ranges expanded, scale defaults filled in, and
/// an `auto` dwell time replaced by its computed value.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    load_config_str(&text, &base)
}

pub fn load_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| anyhow!("config parse error: {e}"))?;
    resolve(cfg, base_dir)
}

fn absolutize(p: &Path, base: &Path) -> PathBuf {
    let joined = if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    };
    std::path::absolute(&joined).unwrap_or(joined)
}

pub fn resolve(mut cfg: ExperimentConfig, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut problems = Vec::new();

    if let SystemSpec::File { path } = &cfg.system {
        cfg.system = SystemSpec::File {
            path: absolutize(path, base_dir),
        };
    }
    for g in [&mut cfg.controller.k0, &mut cfg.controller.k1] {
        if let GainSpec::File(p) = g {
            *g = GainSpec::File(absolutize(p, base_dir));
        }
    }
    if matches!(cfg.controller.k0, GainSpec::DarePlusRankOne(_)) {
        problems.push("controller.k0: the fallback gain must be zero, dare or file".to_string());
    }
    cfg.horizon.get_or_insert(DEFAULT_HORIZON);
    cfg.n_traj.get_or_insert(DESK_N_TRAJ);

    if cfg.horizon == Some(0) {
        problems.push("horizon: must be >= 1".into());
    }
    if cfg.n_traj.is_some_and(|n| n < 2) {
        problems.push("n_traj: must be >= 2".into());
    }
    if cfg.workers == Some(0) {
        problems.push("workers: must be >= 1".into());
    }
    if cfg.baseline_horizon == 0 {
        problems.push("baseline_horizon: must be >= 1".into());
    }
    let c = &cfg.controller;
    if c.threshold.is_nan() || c.threshold < 0.0 {
        problems.push(format!(
            "controller.threshold: must be >= 0 or inf, got {}",
            c.threshold
        ));
    }
    if !(c.rho_margin >= 0.0 && c.rho_margin < 1.0) {
        problems.push(format!(
            "controller.rho_margin: must be in [0, 1), got {}",
            c.rho_margin
        ));
    }
    if let Some(g) = &c.thresholds {
        match g.expand() {
            Err(e) => problems.push(format!("controller.thresholds: {e}")),
            Ok(v) => {
                if v.is_empty() {
                    problems.push("controller.thresholds: grid is empty".into());
                }
                if v.iter().any(|m| !(*m > 0.0)) {
                    problems
                        .push("controller.thresholds: every grid value must be positive".into());
                }
                if v.windows(2).any(|w| w[1] <= w[0]) {
                    problems.push("controller.thresholds: grid must be strictly increasing".into());
                }
                cfg.controller.thresholds = Some(GridSpec::List(v));
            }
        }
    }
    let fixed_dwell = match &cfg.controller.dwell {
        DwellSpec::Fixed(0) => {
            problems.push("controller.dwell: must be >= 1".into());
            None
        }
        DwellSpec::Fixed(t) => Some(*t),
        DwellSpec::Named(s) if s == "auto" => None,
        DwellSpec::Named(s) => {
            problems.push(format!(
                "controller.dwell: expected a positive integer or \"auto\", got {s:?}"
            ));
            None
        }
    };
    if let NoiseSpec::StudentT { dof } = cfg.noise {
        if !(dof >= 5.0) {
            problems.push(format!(
                "noise.dof: student-t needs dof >= 5 for a finite fourth moment, got {dof}"
            ));
        }
    }
    if let Some(r) = cfg.verify.rho0_override {
        if !(0.0..1.0).contains(&r) {
            problems.push(format!("verify.rho0_override: must be in [0, 1), got {r}"));
        }
    }
    if let Some(f) = cfg.verify.certified_threshold_factor {
        if !(f > 0.0) {
            problems.push(format!(
                "verify.certified_threshold_factor: must be > 0, got {f}"
            ));
        }
    }

    // Matrices are only loaded once the scalar fields are sound.
    if problems.is_empty() {
        match load_plant(&cfg) {
            Err(e) => problems.push(format!("{e:#}")),
            Ok(plant) => {
                if let GainSpec::DarePlusRankOne(None) = cfg.controller.k1 {
                    cfg.controller.k1 = GainSpec::DarePlusRankOne(Some(plant.alpha));
                }
                match resolve_gains(&cfg, &plant) {
                    Err(e) => problems.push(format!("{e:#}")),
                    Ok((k0, k1)) => {
                        let dwell = match fixed_dwell {
                            Some(t) => Ok(t),
                            None => auto_dwell(&plant.sys, &k0, &k1, cfg.controller.rho_margin),
                        };
                        match dwell {
                            Ok(t) => cfg.controller.dwell = DwellSpec::Fixed(t),
                            Err(e) => problems.push(format!("controller.dwell: {e:#}")),
                        }
                    }
                }
            }
        }
    }

    if !problems.is_empty() {
        let list: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        bail!("invalid configuration:\n{}", list.join("\n"));
    }
    Ok(cfg)
}

/// Plant plus the rank-one coefficient associated with it.
pub struct Plant {
    pub sys: LinearSystem,
    pub alpha: f64,
}

pub fn load_plant(cfg: &ExperimentConfig) -> Result<Plant> {
    match &cfg.system {
        SystemSpec::Surrogate => {
            let f = surrogate::surrogate_file();
            Ok(Plant {
                sys: f.to_system()?,
                alpha: f.alpha.unwrap_or(DEFAULT_RANK_ONE_ALPHA),
            })
        }
        SystemSpec::Random { seed, n, m, radius } => {
            if *n == 0 || *m == 0 {
                bail!("system: random system needs n, m >= 1");
            }
            if !(*radius > 0.0) {
                bail!("system.radius: must be positive");
            }
            Ok(Plant {
                sys: LinearSystem::random_stable(*seed, *n, *m, *radius)?,
                alpha: DEFAULT_RANK_ONE_ALPHA,
            })
        }
        SystemSpec::File { path } => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("system.path: reading {}", path.display()))?;
            let f = SystemFile::parse(&text)
                .with_context(|| format!("system.path: {}", path.display()))?;
            Ok(Plant {
                sys: f.to_system()?,
                alpha: f.alpha.unwrap_or(DEFAULT_RANK_ONE_ALPHA),
            })
        }
    }
}

fn build_gain(field: &str, spec: &GainSpec, plant: &Plant) -> Result<DMatrix<f64>> {
    let sys = &plant.sys;
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let kstar = || {
        linalg::solve_dare(&sys.a, &sys.b, &sys.q, &sys.r)
            .map(|s| s.k)
            .map_err(|e| anyhow!("{field}: Riccati solution unavailable: {e}"))
    };
    match spec {
        GainSpec::Zero => Ok(DMatrix::zeros(m, n)),
        GainSpec::Dare => kstar(),
        GainSpec::DarePlusRankOne(alpha) => {
            Ok(kstar()? + DMatrix::from_element(m, n, alpha.unwrap_or(plant.alpha)))
        }
        GainSpec::File(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("{field}: reading {}", path.display()))?;
            let g: GainFile =
                toml::from_str(&text).map_err(|e| anyhow!("{field}: {}: {e}", path.display()))?;
            matrix_from_rows(&format!("{field} (k)"), &g.k, Some((m, n)))
        }
    }
}

pub fn resolve_gains(
    cfg: &ExperimentConfig,
    plant: &Plant,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k0 = build_gain("controller.k0", &cfg.controller.k0, plant)?;
    let k1 = build_gain("controller.k1", &cfg.controller.k1, plant)?;
    Ok((k0, k1))
}

/// Minimal dwell time from the common Lyapunov construction, or
/// [`UNCERTIFIED_DWELL`] when `A + BK₁` is not stable.
pub fn auto_dwell(
    sys: &LinearSystem,
    k0: &DMatrix<f64>,
    k1: &DMatrix<f64>,
    margin: f64,
) -> Result<usize> {
    let a0 = sys.closed_loop(k0);
    let r0 = linalg::spectral_radius(&a0);
    if r0 >= 1.0 - linalg::TAU_SPEC {
        bail!("fallback gain K0 is not stabilizing: spectral radius of A+BK0 is {r0:.6}");
    }
    let a1 = sys.closed_loop(k1);
    if linalg::spectral_radius(&a1) >= 1.0 - linalg::TAU_SPEC {
        return Ok(UNCERTIFIED_DWELL);
    }
    Ok(linalg::find_common_lyapunov(&a1, &a0, margin, DEFAULT_T_MAX)?.dwell)
}

impl ExperimentConfig {
    pub fn apply_scale(&mut self, scale: Scale) {
        self.n_traj = Some(match scale {
            Scale::Desk => DESK_N_TRAJ,
            Scale::Paper => PAPER_N_TRAJ,
        });
        self.horizon = Some(DEFAULT_HORIZON);
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(DEFAULT_HORIZON)
    }

    pub fn n_traj(&self) -> usize {
        self.n_traj.unwrap_or(DESK_N_TRAJ)
    }

    pub fn dwell(&self) -> Option<usize> {
        match self.controller.dwell {
            DwellSpec::Fixed(t) => Some(t),
            DwellSpec::Named(_) => None,
        }
    }

    pub fn thresholds(&self) -> Option<Vec<f64>> {
        self.controller
            .thresholds
            .as_ref()
            .and_then(|g| g.expand().ok())
    }

    pub fn noise_model(&self, sys: &LinearSystem) -> Result<NoiseModel> {
        Ok(NoiseModel::new(self.noise.kind(), sys.w.as_matrix())?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing configuration")
    }
}
