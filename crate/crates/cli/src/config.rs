//! Experiment configuration: JSON in, validated objects out.

use gmclab_core::acceptance::CRITERIA;
use gmclab_core::chaos::{ComplexParam, TestFunction};
use gmclab_core::kernels::{Domain, KernelSpec, Mollifier, ScaleKernel, SmoothKernel};
use gmclab_core::synth::{DiscreteMeasure, EnsembleConfig, Grid, LayerSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment variable naming the root that relative output directories resolve against.
pub const OUT_ROOT_VAR: &str = "GMCLAB_OUT";

#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default = "SmoothKernel::zero")]
    pub k0: SmoothKernel,
    pub kappa: ScaleKernel,
    pub domain: Domain,
}

impl KernelConfig {
    pub fn build(&self) -> Result<KernelSpec, ConfigError> {
        KernelSpec::new(self.k0.clone(), self.kappa.clone(), self.domain.clone()).map_err(|e| bad(format!("kernel: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    pub n: usize,
    pub side: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_dt")]
    pub delta_t: f64,
    /// Defaults to the finest scale the grid resolves.
    #[serde(default)]
    pub t_max: Option<f64>,
}

fn default_dt() -> f64 {
    LayerSchedule::DEFAULT_DT
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { delta_t: default_dt(), t_max: None }
    }
}

/// `amplitude · exp(1 − 1/(1 − |x−center|²/radius²))` inside the ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpConfig {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

/// Gaussian density `weight·exp(−|x−center|²/(2 width²))` sampled on the grid,
/// or Dirac atoms when `atoms` is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum MeasureConfig {
    Gaussian { terms: Vec<GaussianTerm> },
    Atoms { atoms: Vec<Vec<f64>>, weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianTerm {
    pub center: Vec<f64>,
    pub width: f64,
    pub weight: f64,
}

impl MeasureConfig {
    pub fn build(&self, grid: &Grid) -> DiscreteMeasure {
        match self {
            Self::Gaussian { terms } => DiscreteMeasure::from_density(grid, |x| {
                terms
                    .iter()
                    .map(|t| {
                        let r2: f64 = x.iter().zip(&t.center).map(|(a, b)| (a - b) * (a - b)).sum();
                        t.weight * (-r2 / (2.0 * t.width * t.width)).exp()
                    })
                    .sum()
            }),
            Self::Atoms { atoms, weights } => DiscreteMeasure { atoms: atoms.clone(), weights: weights.clone() },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl From<GammaConfig> for ComplexParam {
    fn from(g: GammaConfig) -> Self {
        ComplexParam::new(g.alpha, g.beta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TightnessConfig {
    #[serde(default = "default_u")]
    pub u: f64,
    #[serde(default = "default_kmax")]
    pub kmax: usize,
    /// Shifts in units of `2π/side`.
    #[serde(default = "default_shifts")]
    pub shifts: Vec<f64>,
}

fn default_u() -> f64 {
    0.75
}
fn default_kmax() -> usize {
    64
}
fn default_shifts() -> Vec<f64> {
    vec![1.0, 0.5, 0.25]
}

impl Default for TightnessConfig {
    fn default() -> Self {
        Self { u: default_u(), kmax: default_kmax(), shifts: default_shifts() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QvConfig {
    /// Layer times for martingale mode; empty means `t_max`.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default = "yes")]
    pub convolution: bool,
}

fn yes() -> bool {
    true
}

impl Default for QvConfig {
    fn default() -> Self {
        Self { checkpoints: Vec::new(), convolution: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompConfig {
    pub kappa0: ScaleKernel,
    pub deltas: Vec<f64>,
    pub s: f64,
    /// Gaussian perturbation subtracted from the star kernel.
    pub amplitude: f64,
    pub width: f64,
    pub points: usize,
    /// Points are drawn uniformly from `[lower, upper]^d`.
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceToggles {
    /// Criterion ids to run; empty means all.
    #[serde(default)]
    pub criteria: Vec<String>,
    /// Run the reduced-size suite.
    #[serde(default)]
    pub quick: bool,
}

impl Default for AcceptanceToggles {
    fn default() -> Self {
        Self { criteria: Vec::new(), quick: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kernel: KernelConfig,
    pub mollifier: Mollifier,
    pub grid: GridConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub gammas: Vec<GammaConfig>,
    #[serde(default)]
    pub omega: f64,
    pub f: BumpConfig,
    #[serde(default)]
    pub mu: Vec<MeasureConfig>,
    pub eps_ladder: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Times exported by `synthesize`; empty means `t_max`.
    #[serde(default)]
    pub export_times: Vec<f64>,
    #[serde(default)]
    pub tightness: TightnessConfig,
    #[serde(default)]
    pub qv: QvConfig,
    #[serde(default)]
    pub decomp: Option<DecompConfig>,
    #[serde(default)]
    pub acceptance: AcceptanceToggles,
}

fn default_output() -> PathBuf {
    PathBuf::from("gmclab-out")
}

impl ExperimentConfig {
    /// Parses JSON; syntax and schema errors carry line and column.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| bad(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| bad(format!("{}: {}", path.display(), e.0)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let spec = self.kernel.build()?;
        let grid = self.grid()?;
        if spec.d != grid.d || self.mollifier.dim() != grid.d {
            return Err(bad("kernel, mollifier and grid dimensions differ"));
        }
        if self.f.center.len() != grid.d {
            return Err(bad("f.center has the wrong dimension"));
        }
        if self.gammas.is_empty() {
            return Err(bad("gammas must not be empty"));
        }
        if self.gammas.iter().any(|g| !(g.alpha.is_finite() && g.beta.is_finite())) {
            return Err(bad("gammas must be finite"));
        }
        if self.replicas == 0 {
            return Err(bad("replicas must be positive"));
        }
        let e = &self.eps_ladder;
        if e.iter().any(|x| !(*x > 0.0)) {
            return Err(bad("eps_ladder entries must be positive"));
        }
        if e.len() >= 2 {
            let ratio = e[1] / e[0];
            if e.windows(2).any(|w| ((w[1] / w[0]) / ratio - 1.0).abs() > 1e-9) {
                return Err(bad("eps_ladder must be geometric"));
            }
        }
        for (k, m) in self.mu.iter().enumerate() {
            if let MeasureConfig::Atoms { atoms, weights } = m {
                if atoms.len() != weights.len() {
                    return Err(bad(format!("mu[{k}]: atoms and weights differ in length")));
                }
            }
        }
        for c in &self.acceptance.criteria {
            if !CRITERIA.iter().any(|(id, _)| id == c) {
                return Err(bad(format!("acceptance.criteria: unknown id {c}")));
            }
        }
        if let Some(d) = &self.decomp {
            if d.kappa0.dim() != grid.d {
                return Err(bad("decomp.kappa0 dimension differs from the grid"));
            }
            if d.points == 0 || d.points > 512 || !(d.upper > d.lower) || d.deltas.is_empty() {
                return Err(bad("decomp: need 1..=512 points, upper > lower and at least one δ"));
            }
        }
        if !(self.tightness.u > grid.d as f64 / 2.0) {
            return Err(bad(format!("tightness.u must exceed d/2 = {}", grid.d as f64 / 2.0)));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        Grid::new(self.grid.d, self.grid.n, self.grid.side).map_err(|e| bad(format!("grid: {e}")))
    }

    pub fn spec(&self) -> Result<KernelSpec, ConfigError> {
        self.kernel.build()
    }

    pub fn schedule(&self) -> Result<LayerSchedule, ConfigError> {
        let grid = self.grid()?;
        let spec = self.spec()?;
        let s = match self.schedule.t_max {
            Some(t) => LayerSchedule::new(self.schedule.delta_t, t),
            None => LayerSchedule::for_grid(&grid, &spec, self.schedule.delta_t),
        };
        s.map_err(|e| bad(format!("schedule: {e}")))
    }

    pub fn ensemble_config(&self) -> Result<EnsembleConfig, ConfigError> {
        Ok(EnsembleConfig::new(self.spec()?, self.grid()?, self.schedule()?, self.replicas, self.seed))
    }

    pub fn test_function(&self, grid: &Grid) -> TestFunction {
        TestFunction::bump(grid, &self.f.center, self.f.radius, self.f.amplitude)
    }

    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output)
    }

    /// Canonical serialization, the bytes the hash covers.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

/// Resolves a relative output directory against the output-root variable.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
