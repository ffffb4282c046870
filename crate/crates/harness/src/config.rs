//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7
//! strategies = ["random", "christoffel_greedy", "online_christoffel"]
//! m_values = [2, 4, 8]
//! n_seeds = 10
//!
//! [dataset]
//! name = "bump1d"
//! seed = 1
//! grid = [64]
//! n_snapshots = 200
//!
//! [dataset.generator]
//! kind = "bump"
//! width = 0.08
//! amplitude = [0.5, 1.5]
//!
//! [sampler]
//! n_steps = 50
//!
//! [online]
//! n_ensemble = 8
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Every table except `[dataset]` is optional and falls back to defaults.
//! Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use osp_core::dps::SamplerConfig;
use osp_core::online::{OnlineConfig, ScoreMode};
use osp_core::placement::{PlacementRequest, RankPolicy, Strategy};
use osp_core::ScoreWeighting;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

/// A placement strategy of the sweep: offline placement followed by one
/// guided reconstruction, or the online ensemble algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchStrategy {
    Offline(Strategy),
    Online(ScoreMode),
}

impl BenchStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Offline(s) => s.name(),
            Self::Online(ScoreMode::Christoffel) => "online_christoffel",
            Self::Online(ScoreMode::EnsembleStd) => "online_ensemble_std",
        }
    }
}

impl fmt::Display for BenchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchStrategy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "online_christoffel" => Ok(Self::Online(ScoreMode::Christoffel)),
            "online_ensemble_std" => Ok(Self::Online(ScoreMode::EnsembleStd)),
            _ => s
                .parse::<Strategy>()
                .map(Self::Offline)
                .map_err(|_| HarnessError::UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    Bump {
        width: f64,
        amplitude: [f64; 2],
    },
    UnionSubspaces {
        n_subspaces: usize,
        dim_per: usize,
    },
    Gmm {
        components: usize,
        separation: f64,
        width: f64,
        component_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub seed: u64,
    /// `[n]` for a line, `[nx, ny]` for a rectangle.
    pub grid: Vec<usize>,
    #[serde(default = "default_snapshots")]
    pub n_snapshots: usize,
    /// Kernel width of the snapshot mixture prior (bump and subspace
    /// generators); `None` uses [`crate::datasets`]' default rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    pub generator: Generator,
}

fn default_snapshots() -> usize {
    200
}

impl DatasetSpec {
    pub fn n_nodes(&self) -> usize {
        self.grid.iter().product()
    }
}

/// Knobs forwarded to every offline placement request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSettings {
    pub eps_reg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pod_modes: Option<usize>,
    pub rank_policy: RankPolicy,
    pub weighting: ScoreWeighting,
    pub replacement: bool,
    pub pair_cap: usize,
}

impl Default for PlacementSettings {
    fn default() -> Self {
        Self {
            eps_reg: 1e-4,
            pod_modes: None,
            rank_policy: RankPolicy::Keep,
            weighting: ScoreWeighting::MuStar,
            replacement: false,
            pair_cap: 200_000,
        }
    }
}

impl PlacementSettings {
    pub fn request(&self, strategy: Strategy, m: usize, seed: u64, sigma_eta: f64) -> PlacementRequest {
        PlacementRequest {
            eps_reg: self.eps_reg,
            sigma_eta,
            pod_modes: self.pod_modes,
            rank_policy: self.rank_policy,
            weighting: self.weighting,
            replacement: self.replacement,
            ..PlacementRequest::new(strategy, m, seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Write one JSON trace per online cell under `dir/traces`.
    pub traces: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            traces: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of the placement, noise and sampler seed streams.
    pub seed: u64,
    pub strategies: Vec<String>,
    pub m_values: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    /// Offline cells average this many guided chains.
    #[serde(default = "default_chains")]
    pub n_chains: usize,
    /// Reading noise; `None` means the sampler's `sigma_eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    /// Record wall-clock time per cell. Off by default so output bytes
    /// depend on the config alone.
    #[serde(default)]
    pub timing: bool,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub placement: PlacementSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online: Option<OnlineConfig>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_seeds() -> usize {
    10
}

fn default_chains() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::from_io(e, path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parsed strategy list, in config order.
    pub fn bench_strategies(&self) -> Result<Vec<BenchStrategy>, HarnessError> {
        self.strategies.iter().map(|s| s.parse()).collect()
    }

    pub fn online_config(&self) -> OnlineConfig {
        self.online.clone().unwrap_or_default()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std.unwrap_or(self.sampler.sigma_eta)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let strategies = self.bench_strategies()?;
        if strategies.is_empty() {
            return bad("strategies must not be empty".into());
        }
        if self.m_values.is_empty() {
            return bad("m_values must not be empty".into());
        }
        let d = &self.dataset;
        if d.grid.is_empty() || d.grid.len() > 2 || d.grid.contains(&0) {
            return bad(format!("grid must be [n] or [nx, ny] with positive sizes, got {:?}", d.grid));
        }
        if matches!(d.generator, Generator::UnionSubspaces { .. }) && d.grid.len() != 1 {
            return bad("union_subspaces needs a 1-d grid".into());
        }
        let n = d.n_nodes();
        if let Some(&m) = self.m_values.iter().find(|&&m| m == 0 || m > n) {
            return bad(format!("m = {m} outside 1..={n}"));
        }
        if self.n_seeds == 0 {
            return bad("n_seeds must be at least 1".into());
        }
        if self.n_chains == 0 {
            return bad("n_chains must be at least 1".into());
        }
        if d.n_snapshots < 2 {
            return bad("need at least 2 snapshots".into());
        }
        if let Some(s) = self.noise_std {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("noise_std must be finite and nonnegative".into());
            }
        }
        self.sampler
            .validate()
            .map_err(|e| HarnessError::Config(format!("sampler: {e}")))?;
        if strategies.iter().any(|s| matches!(s, BenchStrategy::Online(_))) {
            self.online_config()
                .validate()
                .map_err(|e| HarnessError::Config(format!("online: {e}")))?;
        }
        Ok(())
    }
}
