use std::fmt;
use std::path::{Path, PathBuf};

use edgelab::decomp::Aggregation;
use edgelab::probes::MlpSettings;
use edgelab::trainer::RunConfig;
use serde::{Deserialize, Serialize};

pub const WORKERS_ENV: &str = "EDGELAB_WORKERS";

/// A config problem; maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// An acceptance check that ran and failed; maps to exit code 3.
#[derive(Debug)]
pub struct CheckFailed(pub Vec<String>);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "check failed: {}", self.0.join("; "))
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    #[serde(default)]
    pub suite: Option<SuiteSpec>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub seeds: Vec<u64>,
    pub weight_decays: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Run (or suite) directory; `runs/<task>-<seed>` when absent.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Also write the binary per-step log used by `analyze`.
    #[serde(default)]
    pub step_log: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Test examples used by post-training measurements.
    #[serde(default = "default_eval_limit")]
    pub eval_limit: Option<usize>,
    #[serde(default = "yes")]
    pub ablation: bool,
    #[serde(default = "default_dims")]
    pub ablation_dims: usize,
    #[serde(default = "default_controls")]
    pub controls: usize,
    #[serde(default = "yes")]
    pub probes: bool,
    /// Test sequences whose positions feed the probes.
    #[serde(default = "default_probe_sequences")]
    pub probe_sequences: usize,
    #[serde(default)]
    pub mlp: MlpSettings,
}

fn yes() -> bool {
    true
}
fn default_eval_limit() -> Option<usize> {
    Some(1000)
}
fn default_dims() -> usize {
    2
}
fn default_controls() -> usize {
    20
}
fn default_probe_sequences() -> usize {
    200
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::default(),
            eval_limit: default_eval_limit(),
            ablation: true,
            ablation_dims: default_dims(),
            controls: default_controls(),
            probes: true,
            probe_sequences: default_probe_sequences(),
            mlp: MlpSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError(e.to_string().trim_end().to_string()))?;
        cfg.run.validate().map_err(|e| ConfigError(e.to_string()))?;
        if let Some(s) = &cfg.suite {
            if s.seeds.is_empty() || s.weight_decays.is_empty() {
                return Err(ConfigError(
                    "suite.seeds and suite.weight_decays must be non-empty".into(),
                ));
            }
            if let Some(w) = s.weight_decays.iter().find(|w| !(**w >= 0.0)) {
                return Err(ConfigError(format!(
                    "suite.weight_decays: {w} is not a valid weight decay"
                )));
            }
        }
        if cfg.analysis.ablation_dims == 0 {
            return Err(ConfigError("analysis.ablation_dims must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn output_dir(&self, over: Option<&Path>) -> PathBuf {
        over.map(Path::to_path_buf)
            .or_else(|| self.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", self.run.task.name(), self.run.seed)))
    }
}

/// Worker count from the environment (at least 1).
pub fn workers() -> Result<usize, ConfigError> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(ConfigError(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
    }
}
