//! Run configuration: one TOML file, overridable key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cdca::AlignmentConfig;
use crate::data::{MaskingConfig, SplitFractions};
use crate::denoiser::DenoiserSpec;
use crate::diffusion::ScheduleConfig;
use crate::fmixup::{Interpolation, SpectralMode};
use crate::nn::AdamConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override '{0}': expected key.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Feature columns to read, in order; all non-timestamp columns when absent.
    #[serde(default)]
    pub schema: Option<Vec<String>>,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    /// Stride between training windows; defaults to `window_len`.
    #[serde(default)]
    pub train_stride: Option<usize>,
    #[serde(default)]
    pub fractions: SplitFractions,
}

fn default_window_len() -> usize {
    32
}

impl DataConfig {
    pub fn stride(&self) -> usize {
        self.train_stride.unwrap_or(self.window_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmixupConfig {
    pub alpha: f64,
    pub lambda_range: [f64; 2],
    pub interpolation: Interpolation,
    pub mode: SpectralMode,
}

impl Default for FmixupConfig {
    fn default() -> Self {
        Self { alpha: 0.003, lambda_range: [0.0, 1.0], interpolation: Interpolation::Fmixup, mode: SpectralMode::Joint2d }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of the epoch budget at which the rate switches.
    pub milestones: Vec<f64>,
    /// Rates in force from each milestone on.
    pub lr_after: Vec<f64>,
    pub adam: AdamConfig,
    /// Noise draws per validation window.
    pub val_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            milestones: vec![0.75, 0.90],
            lr_after: vec![1e-4, 1e-5],
            adam: AdamConfig::default(),
            val_draws: 4,
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for (m, &next) in self.milestones.iter().zip(&self.lr_after) {
            if epoch >= (m * self.epochs as f64).ceil() as usize {
                lr = next;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    /// Windows sent through the network together while sampling.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 100, chunk: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub fmixup: FmixupConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: DenoiserSpec,
    pub alignment: AlignmentConfig,
    #[serde(default = "yes")]
    pub cdca_enabled: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        // relative data paths are read relative to the config file
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.source, &mut cfg.data.target] {
            if p.is_relative() {
                let joined = dir.join(&*p);
                *p = std::path::absolute(&joined).unwrap_or(joined);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Checks value ranges. `check_files` also requires the data files to exist.
    pub fn validate(&self, check_files: bool) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.masking.validate(self.data.window_len).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.alignment.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.val_draws == 0 {
            return bad("epochs, batch_size and val_draws must be positive".into());
        }
        if t.milestones.len() != t.lr_after.len() {
            return bad("milestones and lr_after must have the same length".into());
        }
        if t.milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0)) || t.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be increasing inside (0, 1), got {:?}", t.milestones));
        }
        if !(t.lr > 0.0) || t.lr_after.iter().any(|r| !(*r > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        let f = &self.fmixup;
        if !(f.alpha > 0.0 && f.alpha < 1.0) {
            return bad(format!("fmixup.alpha = {} must lie in (0, 1)", f.alpha));
        }
        let [lo, hi] = f.lambda_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("fmixup.lambda_range {:?} must be a sub-interval of [0, 1]", f.lambda_range));
        }
        let fr = &self.data.fractions;
        if [fr.train, fr.val, fr.test].iter().any(|v| *v < 0.0) || (fr.train + fr.val + fr.test - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1".into());
        }
        if self.data.window_len == 0 || self.data.stride() == 0 {
            return bad("window_len and train_stride must be positive".into());
        }
        if self.eval.n_samples == 0 || self.eval.chunk == 0 {
            return bad("eval.n_samples and eval.chunk must be positive".into());
        }
        let mut spec = self.model.clone();
        if spec.n_features == 0 {
            spec.n_features = 1;
        }
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if check_files {
            for p in [&self.data.source, &self.data.target] {
                if !p.is_file() {
                    return bad(format!("data file {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.into()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::Override(format!("{spec} ({p} is not a table)")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
