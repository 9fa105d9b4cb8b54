//! Configuration, data preparation, training, checkpointing, evaluation and
//! ablations.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod metrics;
pub mod synth;
pub mod train;

use std::path::Path;

use crate::cdca::AlignError;
use crate::data::{
    normalize_splits, split_series, DataError, DatasetManifest, Domain, DomainManifest, DomainSplits, NormRecord,
    SeriesTable, SplitBounds,
};
use crate::diffusion::DiffusionError;
use crate::fmixup::FmixupError;

pub use self::config::{ConfigError, RunConfig};
pub use self::metrics::{MetricsError, MetricsReport};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Fmixup(#[from] FmixupError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io { path: path.display().to_string(), source }
    }
}

/// One domain's series, windows and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub table: SeriesTable,
    pub splits: DomainSplits,
    pub norm: NormRecord,
}

impl DomainData {
    pub fn feature_names(&self) -> &[String] {
        &self.table.feature_names
    }
}

/// Both domains ready for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub source: DomainData,
    pub target: DomainData,
    pub manifest: DatasetManifest,
}

impl Prepared {
    pub fn domain(&self, d: Domain) -> &DomainData {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn n_features(&self) -> usize {
        self.target.table.feature_names.len()
    }
}

fn prepare_domain(cfg: &RunConfig, table: SeriesTable, domain: Domain) -> Result<DomainData, HarnessError> {
    let mut splits = split_series(&table, &cfg.data.fractions, cfg.data.window_len, cfg.data.stride(), domain);
    if splits.train.is_empty() {
        return Err(HarnessError::Invalid(format!(
            "{domain} series has {} rows, too few for a training window of length {}",
            table.n_rows(),
            cfg.data.window_len
        )));
    }
    let norm = normalize_splits(&mut splits)?;
    Ok(DomainData { table, splits, norm })
}

/// Splits and normalizes already-loaded tables.
pub fn prepare_tables(cfg: &RunConfig, source: SeriesTable, target: SeriesTable) -> Result<Prepared, HarnessError> {
    if source.feature_names.len() != target.feature_names.len() {
        return Err(HarnessError::Invalid(format!(
            "source has {} features but target has {}",
            source.feature_names.len(),
            target.feature_names.len()
        )));
    }
    let source = prepare_domain(cfg, source, Domain::Source)?;
    let target = prepare_domain(cfg, target, Domain::Target)?;
    let dm = |d: &DomainData, domain: Domain, path: &Path| DomainManifest {
        domain,
        path: path.display().to_string(),
        feature_names: d.table.feature_names.clone(),
        n_rows: d.table.n_rows(),
        sample_period: d.table.sample_period(),
        bounds: SplitBounds::of(&d.splits),
        norm: d.norm.clone(),
    };
    let manifest = DatasetManifest {
        window_len: cfg.data.window_len,
        train_stride: cfg.data.stride(),
        fractions: cfg.data.fractions,
        masking: cfg.masking.clone(),
        domains: vec![dm(&source, Domain::Source, &cfg.data.source), dm(&target, Domain::Target, &cfg.data.target)],
    };
    Ok(Prepared { source, target, manifest })
}

/// Loads both CSVs named by the config, then splits and normalizes them.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, HarnessError> {
    let schema = cfg.data.schema.as_deref();
    let source = SeriesTable::from_csv(&cfg.data.source, schema)?;
    let target = SeriesTable::from_csv(&cfg.data.target, schema)?;
    prepare_tables(cfg, source, target)
}
