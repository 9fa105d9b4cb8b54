//! Multivariate series windows, observation/target masks, and normalization.

mod csv;
mod manifest;
mod masking;
mod normalize;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

pub use self::csv::{load_csv, split_series, DomainSplits, SeriesTable, SplitFractions, WindowOptions};
pub use self::manifest::{DatasetManifest, DomainManifest, SplitBounds};
pub use self::masking::{
    apply_test_pattern, apply_train_masking, draw_test_blocks, draw_train_block, round_count, Block,
    MaskingConfig, TestPattern, TrainStrategy,
};
pub use self::normalize::{normalize_splits, NormRecord};

/// Value stored at unobserved positions until interpolation fills them.
pub const MISSING_SENTINEL: f64 = 0.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] ::csv::Error),
    #[error("row {row}, column '{column}': cannot parse '{cell}' as a number")]
    Parse { row: usize, column: String, cell: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("feature '{0}' has no observed entries in the training split")]
    NoObservedFeature(String),
    #[error("window {0} has no observed positions")]
    NoObserved(WindowId),
    #[error("invalid masking config: {0}")]
    InvalidMasking(String),
    #[error("unknown domain '{0}' (expected 'source' or 'target')")]
    UnknownDomain(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "source" | "src" => Ok(Domain::Source),
            "target" | "tgt" => Ok(Domain::Target),
            _ => Err(DataError::UnknownDomain(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Window identifier: the row offset of the window's first timestamp in its
/// source series. Unique within a domain across all splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowId(pub u64);

impl fmt::Display for WindowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A K×L slice of a multivariate series (features × timestamps).
///
/// The target mask is derived rather than stored: a position is a target when
/// it was originally missing or has been artificially masked, and artificial
/// masks are only ever placed on observed positions. This keeps the partition
/// `cond ∪ artificial ∪ original-missing` exact by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWindow {
    pub window_id: WindowId,
    pub domain: Domain,
    pub values: Array2<f64>,
    pub obs_mask: Array2<bool>,
    pub artificial_mask: Array2<bool>,
    pub norm: Option<NormRecord>,
}

impl TimeWindow {
    /// Builds a window, writing the sentinel into every unobserved cell.
    pub fn new(window_id: WindowId, domain: Domain, mut values: Array2<f64>, obs_mask: Array2<bool>) -> Self {
        assert_eq!(values.dim(), obs_mask.dim(), "values and mask shapes differ");
        Zip::from(&mut values).and(&obs_mask).for_each(|v, &o| {
            if !o {
                *v = MISSING_SENTINEL;
            }
        });
        let artificial_mask = Array2::from_elem(obs_mask.dim(), false);
        Self { window_id, domain, values, obs_mask, artificial_mask, norm: None }
    }

    pub fn n_features(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_observed(&self) -> usize {
        self.obs_mask.iter().filter(|&&o| o).count()
    }

    /// Observed and not artificially masked.
    pub fn cond_mask(&self) -> Array2<bool> {
        Zip::from(&self.obs_mask).and(&self.artificial_mask).map_collect(|&o, &a| o && !a)
    }

    /// Original-missing ∪ artificially masked.
    pub fn target_mask(&self) -> Array2<bool> {
        Zip::from(&self.obs_mask).and(&self.artificial_mask).map_collect(|&o, &a| !o || a)
    }

    pub fn original_missing_mask(&self) -> Array2<bool> {
        self.obs_mask.mapv(|o| !o)
    }

    /// Conditional observations X^co: values at conditional positions, sentinel elsewhere.
    pub fn x_cond(&self) -> Array2<f64> {
        let mut out = self.values.clone();
        Zip::from(&mut out).and(&self.obs_mask).and(&self.artificial_mask).for_each(|v, &o, &a| {
            if !o || a {
                *v = MISSING_SENTINEL;
            }
        });
        out
    }

    pub fn n_artificial(&self) -> usize {
        self.artificial_mask.iter().filter(|&&a| a).count()
    }
}

/// A single split of one domain's windows.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub split: Split,
    pub windows: Vec<TimeWindow>,
    pub feature_names: Vec<String>,
    /// Seconds between consecutive rows, when the timestamps could be parsed.
    pub sample_period: Option<f64>,
}

impl DomainDataset {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn window_len(&self) -> Option<usize> {
        self.windows.first().map(TimeWindow::len)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}
