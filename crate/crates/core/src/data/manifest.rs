use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Domain, DomainSplits, MaskingConfig, NormRecord, SplitFractions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test: [usize; 2],
    pub n_windows: [usize; 3],
}

impl SplitBounds {
    pub fn of(splits: &DomainSplits) -> Self {
        let r = |i: usize| [splits.bounds[i].start, splits.bounds[i].end];
        Self {
            train: r(0),
            val: r(1),
            test: r(2),
            n_windows: [splits.train.len(), splits.val.len(), splits.test.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub domain: Domain,
    pub path: String,
    pub feature_names: Vec<String>,
    pub n_rows: usize,
    pub sample_period: Option<f64>,
    pub bounds: SplitBounds,
    pub norm: NormRecord,
}

/// Everything needed to rebuild the exact windows, normalization and masks
/// of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub window_len: usize,
    pub train_stride: usize,
    pub fractions: SplitFractions,
    pub masking: MaskingConfig,
    pub domains: Vec<DomainManifest>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| DataError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| DataError::Serde(e.to_string()))
    }
}
