use std::ops::Range;
use std::path::Path;

use chrono::NaiveDateTime;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{DataError, Domain, DomainDataset, Split, TimeWindow, WindowId};

/// A whole series as read from disk: one row per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<String>,
    pub feature_names: Vec<String>,
    /// rows × features
    pub values: Array2<f64>,
    pub observed: Array2<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowOptions {
    pub len: usize,
    pub stride: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplits {
    pub train: DomainDataset,
    pub val: DomainDataset,
    pub test: DomainDataset,
    /// Row ranges of the three splits in the underlying table.
    pub bounds: [Range<usize>; 3],
}

impl SeriesTable {
    /// Reads a CSV whose first column is a timestamp. `schema`, when given,
    /// selects (and orders) the feature columns by header name.
    pub fn from_csv(path: &Path, schema: Option<&[String]>) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        Self::from_reader(file, schema)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, schema: Option<&[String]>) -> Result<Self, DataError> {
        let mut rdr = ::csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header.len() < 2 {
            return Err(DataError::Schema("expected a timestamp column plus at least one feature".into()));
        }
        let columns: Vec<usize> = match schema {
            None => (1..header.len()).collect(),
            Some(names) => names
                .iter()
                .map(|n| {
                    header[1..]
                        .iter()
                        .position(|h| h == n)
                        .map(|p| p + 1)
                        .ok_or_else(|| DataError::Schema(format!("column '{n}' not found in header")))
                })
                .collect::<Result<_, _>>()?,
        };
        let feature_names: Vec<String> = columns.iter().map(|&c| header[c].clone()).collect();

        let mut timestamps = Vec::new();
        let mut flat = Vec::new();
        let mut obs = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            // 1-based data row number, header excluded
            let row = i + 1;
            if record.len() != header.len() {
                return Err(DataError::Schema(format!(
                    "row {row} has {} columns, header has {}",
                    record.len(),
                    header.len()
                )));
            }
            timestamps.push(record[0].trim().to_string());
            for &c in &columns {
                let cell = record[c].trim();
                if cell.is_empty() {
                    flat.push(0.0);
                    obs.push(false);
                } else {
                    let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                        DataError::Parse { row, column: header[c].clone(), cell: cell.to_string() }
                    })?;
                    flat.push(v);
                    obs.push(true);
                }
            }
        }
        let rows = timestamps.len();
        let k = columns.len();
        Ok(Self {
            timestamps,
            feature_names,
            values: Array2::from_shape_vec((rows, k), flat).expect("row-major fill"),
            observed: Array2::from_shape_vec((rows, k), obs).expect("row-major fill"),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.timestamps.len()
    }

    /// Seconds between the first two timestamps, when both parse as numbers
    /// or as date-times.
    pub fn sample_period(&self) -> Option<f64> {
        let a = parse_timestamp(self.timestamps.first()?)?;
        let b = parse_timestamp(self.timestamps.get(1)?)?;
        Some(b - a)
    }

    /// Cuts windows of `opts.len` rows starting every `opts.stride` rows within
    /// `rows`. Trailing rows that do not fill a window are dropped.
    pub fn windows(&self, rows: Range<usize>, opts: &WindowOptions, domain: Domain) -> DomainDataset {
        assert!(opts.len > 0 && opts.stride > 0, "window length and stride must be positive");
        let mut windows = Vec::new();
        let mut start = rows.start;
        while start + opts.len <= rows.end {
            let values = self.values.slice(s![start..start + opts.len, ..]).t().to_owned();
            let obs = self.observed.slice(s![start..start + opts.len, ..]).t().to_owned();
            windows.push(TimeWindow::new(WindowId(start as u64), domain, values, obs));
            start += opts.stride;
        }
        DomainDataset {
            domain,
            split: opts.split,
            windows,
            feature_names: self.feature_names.clone(),
            sample_period: self.sample_period(),
        }
    }
}

fn parse_timestamp(s: &str) -> Option<f64> {
    if let Ok(v) = s.parse::<f64>() {
        return Some(v);
    }
    const FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M"];
    for f in FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t.and_utc().timestamp() as f64);
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc().timestamp() as f64)
}

/// Loads a whole CSV as one split of one domain.
pub fn load_csv(
    path: &Path,
    schema: Option<&[String]>,
    opts: &WindowOptions,
    domain: Domain,
) -> Result<DomainDataset, DataError> {
    let table = SeriesTable::from_csv(path, schema)?;
    Ok(table.windows(0..table.n_rows(), opts, domain))
}

/// Chronological train/val/test split. Val and test windows never overlap;
/// train windows use `train_stride`.
pub fn split_series(
    table: &SeriesTable,
    fractions: &SplitFractions,
    window_len: usize,
    train_stride: usize,
    domain: Domain,
) -> DomainSplits {
    let n = table.n_rows();
    let n_train = (n as f64 * fractions.train).floor() as usize;
    let n_val = (n as f64 * fractions.val).floor() as usize;
    let bounds = [0..n_train, n_train..n_train + n_val, n_train + n_val..n];
    let mk = |r: Range<usize>, split, stride| {
        table.windows(r, &WindowOptions { len: window_len, stride, split }, domain)
    };
    DomainSplits {
        train: mk(bounds[0].clone(), Split::Train, train_stride),
        val: mk(bounds[1].clone(), Split::Val, window_len),
        test: mk(bounds[2].clone(), Split::Test, window_len),
        bounds,
    }
}
