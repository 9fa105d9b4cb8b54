//! Deterministic and probabilistic imputation metrics.

use serde::{Deserialize, Serialize};

/// Quantile levels 0.05, 0.10, ..., 0.95.
pub fn quantile_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Linear-interpolated quantile of sorted data at `q ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of an empty sample");
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// Pinball loss `ρ_q(y, x) = (x − y)·(1{y ≤ x} − q)`.
pub fn pinball(y: f64, x: f64, q: f64) -> f64 {
    let ind = if y <= x { 1.0 } else { 0.0 };
    ((x - y) * (ind - q)).abs()
}

/// `(1/19)·Σ_q 2·ρ_q(y, Q_q)` for one position, before normalization.
pub fn quantile_crps(samples: &[f64], truth: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let levels = quantile_levels();
    levels.iter().map(|&q| 2.0 * pinball(truth, quantile_sorted(&s, q), q)).sum::<f64>() / levels.len() as f64
}

/// Exact empirical CRPS `E|X − y| − ½·E|X − X′|` over all sample pairs.
pub fn empirical_crps(samples: &[f64], truth: f64) -> f64 {
    let n = samples.len() as f64;
    let first = samples.iter().map(|x| (x - truth).abs()).sum::<f64>() / n;
    let mut pair = 0.0;
    for a in samples {
        for b in samples {
            pair += (a - b).abs();
        }
    }
    first - 0.5 * pair / (n * n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    pub feature: String,
    pub mae: f64,
    pub rmse: f64,
    pub crps: f64,
    pub n_eval_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub crps: f64,
    pub n_eval_points: usize,
    pub per_feature: Vec<FeatureMetrics>,
    pub runtime_seconds: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no evaluation targets")]
    Empty,
    #[error("feature index {0} out of range")]
    Feature(usize),
}

#[derive(Debug, Clone, Default)]
struct Acc {
    abs: f64,
    sq: f64,
    crps: f64,
    norm: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, point: f64, truth: f64, samples: &[f64]) {
        let e = point - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.crps += quantile_crps(samples, truth);
        self.norm += truth.abs();
        self.n += 1;
    }

    fn finish(&self) -> (f64, f64, f64) {
        let n = self.n as f64;
        // an all-zero truth leaves the normalizer at 0; report the raw mean then
        let crps = if self.norm > 0.0 { self.crps / self.norm } else { self.crps / n };
        (self.abs / n, (self.sq / n).sqrt(), crps)
    }
}

/// Streams evaluation points into a [`MetricsReport`]. Values should already
/// be in the units the report is meant to use.
#[derive(Debug, Clone)]
pub struct MetricsBuilder {
    names: Vec<String>,
    total: Acc,
    per: Vec<Acc>,
}

impl MetricsBuilder {
    pub fn new(feature_names: &[String]) -> Self {
        Self { names: feature_names.to_vec(), total: Acc::default(), per: vec![Acc::default(); feature_names.len()] }
    }

    pub fn add(&mut self, feature: usize, point: f64, truth: f64, samples: &[f64]) -> Result<(), MetricsError> {
        let acc = self.per.get_mut(feature).ok_or(MetricsError::Feature(feature))?;
        acc.add(point, truth, samples);
        self.total.add(point, truth, samples);
        Ok(())
    }

    pub fn finish(&self, runtime_seconds: f64) -> Result<MetricsReport, MetricsError> {
        if self.total.n == 0 {
            return Err(MetricsError::Empty);
        }
        let (mae, rmse, crps) = self.total.finish();
        let per_feature = self
            .names
            .iter()
            .zip(&self.per)
            .filter(|(_, a)| a.n > 0)
            .map(|(name, a)| {
                let (mae, rmse, crps) = a.finish();
                FeatureMetrics { feature: name.clone(), mae, rmse, crps, n_eval_points: a.n }
            })
            .collect();
        Ok(MetricsReport { mae, rmse, crps, n_eval_points: self.total.n, per_feature, runtime_seconds })
    }
}
