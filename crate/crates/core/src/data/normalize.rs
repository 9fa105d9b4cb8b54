use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{DataError, DomainDataset, DomainSplits, MISSING_SENTINEL};

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormRecord {
    pub fn identity(k: usize) -> Self {
        Self { mean: vec![0.0; k], scale: vec![1.0; k] }
    }

    /// Fits mean and population standard deviation over the observed entries
    /// of `train`. Timestamps covered by several overlapping windows count
    /// once. Constant features get scale 1.
    pub fn fit(train: &DomainDataset) -> Result<Self, DataError> {
        let k = train.n_features();
        let mut seen: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); k];
        let mut sum = vec![0.0; k];
        let mut sum_sq = vec![0.0; k];
        let mut count = vec![0usize; k];
        for w in &train.windows {
            for f in 0..k {
                for l in 0..w.len() {
                    if !w.obs_mask[[f, l]] || !seen[f].insert(w.window_id.0 + l as u64) {
                        continue;
                    }
                    let v = w.values[[f, l]];
                    sum[f] += v;
                    count[f] += 1;
                }
            }
        }
        let mut mean = vec![0.0; k];
        for f in 0..k {
            if count[f] == 0 {
                return Err(DataError::NoObservedFeature(train.feature_names[f].clone()));
            }
            mean[f] = sum[f] / count[f] as f64;
        }
        // second pass for a numerically stable variance
        for s in seen.iter_mut() {
            s.clear();
        }
        for w in &train.windows {
            for f in 0..k {
                for l in 0..w.len() {
                    if w.obs_mask[[f, l]] && seen[f].insert(w.window_id.0 + l as u64) {
                        let d = w.values[[f, l]] - mean[f];
                        sum_sq[f] += d * d;
                    }
                }
            }
        }
        let scale = (0..k)
            .map(|f| {
                let sd = (sum_sq[f] / count[f] as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn normalize_value(&self, feature: usize, v: f64) -> f64 {
        (v - self.mean[feature]) / self.scale[feature]
    }

    pub fn denormalize_value(&self, feature: usize, v: f64) -> f64 {
        v * self.scale[feature] + self.mean[feature]
    }

    /// Normalizes observed entries in place; unobserved entries hold the sentinel.
    pub fn apply(&self, dataset: &mut DomainDataset) {
        for w in &mut dataset.windows {
            for ((f, l), v) in w.values.indexed_iter_mut() {
                *v = if w.obs_mask[[f, l]] { self.normalize_value(f, *v) } else { MISSING_SENTINEL };
            }
            w.norm = Some(self.clone());
        }
    }

    /// Inverse of [`NormRecord::apply`] on observed entries.
    pub fn revert(&self, dataset: &mut DomainDataset) {
        for w in &mut dataset.windows {
            for ((f, l), v) in w.values.indexed_iter_mut() {
                if w.obs_mask[[f, l]] {
                    *v = self.denormalize_value(f, *v);
                }
            }
            w.norm = None;
        }
    }
}

/// Fits statistics on the training split only and applies them to all three.
pub fn normalize_splits(splits: &mut DomainSplits) -> Result<NormRecord, DataError> {
    let rec = NormRecord::fit(&splits.train)?;
    rec.apply(&mut splits.train);
    rec.apply(&mut splits.val);
    rec.apply(&mut splits.test);
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_series, Domain, SeriesTable, SplitFractions};
    use ndarray::Array2;

    fn table(rows: usize, f: impl Fn(usize, usize) -> Option<f64>) -> SeriesTable {
        let k = 3;
        let mut values = Array2::zeros((rows, k));
        let mut observed = Array2::from_elem((rows, k), false);
        for r in 0..rows {
            for c in 0..k {
                if let Some(v) = f(r, c) {
                    values[[r, c]] = v;
                    observed[[r, c]] = true;
                }
            }
        }
        SeriesTable {
            timestamps: (0..rows).map(|r| r.to_string()).collect(),
            feature_names: vec!["a".into(), "b".into(), "c".into()],
            values,
            observed,
        }
    }

    #[test]
    fn z_score_and_zero_variance_guard() {
        // feature a alternates 8/12 (mean 10, sd 2); b constant; c ramps
        let t = table(40, |r, c| match c {
            0 => Some(if r % 2 == 0 { 8.0 } else { 12.0 }),
            1 => Some(5.0),
            _ => Some(r as f64),
        });
        let mut sp = split_series(&t, &SplitFractions { train: 0.5, val: 0.25, test: 0.25 }, 4, 4, Domain::Target);
        let rec = normalize_splits(&mut sp).unwrap();
        assert!((rec.mean[0] - 10.0).abs() < 1e-12);
        assert!((rec.scale[0] - 2.0).abs() < 1e-12);
        assert_eq!(rec.scale[1], 1.0);
        assert!((rec.normalize_value(0, 14.0) - 2.0).abs() < 1e-12);
        assert!(sp.train.windows.iter().all(|w| w.values.row(1).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn round_trip_is_identity() {
        let t = table(60, |r, c| if (r + c) % 7 == 0 { None } else { Some((r * 3 + c) as f64 * 1.37 - 20.0) });
        let sp0 = split_series(&t, &SplitFractions::default(), 6, 3, Domain::Source);
        let mut sp = sp0.clone();
        let rec = normalize_splits(&mut sp).unwrap();
        rec.revert(&mut sp.train);
        rec.revert(&mut sp.test);
        for (a, b) in sp0.train.windows.iter().chain(&sp0.test.windows).zip(sp.train.windows.iter().chain(&sp.test.windows)) {
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn statistics_ignore_val_and_test() {
        let t = table(50, |r, c| Some(((r * 7 + c * 3) % 11) as f64));
        let mut clean = split_series(&t, &SplitFractions::default(), 5, 5, Domain::Target);
        let mut poisoned = clean.clone();
        for w in poisoned.val.windows.iter_mut().chain(poisoned.test.windows.iter_mut()) {
            w.values.fill(f64::NAN);
        }
        let a = normalize_splits(&mut clean).unwrap();
        let b = normalize_splits(&mut poisoned).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlapping_windows_count_timestamps_once() {
        let t = table(20, |r, _| Some(if r < 2 { 100.0 } else { 0.0 }));
        let strided = split_series(&t, &SplitFractions { train: 1.0, val: 0.0, test: 0.0 }, 4, 1, Domain::Target);
        let rec = NormRecord::fit(&strided.train).unwrap();
        assert!((rec.mean[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn feature_without_observations_is_named() {
        let t = table(20, |_, c| if c == 2 { None } else { Some(1.0) });
        let sp = split_series(&t, &SplitFractions::default(), 4, 4, Domain::Target);
        match NormRecord::fit(&sp.train) {
            Err(DataError::NoObservedFeature(name)) => assert_eq!(name, "c"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
