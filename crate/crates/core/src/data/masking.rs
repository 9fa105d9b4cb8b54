//! Train-time self-supervision masks and test-time missing-pattern simulators.
//!
//! Artificial masks are only ever drawn from observed positions, since the
//! held-out value is needed as ground truth.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, TimeWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStrategy {
    Point,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestPattern {
    Point,
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub train_strategy: TrainStrategy,
    pub point_ratio_range: [f64; 2],
    pub block_extra_point_ratio: f64,
    pub test_pattern: TestPattern,
    pub test_point_rate: f64,
    pub test_block_point_rate: f64,
    pub test_block_prob: f64,
    pub test_block_len_range: [usize; 2],
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            train_strategy: TrainStrategy::Point,
            point_ratio_range: [0.0, 1.0],
            block_extra_point_ratio: 0.05,
            test_pattern: TestPattern::Point,
            test_point_rate: 0.10,
            test_block_point_rate: 0.05,
            test_block_prob: 0.0015,
            test_block_len_range: [1, 4],
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self, window_len: usize) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidMasking(m));
        let [lo, hi] = self.point_ratio_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad(format!("point_ratio_range [{lo}, {hi}] must be an interval inside [0, 1]"));
        }
        for (name, p) in [
            ("block_extra_point_ratio", self.block_extra_point_ratio),
            ("test_point_rate", self.test_point_rate),
            ("test_block_point_rate", self.test_block_point_rate),
            ("test_block_prob", self.test_block_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        let [a, b] = self.test_block_len_range;
        if a == 0 || a > b || b > window_len {
            return bad(format!("test_block_len_range [{a}, {b}] must be nonempty, positive and ≤ L = {window_len}"));
        }
        Ok(())
    }
}

/// `round(rate · n)` with ties to even.
pub fn round_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round_ties_even() as usize).min(n)
}

/// A contiguous run of timestamps `[start, start + len)`, optionally tied to one feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub feature: Option<usize>,
    pub start: usize,
    pub len: usize,
}

/// Train-time block: length uniform on `[⌈L/2⌉, L]`, start uniform over the
/// positions where it fits. Spans all features.
pub fn draw_train_block<R: Rng + ?Sized>(window_len: usize, rng: &mut R) -> Block {
    let min_len = window_len.div_ceil(2).max(1);
    let len = rng.random_range(min_len..=window_len);
    let start = rng.random_range(0..=window_len - len);
    Block { feature: None, start, len }
}

/// Test-time blocks: every (feature, timestamp) independently starts a block
/// with probability `prob`, of length uniform on `len_range`.
pub fn draw_test_blocks<R: Rng + ?Sized>(
    n_features: usize,
    window_len: usize,
    prob: f64,
    len_range: [usize; 2],
    rng: &mut R,
) -> Vec<Block> {
    let mut blocks = Vec::new();
    for k in 0..n_features {
        for l in 0..window_len {
            if rng.random_bool(prob) {
                let len = rng.random_range(len_range[0]..=len_range[1]);
                blocks.push(Block { feature: Some(k), start: l, len });
            }
        }
    }
    blocks
}

fn observed_positions(w: &TimeWindow) -> Vec<(usize, usize)> {
    w.obs_mask.indexed_iter().filter(|(_, &o)| o).map(|(p, _)| p).collect()
}

fn mask_random_points<R: Rng + ?Sized>(mask: &mut Array2<bool>, observed: &[(usize, usize)], n: usize, rng: &mut R) {
    for i in index::sample(rng, observed.len(), n).into_iter() {
        mask[observed[i]] = true;
    }
}

fn mask_block(mask: &mut Array2<bool>, obs: &Array2<bool>, block: &Block) {
    let (k, l) = obs.dim();
    let features = match block.feature {
        Some(f) => f..f + 1,
        None => 0..k,
    };
    for f in features {
        for t in block.start..(block.start + block.len).min(l) {
            if obs[[f, t]] {
                mask[[f, t]] = true;
            }
        }
    }
}

/// Replaces the window's artificial mask with a fresh train-time mask.
pub fn apply_train_masking<R: Rng + ?Sized>(
    window: &TimeWindow,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<TimeWindow, DataError> {
    let observed = observed_positions(window);
    if observed.is_empty() {
        return Err(DataError::NoObserved(window.window_id));
    }
    let mut mask = Array2::from_elem(window.obs_mask.dim(), false);
    match cfg.train_strategy {
        TrainStrategy::Point => {
            let [lo, hi] = cfg.point_ratio_range;
            let r = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            mask_random_points(&mut mask, &observed, round_count(r, observed.len()), rng);
        }
        TrainStrategy::Block => {
            let block = draw_train_block(window.len(), rng);
            mask_block(&mut mask, &window.obs_mask, &block);
            let extra = round_count(cfg.block_extra_point_ratio, observed.len());
            mask_random_points(&mut mask, &observed, extra, rng);
        }
    }
    let mut out = window.clone();
    out.artificial_mask = mask;
    Ok(out)
}

/// Replaces the window's artificial mask with evaluation targets drawn
/// according to the configured test pattern.
pub fn apply_test_pattern<R: Rng + ?Sized>(
    window: &TimeWindow,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<TimeWindow, DataError> {
    let observed = observed_positions(window);
    if observed.is_empty() {
        return Err(DataError::NoObserved(window.window_id));
    }
    let mut mask = Array2::from_elem(window.obs_mask.dim(), false);
    match cfg.test_pattern {
        TestPattern::Point => {
            mask_random_points(&mut mask, &observed, round_count(cfg.test_point_rate, observed.len()), rng);
        }
        TestPattern::Block => {
            let n = round_count(cfg.test_block_point_rate, observed.len());
            mask_random_points(&mut mask, &observed, n, rng);
            let blocks = draw_test_blocks(
                window.n_features(),
                window.len(),
                cfg.test_block_prob,
                cfg.test_block_len_range,
                rng,
            );
            for b in &blocks {
                mask_block(&mut mask, &window.obs_mask, b);
            }
        }
    }
    let mut out = window.clone();
    out.artificial_mask = mask;
    Ok(out)
}
