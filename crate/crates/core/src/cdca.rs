//! Cross-domain consistency alignment.
//!
//! The target branch and the frozen source branch predict noise on the same
//! target batch; their mean absolute disagreement `Δ` is penalized only inside
//! a band `[τ_l, τ_l + τ_h]`, flat below and capped above.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlignError {
    #[error("invalid alignment config: {0}")]
    Config(String),
    #[error("prediction shapes differ: {0} vs {1}")]
    Shape(usize, usize),
    #[error("non-finite {component} ({value}) at step {step}")]
    NonFinite { component: &'static str, value: f64, step: u64 },
}

/// Thresholds and weight. No serde defaults: a config file must state all three.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub tau_l: f64,
    pub tau_h: f64,
    pub mu_align: f64,
    /// Threshold each target window's discrepancy separately and average the
    /// penalties, instead of thresholding the batch mean.
    #[serde(default)]
    pub per_sample: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { tau_l: 0.05, tau_h: 0.5, mu_align: 1.0, per_sample: false }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let ok = self.tau_l.is_finite()
            && self.tau_h.is_finite()
            && self.mu_align.is_finite()
            && self.tau_l >= 0.0
            && self.tau_h > 0.0
            && self.mu_align >= 0.0
            && self.tau_l < self.tau_h;
        if ok {
            Ok(())
        } else {
            Err(AlignError::Config(format!(
                "need 0 <= tau_l < tau_h, tau_h > 0, mu_align >= 0; got tau_l={}, tau_h={}, mu_align={}",
                self.tau_l, self.tau_h, self.mu_align
            )))
        }
    }
}

/// Mean of `|a − b|` over masked positions; `None` when the mask is empty.
pub fn discrepancy(eps_tgt: &[f64], eps_src_on_tgt: &[f64], mask: &[bool]) -> Result<Option<f64>, AlignError> {
    if eps_tgt.len() != eps_src_on_tgt.len() {
        return Err(AlignError::Shape(eps_tgt.len(), eps_src_on_tgt.len()));
    }
    if mask.len() != eps_tgt.len() {
        return Err(AlignError::Shape(mask.len(), eps_tgt.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), &m) in eps_tgt.iter().zip(eps_src_on_tgt).zip(mask) {
        if m {
            sum += (a - b).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// `0` below `τ_l`, `Δ − τ_l` in the band, `τ_h` beyond it.
pub fn alignment_loss(delta: f64, cfg: &AlignmentConfig) -> f64 {
    if delta < cfg.tau_l {
        0.0
    } else {
        (delta - cfg.tau_l).min(cfg.tau_h)
    }
}

/// `dL_align/dΔ`: 1 inside `[τ_l, τ_l + τ_h)`, 0 elsewhere.
pub fn alignment_slope(delta: f64, cfg: &AlignmentConfig) -> f64 {
    if delta >= cfg.tau_l && delta - cfg.tau_l < cfg.tau_h {
        1.0
    } else {
        0.0
    }
}

/// `L_src + L_tgt + μ·L_align`, refusing non-finite parts.
pub fn total_loss(l_src: f64, l_tgt: f64, l_align: f64, cfg: &AlignmentConfig, step: u64) -> Result<f64, AlignError> {
    for (component, value) in [("L_src", l_src), ("L_tgt", l_tgt), ("L_align", l_align)] {
        if !value.is_finite() {
            return Err(AlignError::NonFinite { component, value, step });
        }
    }
    Ok(l_src + l_tgt + cfg.mu_align * l_align)
}

/// Value and gradient of `μ·L_align` for a batch of target-branch predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTerm {
    pub delta: f64,
    pub loss: f64,
    /// `∂(μ·L_align)/∂ε̂_tgt`; all zeros in the flat regions.
    pub grad: Vec<f64>,
}

/// Computes `Δ`, `L_align` and the gradient w.r.t. the target predictions.
/// `per_item` is the number of positions per window (`K·L`).
pub fn alignment_term(
    eps_tgt: &[f64],
    eps_src_on_tgt: &[f64],
    mask: &[bool],
    per_item: usize,
    cfg: &AlignmentConfig,
) -> Result<Option<AlignmentTerm>, AlignError> {
    let Some(delta) = discrepancy(eps_tgt, eps_src_on_tgt, mask)? else {
        return Ok(None);
    };
    let mut grad = vec![0.0; eps_tgt.len()];
    if !cfg.per_sample {
        let slope = alignment_slope(delta, cfg);
        if slope != 0.0 {
            let n = mask.iter().filter(|&&m| m).count() as f64;
            for i in 0..grad.len() {
                if mask[i] {
                    grad[i] = cfg.mu_align * slope * (eps_tgt[i] - eps_src_on_tgt[i]).signum() / n;
                }
            }
        }
        return Ok(Some(AlignmentTerm { delta, loss: alignment_loss(delta, cfg), grad }));
    }
    let n_items = eps_tgt.len() / per_item.max(1);
    let mut losses = Vec::new();
    let mut used = Vec::new();
    for b in 0..n_items {
        let r = b * per_item..(b + 1) * per_item;
        if let Some(d) = discrepancy(&eps_tgt[r.clone()], &eps_src_on_tgt[r.clone()], &mask[r.clone()])? {
            losses.push(alignment_loss(d, cfg));
            used.push((b, d));
        }
    }
    let m = losses.len() as f64;
    for &(b, d) in &used {
        let slope = alignment_slope(d, cfg);
        if slope == 0.0 {
            continue;
        }
        let r = b * per_item..(b + 1) * per_item;
        let n = mask[r.clone()].iter().filter(|&&x| x).count() as f64;
        for i in r {
            if mask[i] {
                grad[i] = cfg.mu_align * slope * (eps_tgt[i] - eps_src_on_tgt[i]).signum() / (n * m);
            }
        }
    }
    Ok(Some(AlignmentTerm { delta, loss: losses.iter().sum::<f64>() / m, grad }))
}
