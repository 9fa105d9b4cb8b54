//! Noise schedule, forward corruption, reverse sampling and the masked
//! denoising objective.
//!
//! Step indices are 1-based (`1..=T`); `alpha_bar(0)` is defined as 1.
//! Matrices are flat row-major buffers, batched as `[B, K, L]` where needed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, TimeWindow, WindowId};
use crate::rng::{self, Purpose, Stream};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("diffusion step {t} outside 1..={n_steps}")]
    Step { t: usize, n_steps: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("denoiser has not been trained")]
    Untrained,
    #[error("domain branch unavailable: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { n_steps: 50, beta_start: 1e-4, beta_end: 0.5 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::quadratic(self.n_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t = (√β₁ + (t−1)/(T−1)·(√β_T − √β₁))²`.
    pub fn quadratic(n_steps: usize, beta1: f64, beta_t: f64) -> Result<Self, DiffusionError> {
        if n_steps < 2 {
            return Err(DiffusionError::Schedule(format!("need at least 2 steps, got {n_steps}")));
        }
        if !(beta1 > 0.0 && beta1 < beta_t && beta_t < 1.0) {
            return Err(DiffusionError::Schedule(format!("need 0 < beta1 < betaT < 1, got {beta1}, {beta_t}")));
        }
        let (s1, st) = (beta1.sqrt(), beta_t.sqrt());
        let mut betas: Vec<f64> = (0..n_steps)
            .map(|i| {
                let b = s1 + (i as f64 / (n_steps - 1) as f64) * (st - s1);
                b * b
            })
            .collect();
        // pin the endpoints: squaring a rounded square root can miss by an ulp
        betas[0] = beta1;
        betas[n_steps - 1] = beta_t;
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let n = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..n)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]).sqrt()
            })
            .collect();
        Self { betas, alphas, alpha_bars, sigmas }
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.n_steps() {
            Err(DiffusionError::Step { t, n_steps: self.n_steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::Shape(format!("{what}: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Closed-form `q(x_t | x_0)`: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    same_len(x0, eps, "x0/eps")?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One-step kernel `q(x_t | x_{t−1})`: `√α_t·x_{t−1} + √β_t·z`.
pub fn forward_step(x_prev: &[f64], t: usize, z: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    same_len(x_prev, z, "x/z")?;
    let (a, b) = (sched.alpha(t).sqrt(), sched.beta(t).sqrt());
    Ok(x_prev.iter().zip(z).map(|(x, e)| a * x + b * e).collect())
}

/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z`. At `t = 1`, `σ_1 = 0` and `z` is ignored.
pub fn reverse_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    z: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    same_len(x_t, eps_hat, "x_t/eps_hat")?;
    if t > 1 {
        same_len(x_t, z, "x_t/z")?;
    }
    let inv = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = sched.sigma(t);
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| {
            let mu = inv * (x - coef * e);
            if t > 1 {
                mu + sigma * z[i]
            } else {
                mu
            }
        })
        .collect())
}

/// Masked mean of squared errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub count: usize,
}

impl MaskedLoss {
    /// True when the mask selected nothing and the loss carries no signal.
    pub fn skipped(&self) -> bool {
        self.count == 0
    }
}

pub fn denoising_loss(eps: &[f64], eps_hat: &[f64], loss_mask: &[bool]) -> Result<MaskedLoss, DiffusionError> {
    same_len(eps, eps_hat, "eps/eps_hat")?;
    if loss_mask.len() != eps.len() {
        return Err(DiffusionError::Shape(format!("mask: {} vs {}", loss_mask.len(), eps.len())));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for ((e, h), &m) in eps.iter().zip(eps_hat).zip(loss_mask) {
        if m {
            sum += (e - h) * (e - h);
            count += 1;
        }
    }
    Ok(MaskedLoss { value: if count == 0 { 0.0 } else { sum / count as f64 }, count })
}

/// Gradient of [`denoising_loss`] with respect to `eps_hat`.
pub fn denoising_loss_grad(eps: &[f64], eps_hat: &[f64], loss_mask: &[bool]) -> Vec<f64> {
    let n = loss_mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return vec![0.0; eps.len()];
    }
    let s = 2.0 / n as f64;
    eps.iter()
        .zip(eps_hat)
        .zip(loss_mask)
        .map(|((e, h), &m)| if m { s * (h - e) } else { 0.0 })
        .collect()
}

/// A batch handed to an ε-predictor. Buffers are `[batch, K, L]`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseInput<'a> {
    pub batch: usize,
    pub n_features: usize,
    pub len: usize,
    pub x_cond: &'a [f64],
    pub cond_mask: &'a [bool],
    pub x_t: &'a [f64],
    /// One diffusion step per batch item.
    pub steps: &'a [usize],
}

impl NoiseInput<'_> {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let n = self.batch * self.n_features * self.len;
        if self.x_cond.len() != n || self.cond_mask.len() != n || self.x_t.len() != n || self.steps.len() != self.batch {
            return Err(DiffusionError::Shape(format!(
                "batch of {} windows {}x{} with buffers {}, {}, {} and {} steps",
                self.batch,
                self.n_features,
                self.len,
                self.x_cond.len(),
                self.cond_mask.len(),
                self.x_t.len(),
                self.steps.len()
            )));
        }
        Ok(())
    }
}

pub trait NoisePredictor {
    fn predict_noise(&self, domain: Domain, input: &NoiseInput) -> Result<Vec<f64>, DiffusionError>;

    fn is_trained(&self) -> bool {
        true
    }
}

/// Posterior samples for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    pub window_id: WindowId,
    pub domain: Domain,
    pub n_features: usize,
    pub len: usize,
    /// `[S, K, L]`; conditional positions hold the observed values.
    pub samples: Vec<f64>,
    /// Per-position median over samples, `[K, L]`.
    pub point: Vec<f64>,
    /// Positions that were imputed, `[K, L]`.
    pub target_mask: Vec<bool>,
}

impl ImputationResult {
    pub fn n_samples(&self) -> usize {
        self.samples.len() / (self.n_features * self.len).max(1)
    }

    pub fn n_targets(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }

    /// Samples at position `p` of the `[K, L]` grid.
    pub fn samples_at(&self, p: usize) -> Vec<f64> {
        let kl = self.n_features * self.len;
        (0..self.n_samples()).map(|s| self.samples[s * kl + p]).collect()
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs the reverse chain for one window, drawing all noise from `rng`.
pub fn impute<P: NoisePredictor + ?Sized>(
    window: &TimeWindow,
    predictor: &P,
    sched: &NoiseSchedule,
    n_samples: usize,
    rng: &mut Stream,
) -> Result<ImputationResult, DiffusionError> {
    let mut out = impute_batch(&[window], predictor, window.domain, sched, n_samples, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one window in, one result out"))
}

/// Imputes every window, each with its own stream keyed by `(seed, window_id)`,
/// running up to `chunk` windows through the predictor together.
pub fn impute_many<P: NoisePredictor + ?Sized>(
    windows: &[TimeWindow],
    predictor: &P,
    sched: &NoiseSchedule,
    n_samples: usize,
    seed: u64,
    chunk: usize,
) -> Result<Vec<ImputationResult>, DiffusionError> {
    let mut results = Vec::with_capacity(windows.len());
    for group in windows.chunks(chunk.max(1)) {
        let domain = group[0].domain;
        if group.iter().any(|w| w.domain != domain) {
            return Err(DiffusionError::Domain("mixed domains in one imputation chunk".into()));
        }
        let refs: Vec<&TimeWindow> = group.iter().collect();
        let mut rngs: Vec<Stream> =
            group.iter().map(|w| rng::stream(seed, Purpose::Sampling, &[w.window_id.0, w.domain.index() as u64])).collect();
        results.extend(impute_batch(&refs, predictor, domain, sched, n_samples, &mut rngs)?);
    }
    Ok(results)
}

fn impute_batch<P: NoisePredictor + ?Sized>(
    windows: &[&TimeWindow],
    predictor: &P,
    domain: Domain,
    sched: &NoiseSchedule,
    n_samples: usize,
    rngs: &mut [Stream],
) -> Result<Vec<ImputationResult>, DiffusionError> {
    if !predictor.is_trained() {
        return Err(DiffusionError::Untrained);
    }
    if n_samples == 0 {
        return Err(DiffusionError::Shape("n_samples must be positive".into()));
    }
    let (k, l) = (windows[0].n_features(), windows[0].len());
    if windows.iter().any(|w| w.n_features() != k || w.len() != l) {
        return Err(DiffusionError::Shape("windows in a batch must share K and L".into()));
    }
    let kl = k * l;
    let nb = windows.len() * n_samples;
    // batch item (w, s) lives at index w * n_samples + s
    let mut x_cond = Vec::with_capacity(nb * kl);
    let mut cond = Vec::with_capacity(nb * kl);
    for w in windows {
        let xc = w.x_cond();
        let cm = w.cond_mask();
        for _ in 0..n_samples {
            x_cond.extend(xc.iter().copied());
            cond.extend(cm.iter().copied());
        }
    }
    let draw = |rngs: &mut [Stream], buf: &mut Vec<f64>| {
        buf.clear();
        for r in rngs.iter_mut() {
            buf.extend((0..n_samples * kl).map(|_| r.sample::<f64, _>(StandardNormal)));
        }
    };
    let mut x = Vec::with_capacity(nb * kl);
    draw(rngs, &mut x);
    let mut z = Vec::with_capacity(nb * kl);
    for t in (1..=sched.n_steps()).rev() {
        let steps = vec![t; nb];
        let input = NoiseInput { batch: nb, n_features: k, len: l, x_cond: &x_cond, cond_mask: &cond, x_t: &x, steps: &steps };
        let eps_hat = predictor.predict_noise(domain, &input)?;
        if t > 1 {
            draw(rngs, &mut z);
        } else {
            z.clear();
        }
        x = reverse_step(&x, &eps_hat, t, sched, &z)?;
    }
    let mut results = Vec::with_capacity(windows.len());
    for (wi, w) in windows.iter().enumerate() {
        let target: Vec<bool> = cond[wi * n_samples * kl..wi * n_samples * kl + kl].iter().map(|&c| !c).collect();
        let mut samples = x[wi * n_samples * kl..(wi + 1) * n_samples * kl].to_vec();
        let xc = &x_cond[wi * n_samples * kl..wi * n_samples * kl + kl];
        for s in 0..n_samples {
            for p in 0..kl {
                if !target[p] {
                    samples[s * kl + p] = xc[p];
                }
            }
        }
        let mut col = vec![0.0; n_samples];
        let point = (0..kl)
            .map(|p| {
                for (s, c) in col.iter_mut().enumerate() {
                    *c = samples[s * kl + p];
                }
                median(&mut col)
            })
            .collect();
        results.push(ImputationResult {
            window_id: w.window_id,
            domain: w.domain,
            n_features: k,
            len: l,
            samples,
            point,
            target_mask: target,
        });
    }
    Ok(results)
}
