//! Frequency-domain cross-domain interpolation.
//!
//! A window's conditional observations are taken to the frequency domain, the
//! low-frequency part of its amplitude spectrum is blended with a partner
//! window from the other domain, and the result is transformed back with the
//! window's own phase. Only originally-missing positions are overwritten.
//!
//! Spectra are exposed in centered layout: index `i` along an axis of size `n`
//! holds frequency `i - n/2`, so the zero-frequency bin sits at `(K/2, L/2)`.

use std::io::Write;

use ndarray::{Array2, Axis, Zip};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::TimeWindow;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FmixupError {
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("alpha = {0} must lie in (0, 1)")]
    Alpha(f64),
    #[error("lambda = {0} must lie in [0, 1]")]
    Lambda(f64),
}

/// Which axes the transform runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMode {
    /// 2-D transform over features and timestamps jointly.
    #[default]
    Joint2d,
    /// Independent 1-D transforms along time, one per feature.
    PerFeature,
}

/// How originally-missing values are filled before building training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Fmixup,
    Zero,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPair {
    pub amplitude: Array2<f64>,
    pub phase: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowFreqMask {
    pub mask: Array2<bool>,
    pub alpha: f64,
}

impl LowFreqMask {
    fn weights(&self) -> Array2<f64> {
        self.mask.mapv(|m| if m { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub values: Array2<f64>,
    /// Sum of squared imaginary parts discarded by the real cast.
    pub imag_energy: f64,
}

fn transform(data: &mut Array2<Complex64>, mode: SpectralMode, inverse: bool) {
    let (k, l) = data.dim();
    let mut planner = FftPlanner::new();
    let along_time = if inverse { planner.plan_fft_inverse(l) } else { planner.plan_fft_forward(l) };
    for mut row in data.rows_mut() {
        let mut buf = row.to_vec();
        along_time.process(&mut buf);
        row.iter_mut().zip(buf).for_each(|(d, b)| *d = b);
    }
    if mode == SpectralMode::Joint2d {
        let along_features = if inverse { planner.plan_fft_inverse(k) } else { planner.plan_fft_forward(k) };
        for mut col in data.columns_mut() {
            let mut buf = col.to_vec();
            along_features.process(&mut buf);
            col.iter_mut().zip(buf).for_each(|(d, b)| *d = b);
        }
    }
    if inverse {
        let n = match mode {
            SpectralMode::Joint2d => (k * l) as f64,
            SpectralMode::PerFeature => l as f64,
        };
        data.mapv_inplace(|c| c / n);
    }
}

/// Unnormalized forward transform, natural layout.
pub fn fft2(x: &Array2<f64>, mode: SpectralMode) -> Array2<Complex64> {
    let mut data = x.mapv(|v| Complex64::new(v, 0.0));
    transform(&mut data, mode, false);
    data
}

/// Inverse transform normalized by the number of transformed points.
pub fn ifft2(spec: &Array2<Complex64>, mode: SpectralMode) -> Array2<Complex64> {
    let mut data = spec.clone();
    transform(&mut data, mode, true);
    data
}

fn shift_axis<T: Clone>(a: &Array2<T>, axis: Axis, inverse: bool) -> Array2<T> {
    let n = a.len_of(axis);
    let half = n / 2;
    let mut out = a.clone();
    for i in 0..n {
        // centered[i] = natural[(i - n/2) mod n]
        let src = if inverse { (i + half) % n } else { (i + n - half) % n };
        out.index_axis_mut(axis, i).assign(&a.index_axis(axis, src));
    }
    out
}

/// Moves the zero-frequency bin to the center of every transformed axis.
pub fn fftshift<T: Clone>(a: &Array2<T>, mode: SpectralMode) -> Array2<T> {
    let out = shift_axis(a, Axis(1), false);
    match mode {
        SpectralMode::Joint2d => shift_axis(&out, Axis(0), false),
        SpectralMode::PerFeature => out,
    }
}

pub fn ifftshift<T: Clone>(a: &Array2<T>, mode: SpectralMode) -> Array2<T> {
    let out = shift_axis(a, Axis(1), true);
    match mode {
        SpectralMode::Joint2d => shift_axis(&out, Axis(0), true),
        SpectralMode::PerFeature => out,
    }
}

fn check_finite(x: &Array2<f64>) -> Result<(), FmixupError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FmixupError::NonFinite)
    }
}

fn check_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<(), FmixupError> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(FmixupError::Shape(a.dim(), b.dim()))
    }
}

/// Amplitude and phase of the 2-D transform, centered layout.
pub fn decompose(x: &Array2<f64>) -> Result<SpectralPair, FmixupError> {
    decompose_with(x, SpectralMode::Joint2d)
}

pub fn decompose_with(x: &Array2<f64>, mode: SpectralMode) -> Result<SpectralPair, FmixupError> {
    check_finite(x)?;
    let spec = fftshift(&fft2(x, mode), mode);
    Ok(SpectralPair { amplitude: spec.mapv(|c| c.norm()), phase: spec.mapv(|c| c.arg()) })
}

/// Low-frequency selector with half-widths `⌊αK⌋` and `⌊αL⌋` around DC.
pub fn low_freq_mask(k: usize, l: usize, alpha: f64) -> Result<LowFreqMask, FmixupError> {
    low_freq_mask_with(k, l, alpha, SpectralMode::Joint2d)
}

/// In per-feature mode the feature axis is not transformed, so every row is
/// selected and only the temporal half-width applies.
pub fn low_freq_mask_with(k: usize, l: usize, alpha: f64, mode: SpectralMode) -> Result<LowFreqMask, FmixupError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FmixupError::Alpha(alpha));
    }
    let hk = (alpha * k as f64).floor() as usize;
    let hl = (alpha * l as f64).floor() as usize;
    let (ck, cl) = (k / 2, l / 2);
    let mask = Array2::from_shape_fn((k, l), |(i, j)| {
        let row_ok = mode == SpectralMode::PerFeature || i.abs_diff(ck) <= hk;
        row_ok && j.abs_diff(cl) <= hl
    });
    Ok(LowFreqMask { mask, alpha })
}

/// `a_tgt·(1−m) + (λ·a_tgt + (1−λ)·a_src)·m`, evaluated literally.
pub fn mix_amplitude(
    a_src: &Array2<f64>,
    a_tgt: &Array2<f64>,
    m: &LowFreqMask,
    lambda: f64,
) -> Result<Array2<f64>, FmixupError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(FmixupError::Lambda(lambda));
    }
    check_shape(a_src, a_tgt)?;
    if m.mask.dim() != a_tgt.dim() {
        return Err(FmixupError::Shape(m.mask.dim(), a_tgt.dim()));
    }
    let w = m.weights();
    let mut out = Array2::zeros(a_tgt.dim());
    Zip::from(&mut out).and(a_src).and(a_tgt).and(&w).for_each(|o, &s, &t, &m| {
        *o = t * (1.0 - m) + (lambda * t + (1.0 - lambda) * s) * m;
    });
    Ok(out)
}

/// Inverse transform of `a·exp(j·p)`; the real part is returned.
pub fn reconstruct(a: &Array2<f64>, p: &Array2<f64>) -> Result<Reconstruction, FmixupError> {
    reconstruct_with(a, p, SpectralMode::Joint2d)
}

pub fn reconstruct_with(a: &Array2<f64>, p: &Array2<f64>, mode: SpectralMode) -> Result<Reconstruction, FmixupError> {
    check_shape(a, p)?;
    let centered = Zip::from(a).and(p).map_collect(|&amp, &ph| Complex64::from_polar(amp, ph));
    let spatial = ifft2(&ifftshift(&centered, mode), mode);
    Ok(Reconstruction {
        values: spatial.mapv(|c| c.re),
        imag_energy: spatial.iter().map(|c| c.im * c.im).sum(),
    })
}

/// Settings for [`interpolate_window`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSettings {
    pub alpha: f64,
    pub lambda: f64,
    pub mode: SpectralMode,
}

/// The blended series `X_{Src→Tgt}` built from both windows' conditional
/// observations.
pub fn cross_domain_series(
    tgt: &TimeWindow,
    src_partner: &TimeWindow,
    settings: &MixSettings,
) -> Result<Reconstruction, FmixupError> {
    let (x_tgt, x_src) = (tgt.x_cond(), src_partner.x_cond());
    check_shape(&x_tgt, &x_src)?;
    let (k, l) = x_tgt.dim();
    let mask = low_freq_mask_with(k, l, settings.alpha, settings.mode)?;
    let spec_tgt = decompose_with(&x_tgt, settings.mode)?;
    let spec_src = decompose_with(&x_src, settings.mode)?;
    let mixed = mix_amplitude(&spec_src.amplitude, &spec_tgt.amplitude, &mask, settings.lambda)?;
    reconstruct_with(&mixed, &spec_tgt.phase, settings.mode)
}

/// Fills the target window's originally-missing positions with the
/// cross-domain reconstruction. Observed values, including artificially
/// masked ground truth, are untouched.
pub fn interpolate_window(
    tgt: &TimeWindow,
    src_partner: &TimeWindow,
    settings: &MixSettings,
) -> Result<TimeWindow, FmixupError> {
    let recon = cross_domain_series(tgt, src_partner, settings)?;
    let mut out = tgt.clone();
    Zip::from(&mut out.values).and(&tgt.obs_mask).and(&recon.values).for_each(|v, &o, &r| {
        if !o {
            *v = r;
        }
    });
    Ok(out)
}

/// Time-domain linear interpolation of originally-missing positions from the
/// conditional observations of the same feature. Positions before the first
/// or after the last conditional value take the nearest one; a feature with
/// no conditional values keeps the sentinel.
pub fn linear_fill(window: &TimeWindow) -> TimeWindow {
    let cond = window.cond_mask();
    let mut out = window.clone();
    for k in 0..window.n_features() {
        let anchors: Vec<usize> = (0..window.len()).filter(|&l| cond[[k, l]]).collect();
        if anchors.is_empty() {
            continue;
        }
        for l in 0..window.len() {
            if window.obs_mask[[k, l]] {
                continue;
            }
            let next = anchors.partition_point(|&a| a < l);
            let v = if next == 0 {
                window.values[[k, anchors[0]]]
            } else if next == anchors.len() {
                window.values[[k, anchors[next - 1]]]
            } else {
                let (a, b) = (anchors[next - 1], anchors[next]);
                let w = (l - a) as f64 / (b - a) as f64;
                window.values[[k, a]] * (1.0 - w) + window.values[[k, b]] * w
            };
            out.values[[k, l]] = v;
        }
    }
    out
}

/// Per-window spectral diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub window_id: u64,
    pub source: SpectralPair,
    pub target: SpectralPair,
    pub mixed_amplitude: Array2<f64>,
    pub mask: LowFreqMask,
    pub imag_energy: f64,
}

impl SpectralReport {
    pub fn build(tgt: &TimeWindow, src_partner: &TimeWindow, settings: &MixSettings) -> Result<Self, FmixupError> {
        let (k, l) = tgt.values.dim();
        let mask = low_freq_mask_with(k, l, settings.alpha, settings.mode)?;
        let target = decompose_with(&tgt.x_cond(), settings.mode)?;
        let source = decompose_with(&src_partner.x_cond(), settings.mode)?;
        let mixed_amplitude = mix_amplitude(&source.amplitude, &target.amplitude, &mask, settings.lambda)?;
        let imag_energy = reconstruct_with(&mixed_amplitude, &target.phase, settings.mode)?.imag_energy;
        Ok(Self { window_id: tgt.window_id.0, source, target, mixed_amplitude, mask, imag_energy })
    }

    /// One row per frequency bin, with centered frequency indices.
    pub fn write_csv<W: Write>(&self, out: &mut W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(out, "window_id,u,v,in_mask,amp_target,amp_source,amp_mixed,phase_target,imag_energy")?;
        }
        let (k, l) = self.mixed_amplitude.dim();
        for i in 0..k {
            for j in 0..l {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    self.window_id,
                    i as i64 - (k / 2) as i64,
                    j as i64 - (l / 2) as i64,
                    u8::from(self.mask.mask[[i, j]]),
                    self.target.amplitude[[i, j]],
                    self.source.amplitude[[i, j]],
                    self.mixed_amplitude[[i, j]],
                    self.target.phase[[i, j]],
                    self.imag_energy
                )?;
            }
        }
        Ok(())
    }
}
