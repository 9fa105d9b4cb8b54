//! Paired synthetic source/target series sharing low-frequency structure.
//!
//! Both domains are built from the same sinusoids, per-feature scales and
//! offsets, and a common slow AR(1) factor. The target domain applies a phase
//! shift of `shift·π/4`, scales the periodic part by `1 + shift/2`, adds extra
//! noise, and has cells knocked out at `missing_rate`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Domain, DomainDataset, SeriesTable, Split, WindowOptions};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_features: usize,
    pub window_len: usize,
    /// Windows per domain; each series has `n_windows · window_len` rows.
    pub n_windows: usize,
    /// Frequencies in cycles per window.
    pub shared_freqs: Vec<f64>,
    pub domain_shift: f64,
    /// Fraction of target cells left empty.
    pub missing_rate: f64,
    pub noise: f64,
    /// Weight of the slow common AR(1) factor.
    pub ar_weight: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_features: 5,
            window_len: 32,
            n_windows: 400,
            shared_freqs: vec![1.0, 2.0],
            domain_shift: 1.0,
            missing_rate: 0.4,
            noise: 0.1,
            ar_weight: 0.3,
        }
    }
}

/// Everything both domains share.
#[derive(Debug, Clone, PartialEq)]
struct Structure {
    amps: Vec<f64>,
    phases: Vec<f64>,
    feature_phase: Vec<f64>,
    scale: Vec<f64>,
    offset: Vec<f64>,
    loading: Vec<f64>,
}

/// How a domain departs from the shared structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainParams {
    pub phase_shift: f64,
    pub amp_factor: f64,
    pub noise: f64,
    pub missing_rate: f64,
}

impl SynthSpec {
    pub fn domain_params(&self, domain: Domain) -> DomainParams {
        match domain {
            Domain::Source => DomainParams { phase_shift: 0.0, amp_factor: 1.0, noise: self.noise, missing_rate: 0.0 },
            Domain::Target => DomainParams {
                phase_shift: self.domain_shift * PI / 4.0,
                amp_factor: 1.0 + 0.5 * self.domain_shift,
                noise: self.noise * (1.0 + self.domain_shift),
                missing_rate: self.missing_rate,
            },
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Schema(format!("synthetic spec: {m}")));
        if self.n_features == 0 || self.window_len == 0 || self.n_windows == 0 {
            return bad("counts must be positive");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        if self.noise < 0.0 || self.ar_weight < 0.0 || self.domain_shift < 0.0 {
            return bad("noise, ar_weight and domain_shift must be non-negative");
        }
        Ok(())
    }
}

fn structure(seed: u64, spec: &SynthSpec) -> Structure {
    let mut r = rng::stream(seed, Purpose::Synth, &[0]);
    let nf = spec.shared_freqs.len();
    let k = spec.n_features;
    Structure {
        amps: (0..nf).map(|i| r.random_range(0.6..1.2) / (1.0 + i as f64 * 0.5)).collect(),
        phases: (0..nf).map(|_| r.random_range(-PI..PI)).collect(),
        feature_phase: (0..k).map(|_| r.random_range(-0.6..0.6)).collect(),
        scale: (0..k).map(|_| r.random_range(0.5..3.0)).collect(),
        offset: (0..k).map(|_| r.random_range(-5.0..5.0)).collect(),
        loading: (0..k).map(|_| r.random_range(0.5..1.5)).collect(),
    }
}

fn series(seed: u64, spec: &SynthSpec, st: &Structure, domain: Domain) -> SeriesTable {
    let p = spec.domain_params(domain);
    let mut r = rng::stream(seed, Purpose::Synth, &[1 + domain.index() as u64]);
    let (k, l) = (spec.n_features, spec.window_len);
    let rows = spec.n_windows * l;
    let phi: f64 = 0.95;
    let innov = (1.0 - phi * phi).sqrt();
    let mut ar = r.sample::<f64, _>(StandardNormal);
    let mut values = Array2::zeros((rows, k));
    let mut observed = Array2::from_elem((rows, k), true);
    for i in 0..rows {
        ar = phi * ar + innov * r.sample::<f64, _>(StandardNormal);
        for f in 0..k {
            let periodic: f64 = spec
                .shared_freqs
                .iter()
                .zip(&st.amps)
                .zip(&st.phases)
                .map(|((&fr, &a), &ph)| a * (2.0 * PI * fr * i as f64 / l as f64 + ph + st.feature_phase[f] + p.phase_shift).sin())
                .sum();
            let eps: f64 = r.sample(StandardNormal);
            values[[i, f]] = st.offset[f]
                + st.scale[f] * (p.amp_factor * periodic + spec.ar_weight * st.loading[f] * ar + p.noise * eps);
            if p.missing_rate > 0.0 && r.random_bool(p.missing_rate) {
                observed[[i, f]] = false;
            }
        }
    }
    SeriesTable {
        timestamps: (0..rows).map(|i| i.to_string()).collect(),
        feature_names: (0..k).map(|f| format!("x{f}")).collect(),
        values,
        observed,
    }
}

/// Source and target series tables.
pub fn generate_tables(seed: u64, spec: &SynthSpec) -> (SeriesTable, SeriesTable) {
    let st = structure(seed, spec);
    (series(seed, spec, &st, Domain::Source), series(seed, spec, &st, Domain::Target))
}

/// Both domains cut into non-overlapping windows.
pub fn generate_synthetic(seed: u64, spec: &SynthSpec) -> (DomainDataset, DomainDataset) {
    let (s, t) = generate_tables(seed, spec);
    let opts = WindowOptions { len: spec.window_len, stride: spec.window_len, split: Split::Train };
    (s.windows(0..s.n_rows(), &opts, Domain::Source), t.windows(0..t.n_rows(), &opts, Domain::Target))
}

/// Writes a table as CSV with empty cells at unobserved positions.
pub fn write_table_csv<W: Write>(table: &SeriesTable, out: &mut W) -> std::io::Result<()> {
    write!(out, "timestamp")?;
    for n in &table.feature_names {
        write!(out, ",{n}")?;
    }
    writeln!(out)?;
    for (i, ts) in table.timestamps.iter().enumerate() {
        write!(out, "{ts}")?;
        for f in 0..table.feature_names.len() {
            if table.observed[[i, f]] {
                write!(out, ",{}", table.values[[i, f]])?;
            } else {
                write!(out, ",")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_table_csv(table: &SeriesTable, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    write_table_csv(table, &mut w).map_err(io)?;
    w.flush().map_err(io)
}
