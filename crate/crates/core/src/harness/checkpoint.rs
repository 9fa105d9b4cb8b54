//! Versioned binary checkpoints: magic, format version, a JSON header, then
//! raw little-endian `f64` parameters and optional Adam moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::NormRecord;
use crate::denoiser::{Denoiser, DenoiserSpec};
use crate::nn::{Adam, AdamConfig};

const MAGIC: &[u8; 8] = b"XIMPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Where in the run the checkpoint was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Epoch to resume in (0-based).
    pub epoch: usize,
    /// Batches of `epoch` already done.
    pub batch_in_epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: DenoiserSpec,
    /// Resolved run configuration as TOML.
    pub config: String,
    pub seed: u64,
    pub progress: Progress,
    pub trained: bool,
    pub feature_names: Vec<String>,
    /// Normalization of the source and target domains, in that order.
    pub norms: Vec<NormRecord>,
    pub params: Vec<(String, Vec<usize>)>,
    pub adam: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub steps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Denoiser,
    pub adam: Option<Adam>,
}

fn err(path: &Path, reason: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint { path: path.display().to_string(), reason: reason.into() }
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> std::io::Result<()> {
    let mut buf = vec![0u8; out.len() * 8];
    r.read_exact(&mut buf)?;
    for (o, c) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *o = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(
        model: &Denoiser,
        adam: Option<&Adam>,
        config: String,
        seed: u64,
        progress: Progress,
        feature_names: Vec<String>,
        norms: Vec<NormRecord>,
    ) -> Self {
        let params = model.store.iter().map(|(_, p)| (p.name.clone(), p.shape.clone())).collect();
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                spec: model.spec.clone(),
                config,
                seed,
                progress,
                trained: model.trained(),
                feature_names,
                norms,
                params,
                adam: adam.map(|a| AdamState { config: a.config, steps: a.steps.clone() }),
            },
            model: model.clone(),
            adam: adam.cloned(),
        }
    }

    /// Writes to a sibling temporary file first so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let tmp = path.with_extension("ckpt.tmp");
        let io = HarnessError::io(&tmp);
        let file = std::fs::File::create(&tmp).map_err(HarnessError::io(&tmp))?;
        let mut w = std::io::BufWriter::new(file);
        let header = serde_json::to_vec(&self.header).map_err(|e| err(path, e.to_string()))?;
        let body = (|| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for (_, p) in self.model.store.iter() {
                write_f64s(&mut w, &p.value)?;
            }
            if let Some(a) = &self.adam {
                for m in &a.m {
                    write_f64s(&mut w, m)?;
                }
                for v in &a.v {
                    write_f64s(&mut w, v)?;
                }
            }
            w.flush()
        })();
        body.map_err(io)?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(HarnessError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let file = std::fs::File::open(path).map_err(HarnessError::io(path))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| err(path, "file too short"))?;
        if &magic != MAGIC {
            return Err(err(path, "not a checkpoint file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(HarnessError::io(path))?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(err(path, format!("format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(HarnessError::io(path))?;
        let mut header = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut header).map_err(HarnessError::io(path))?;
        let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| err(path, e.to_string()))?;
        let mut model = Denoiser::new(header.spec.clone(), 0).map_err(|e| err(path, e.to_string()))?;
        let layout: Vec<(String, Vec<usize>)> = model.store.iter().map(|(_, p)| (p.name.clone(), p.shape.clone())).collect();
        if layout != header.params {
            return Err(err(path, "parameter layout does not match the recorded model spec"));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            read_f64s(&mut r, model.store.get_mut(id)).map_err(|_| err(path, "truncated parameters"))?;
        }
        model.mark_trained(header.trained);
        let adam = match &header.adam {
            Some(state) => {
                let mut a = Adam::new(&model.store, state.config);
                for m in a.m.iter_mut() {
                    read_f64s(&mut r, m).map_err(|_| err(path, "truncated optimizer state"))?;
                }
                for v in a.v.iter_mut() {
                    read_f64s(&mut r, v).map_err(|_| err(path, "truncated optimizer state"))?;
                }
                if state.steps.len() != a.steps.len() {
                    return Err(err(path, "optimizer step counts do not match the parameter list"));
                }
                a.steps = state.steps.clone();
                Some(a)
            }
            None => None,
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(HarnessError::io(path))?;
        if !rest.is_empty() {
            return Err(err(path, format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { header, model, adam })
    }
}
