//! Component ablations: the full model against variants with one part
//! switched off or replaced.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::evaluate::{evaluate, write_evaluation};
use super::train::{train, TrainOptions};
use super::{HarnessError, Prepared, RunConfig};
use crate::fmixup::Interpolation;

pub const ABLATION_TABLE: &str = "ablation.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Original gaps left at the zero sentinel.
    WithoutFmixup,
    /// Original gaps filled by linear interpolation in time.
    WithLinear,
    WithoutCdca,
    WithoutFmixupAndCdca,
}

impl Variant {
    /// Rows of the standard comparison table, in order.
    pub const TABLE: [Variant; 4] = [Variant::Full, Variant::WithoutFmixup, Variant::WithLinear, Variant::WithoutCdca];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutFmixup => "w/o FMixup",
            Variant::WithLinear => "w/ L.I.",
            Variant::WithoutCdca => "w/o CDCA",
            Variant::WithoutFmixupAndCdca => "w/o FMixup + w/o CDCA",
        }
    }

    /// Directory name for the variant's outputs.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutFmixup => "no_fmixup",
            Variant::WithLinear => "linear",
            Variant::WithoutCdca => "no_cdca",
            Variant::WithoutFmixupAndCdca => "no_fmixup_no_cdca",
        }
    }

    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {
                cfg.fmixup.interpolation = Interpolation::Fmixup;
                cfg.cdca_enabled = true;
            }
            Variant::WithoutFmixup => {
                cfg.fmixup.interpolation = Interpolation::Zero;
                cfg.cdca_enabled = true;
            }
            Variant::WithLinear => {
                cfg.fmixup.interpolation = Interpolation::Linear;
                cfg.cdca_enabled = true;
            }
            Variant::WithoutCdca => {
                cfg.fmixup.interpolation = Interpolation::Fmixup;
                cfg.cdca_enabled = false;
            }
            Variant::WithoutFmixupAndCdca => {
                cfg.fmixup.interpolation = Interpolation::Zero;
                cfg.cdca_enabled = false;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mae: f64,
    pub rmse: f64,
    pub crps: f64,
    pub n_eval_points: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Trains one variant into `dir`, then scores its best checkpoint.
pub fn run_variant(
    base: &RunConfig,
    data: &Prepared,
    variant: Variant,
    dir: &Path,
    opts: &TrainOptions,
) -> Result<AblationRow, HarnessError> {
    let cfg = variant.configure(base);
    let outcome = train(&cfg, data, dir, opts)?;
    let model = Checkpoint::load(&outcome.best_checkpoint)?.model;
    let eval = evaluate(&cfg, &model, data)?;
    write_evaluation(dir, &eval, data)?;
    let r = &eval.report;
    Ok(AblationRow {
        variant: variant.label().to_string(),
        mae: r.mae,
        rmse: r.rmse,
        crps: r.crps,
        n_eval_points: r.n_eval_points,
        train_seconds: outcome.runtime_seconds,
        eval_seconds: r.runtime_seconds,
    })
}

pub fn write_table(path: &Path, rows: &[AblationRow]) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(HarnessError::io(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Invalid(format!("cannot write {}: {e}", path.display())))?;
    }
    w.flush().map_err(HarnessError::io(path))
}

/// Runs each variant in its own subdirectory of `out_dir` and writes the
/// comparison table.
pub fn ablate(
    base: &RunConfig,
    data: &Prepared,
    out_dir: &Path,
    variants: &[Variant],
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(HarnessError::io(out_dir))?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        if !opts.quiet {
            eprintln!("ablation variant: {}", v.label());
        }
        rows.push(run_variant(base, data, v, &out_dir.join(v.slug()), opts)?);
    }
    write_table(&out_dir.join(ABLATION_TABLE), &rows)?;
    Ok(rows)
}

/// Plain-text rendering of the table for terminals.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = Vec::new();
    let _ = writeln!(out, "{:<24} {:>12} {:>12} {:>10}", "variant", "MAE", "RMSE", "CRPS");
    for r in rows {
        let _ = writeln!(out, "{:<24} {:>12.5} {:>12.5} {:>10.5}", r.variant, r.mae, r.rmse, r.crps);
    }
    String::from_utf8(out).expect("ascii table")
}
