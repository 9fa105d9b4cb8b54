//! Test-time masking, sampling, metrics and imputation outputs.

use std::io::Write;
use std::path::Path;

use ndarray::Array4;
use ndarray_npy::WriteNpyExt;

use super::metrics::{quantile_sorted, MetricsBuilder, MetricsReport};
use super::{HarnessError, Prepared, RunConfig};
use crate::data::{apply_test_pattern, DataError, DomainDataset, NormRecord, TimeWindow};
use crate::denoiser::Denoiser;
use crate::diffusion::{impute_many, ImputationResult};
use crate::rng::{stream, Purpose};

pub const METRICS: &str = "metrics.json";
pub const IMPUTATIONS: &str = "imputations.csv";
pub const SAMPLES: &str = "samples.npy";

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Test windows carrying their evaluation masks.
    pub windows: Vec<TimeWindow>,
    pub results: Vec<ImputationResult>,
}

/// Applies the test pattern to every test window. Windows left without any
/// evaluation target are dropped.
pub fn mask_test_windows(cfg: &RunConfig, ds: &DomainDataset) -> Result<Vec<TimeWindow>, HarnessError> {
    let mut out = Vec::with_capacity(ds.len());
    for w in &ds.windows {
        let mut rng = stream(cfg.seed, Purpose::TestMask, &[cfg.masking.seed, w.window_id.0]);
        match apply_test_pattern(w, &cfg.masking, &mut rng) {
            Ok(m) if m.n_artificial() > 0 => out.push(m),
            Ok(_) | Err(DataError::NoObserved(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

pub fn impute_windows(cfg: &RunConfig, model: &Denoiser, windows: &[TimeWindow]) -> Result<Vec<ImputationResult>, HarnessError> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let sched = cfg.schedule.build()?;
    Ok(impute_many(windows, model, &sched, cfg.eval.n_samples, cfg.seed, cfg.eval.chunk)?)
}

/// Imputes the masked target test windows and scores the artificial targets
/// in raw units.
pub fn evaluate(cfg: &RunConfig, model: &Denoiser, data: &Prepared) -> Result<Evaluation, HarnessError> {
    let started = std::time::Instant::now();
    let windows = mask_test_windows(cfg, &data.target.splits.test)?;
    let results = impute_windows(cfg, model, &windows)?;
    let norm = &data.target.norm;
    let mut metrics = MetricsBuilder::new(data.target.feature_names());
    let mut col = Vec::new();
    for (w, r) in windows.iter().zip(&results) {
        let l = w.len();
        for (p, &a) in w.artificial_mask.iter().enumerate() {
            if !a {
                continue;
            }
            let f = p / l;
            col.clear();
            col.extend(r.samples_at(p).into_iter().map(|v| norm.denormalize_value(f, v)));
            let truth = norm.denormalize_value(f, w.values[[f, p % l]]);
            metrics.add(f, norm.denormalize_value(f, r.point[p]), truth, &col)?;
        }
    }
    let report = metrics.finish(started.elapsed().as_secs_f64())?;
    Ok(Evaluation { report, windows, results })
}

pub fn write_metrics_json(path: &Path, report: &MetricsReport) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(report).expect("metrics serialize");
    std::fs::write(path, text + "\n").map_err(HarnessError::io(path))
}

/// One row per imputed position. `truth` is written where the window holds an
/// observed value (artificial targets); it is empty at original gaps.
pub fn write_imputations_csv(
    path: &Path,
    windows: &[TimeWindow],
    results: &[ImputationResult],
    norm: &NormRecord,
    feature_names: &[String],
    timestamps: &[String],
) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(HarnessError::io(path))?;
    let mut w = std::io::BufWriter::new(file);
    let io = HarnessError::io(path);
    let body = (|| -> std::io::Result<()> {
        writeln!(w, "window_id,feature,timestamp,truth,point_estimate,q05,q50,q95")?;
        let mut col = Vec::new();
        for (win, r) in windows.iter().zip(results) {
            let l = win.len();
            for (p, &target) in r.target_mask.iter().enumerate() {
                if !target {
                    continue;
                }
                let (f, t) = (p / l, p % l);
                col.clear();
                col.extend(r.samples_at(p).into_iter().map(|v| norm.denormalize_value(f, v)));
                col.sort_by(f64::total_cmp);
                let row = win.window_id.0 as usize + t;
                let stamp = timestamps.get(row).map(String::as_str).unwrap_or("");
                let truth = if win.obs_mask[[f, t]] {
                    norm.denormalize_value(f, win.values[[f, t]]).to_string()
                } else {
                    String::new()
                };
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    win.window_id,
                    feature_names[f],
                    stamp,
                    truth,
                    norm.denormalize_value(f, r.point[p]),
                    quantile_sorted(&col, 0.05),
                    quantile_sorted(&col, 0.5),
                    quantile_sorted(&col, 0.95)
                )?;
            }
        }
        w.flush()
    })();
    body.map_err(io)
}

/// Raw-unit samples as a `[windows, samples, K, L]` array.
pub fn write_samples_npy(path: &Path, results: &[ImputationResult], norm: &NormRecord) -> Result<(), HarnessError> {
    let (s, k, l) = results.first().map_or((0, 0, 0), |r| (r.n_samples(), r.n_features, r.len));
    let mut arr = Array4::<f64>::zeros((results.len(), s, k, l));
    for (wi, r) in results.iter().enumerate() {
        for si in 0..s {
            for f in 0..k {
                for t in 0..l {
                    arr[[wi, si, f, t]] = norm.denormalize_value(f, r.samples[(si * k + f) * l + t]);
                }
            }
        }
    }
    let file = std::fs::File::create(path).map_err(HarnessError::io(path))?;
    arr.write_npy(std::io::BufWriter::new(file))
        .map_err(|e| HarnessError::Invalid(format!("cannot write {}: {e}", path.display())))
}

/// Writes `metrics.json`, `imputations.csv` and `samples.npy` into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation, data: &Prepared) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    write_metrics_json(&dir.join(METRICS), &eval.report)?;
    let t = &data.target;
    write_imputations_csv(&dir.join(IMPUTATIONS), &eval.windows, &eval.results, &t.norm, t.feature_names(), &t.table.timestamps)?;
    write_samples_npy(&dir.join(SAMPLES), &eval.results, &t.norm)
}
