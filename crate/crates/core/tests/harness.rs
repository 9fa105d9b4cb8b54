use std::path::Path;

use crossimpute_core::harness::ablate::{ablate, Variant, ABLATION_TABLE};
use crossimpute_core::harness::checkpoint::Checkpoint;
use crossimpute_core::harness::evaluate::{evaluate, write_evaluation, IMPUTATIONS, METRICS, SAMPLES};
use crossimpute_core::harness::synth::{generate_tables, SynthSpec};
use crossimpute_core::harness::train::{train, TrainOptions, BEST_CKPT, LAST_CKPT, TRAIN_LOG, VAL_LOG};
use crossimpute_core::harness::{prepare_tables, Prepared, RunConfig};

const SMALL: &str = r#"
seed = 3

[data]
source = "source.csv"
target = "target.csv"
window_len = 16

[fmixup]
alpha = 0.2

[model]
channels = 8
n_layers = 1
n_heads = 2
ff_dim = 8

[alignment]
tau_l = 0.0
tau_h = 0.5
mu_align = 1.0

[train]
epochs = 10
batch_size = 4

[eval]
n_samples = 3
"#;

fn config(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let cfg = RunConfig::from_toml(SMALL, &o).unwrap();
    cfg.validate(false).unwrap();
    cfg
}

fn data(cfg: &RunConfig) -> Prepared {
    let spec = SynthSpec { window_len: 16, n_windows: 40, ..SynthSpec::default() };
    let (s, t) = generate_tables(5, &spec);
    prepare_tables(cfg, s, t).unwrap()
}

fn quiet() -> TrainOptions {
    TrainOptions { quiet: true, ..TrainOptions::default() }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

/// Rows of train_log.csv as (header, numeric columns).
fn log_rows(dir: &Path) -> Vec<Vec<f64>> {
    read(&dir.join(TRAIN_LOG))
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn identical_runs_write_identical_logs() {
    let cfg = config(&[]);
    let d = data(&cfg);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&cfg, &d, a.path(), &quiet()).unwrap();
    train(&cfg, &d, b.path(), &quiet()).unwrap();
    assert_eq!(read(&a.path().join(TRAIN_LOG)), read(&b.path().join(TRAIN_LOG)));
    assert_eq!(read(&a.path().join(VAL_LOG)), read(&b.path().join(VAL_LOG)));

    let other = tempfile::tempdir().unwrap();
    train(&config(&["seed=4"]), &d, other.path(), &quiet()).unwrap();
    assert_ne!(read(&a.path().join(TRAIN_LOG)), read(&other.path().join(TRAIN_LOG)));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = config(&[]);
    let d = data(&cfg);
    let straight = tempfile::tempdir().unwrap();
    let whole = train(&cfg, &d, straight.path(), &quiet()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = train(&cfg, &d, split.path(), &TrainOptions { stop_after_steps: Some(23), ..quiet() }).unwrap();
    assert!(!first.finished);
    assert_eq!(first.progress.step, 23);
    let rest = train(&cfg, &d, split.path(), &TrainOptions { resume: true, ..quiet() }).unwrap();
    assert!(rest.finished);

    assert_eq!(read(&straight.path().join(TRAIN_LOG)), read(&split.path().join(TRAIN_LOG)));
    assert_eq!(read(&straight.path().join(VAL_LOG)), read(&split.path().join(VAL_LOG)));
    assert_eq!(whole.model.store, rest.model.store);
    let (x, y) = (
        Checkpoint::load(&straight.path().join(BEST_CKPT)).unwrap(),
        Checkpoint::load(&split.path().join(BEST_CKPT)).unwrap(),
    );
    assert_eq!(x.model.store, y.model.store);
    assert_eq!(x.header.progress, y.header.progress);
}

#[test]
fn log_columns_follow_the_configuration() {
    let cfg = config(&[]);
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &d, dir.path(), &quiet()).unwrap();
    let header = read(&dir.path().join(TRAIN_LOG)).lines().next().unwrap().to_string();
    assert_eq!(header, "step,L_src,L_tgt,delta,L_align,L,lr");

    // 28 target train windows at batch 4: 7 steps per epoch
    let rows = log_rows(dir.path());
    assert_eq!(rows.len(), 70);
    assert_eq!(out.progress.step, 70);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0] as usize, i + 1);
        let epoch = i / 7;
        let lr = match epoch {
            0..=7 => 1e-3,
            8 => 1e-4,
            _ => 1e-5,
        };
        assert_eq!(r[6], lr, "step {}", i + 1);
        assert_eq!(r[5], r[1] + r[2] + r[4], "step {}", i + 1);
    }
    assert!(rows.iter().any(|r| r[3] > 0.0));

    let val = read(&dir.path().join(VAL_LOG));
    assert_eq!(val.lines().count(), 11);
    assert!(dir.path().join(BEST_CKPT).is_file() && dir.path().join(LAST_CKPT).is_file());
}

#[test]
fn alignment_column_is_zero_without_cdca() {
    let cfg = config(&["cdca_enabled=false", "alignment.mu_align=7.0"]);
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &d, dir.path(), &quiet()).unwrap();
    for r in log_rows(dir.path()) {
        assert_eq!(r[3], 0.0);
        assert_eq!(r[4], 0.0);
        assert_eq!(r[5], r[1] + r[2]);
    }
}

#[test]
fn evaluation_reports_and_files_are_consistent() {
    let cfg = config(&["train.epochs=2"]);
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &d, dir.path(), &quiet()).unwrap();
    let model = Checkpoint::load(&out.best_checkpoint).unwrap().model;
    let eval = evaluate(&cfg, &model, &d).unwrap();
    let r = &eval.report;
    assert!(r.n_eval_points > 0);
    assert!(r.rmse >= r.mae && r.mae >= 0.0 && r.crps >= 0.0);
    let n_art: usize = eval.windows.iter().map(|w| w.n_artificial()).sum();
    assert_eq!(r.n_eval_points, n_art);
    assert_eq!(evaluate(&cfg, &model, &d).unwrap().report.mae, r.mae);

    write_evaluation(dir.path(), &eval, &d).unwrap();
    let json: serde_json::Value = serde_json::from_str(&read(&dir.path().join(METRICS))).unwrap();
    assert_eq!(json["mae"].as_f64().unwrap(), r.mae);
    let csv = read(&dir.path().join(IMPUTATIONS));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "window_id,feature,timestamp,truth,point_estimate,q05,q50,q95");
    let n_targets: usize = eval.results.iter().map(|x| x.n_targets()).sum();
    assert_eq!(lines.count(), n_targets);
    assert!(dir.path().join(SAMPLES).is_file());
}

#[test]
fn ablation_writes_one_row_per_variant() {
    let cfg = config(&["train.epochs=1"]);
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate(&cfg, &d, dir.path(), &Variant::TABLE, &quiet()).unwrap();
    assert_eq!(rows.len(), 4);
    let table = read(&dir.path().join(ABLATION_TABLE));
    assert_eq!(table.lines().count(), 5);
    for v in Variant::TABLE {
        assert!(dir.path().join(v.slug()).join(METRICS).is_file());
    }
}
