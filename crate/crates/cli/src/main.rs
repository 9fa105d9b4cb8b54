use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crossimpute_core::data::{Domain, SeriesTable, Split, WindowOptions};
use crossimpute_core::harness::ablate::{ablate, format_table, Variant};
use crossimpute_core::harness::checkpoint::Checkpoint;
use crossimpute_core::harness::evaluate::{
    evaluate, impute_windows, write_evaluation, write_imputations_csv, write_samples_npy, IMPUTATIONS, METRICS, SAMPLES,
};
use crossimpute_core::harness::synth::{generate_tables, save_table_csv, SynthSpec};
use crossimpute_core::harness::train::{train, TrainOptions, MANIFEST};
use crossimpute_core::harness::{prepare, RunConfig};

const OUTPUT_ROOT_ENV: &str = "CROSSIMPUTE_OUTPUT_ROOT";

/// Cross-domain diffusion imputation for multivariate time series.
#[derive(Debug, Parser)]
#[command(name = "crossimpute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split and normalize both domains and write the dataset manifest.
    Prepare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model; writes logs and checkpoints.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps in total (resumable).
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Score a checkpoint on the target test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config to use instead of the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Impute the gaps of a target-domain CSV with a trained checkpoint.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the full model and the component ablations.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Also run the variant without both FMixup and CDCA.
        #[arg(long)]
        with_double: bool,
    },
    /// Write a synthetic source/target pair of CSVs.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_features: Option<usize>,
        #[arg(long)]
        window_len: Option<usize>,
        #[arg(long)]
        n_windows: Option<usize>,
        #[arg(long)]
        domain_shift: Option<f64>,
        #[arg(long)]
        missing_rate: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

/// Flags shared by every command that reads a run configuration.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Override a config key, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_samples: Option<usize>,
    /// Output directory (default: $CROSSIMPUTE_OUTPUT_ROOT/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// fmixup, zero or linear.
    #[arg(long)]
    interpolation: Option<String>,
    #[arg(long)]
    no_cdca: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(n) = self.n_samples {
            o.push(format!("eval.n_samples={n}"));
        }
        o
    }
}

impl RunArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.common.overrides();
        if let Some(e) = self.epochs {
            o.push(format!("train.epochs={e}"));
        }
        if let Some(b) = self.batch_size {
            o.push(format!("train.batch_size={b}"));
        }
        if let Some(lr) = self.lr {
            o.push(format!("train.lr={lr:e}"));
        }
        if let Some(i) = &self.interpolation {
            o.push(format!("fmixup.interpolation=\"{i}\""));
        }
        if self.no_cdca {
            o.push("cdca_enabled=false".into());
        }
        o
    }

    fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(&self.config, &self.overrides())
            .with_context(|| format!("loading {}", self.config.display()))?;
        cfg.validate(true)?;
        Ok(cfg)
    }
}

fn out_dir(explicit: Option<&Path>, command: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(command)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { run } => {
            let cfg = run.load()?;
            let data = prepare(&cfg)?;
            let dir = out_dir(run.common.out.as_deref(), "prepare");
            std::fs::create_dir_all(&dir)?;
            data.manifest.save(&dir.join(MANIFEST))?;
            for d in [Domain::Source, Domain::Target] {
                let s = &data.domain(d).splits;
                println!("{d}: {} train / {} val / {} test windows", s.train.len(), s.val.len(), s.test.len());
            }
            println!("wrote {}", dir.join(MANIFEST).display());
        }
        Command::Train { run, resume, max_steps } => {
            let cfg = run.load()?;
            let data = prepare(&cfg)?;
            let dir = out_dir(run.common.out.as_deref(), "train");
            let opts = TrainOptions { resume, stop_after_steps: max_steps, quiet: run.common.quiet };
            let outcome = train(&cfg, &data, &dir, &opts)?;
            let state = if outcome.finished { "finished" } else { "stopped" };
            println!(
                "{state} after {} steps in {:.1}s; best val {:?} at epoch {:?}; outputs in {}",
                outcome.progress.step,
                outcome.runtime_seconds,
                outcome.progress.best_val,
                outcome.progress.best_epoch,
                dir.display()
            );
        }
        Command::Evaluate { checkpoint, config, common } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let overrides = common.overrides();
            let cfg = match &config {
                Some(path) => RunConfig::load(path, &overrides)?,
                None => RunConfig::from_toml(&ck.header.config, &overrides)?,
            };
            cfg.validate(true)?;
            let data = prepare(&cfg)?;
            if data.n_features() != ck.model.spec.n_features {
                bail!("checkpoint expects {} features, data has {}", ck.model.spec.n_features, data.n_features());
            }
            let eval = evaluate(&cfg, &ck.model, &data)?;
            let dir = out_dir(common.out.as_deref(), "evaluate");
            write_evaluation(&dir, &eval, &data)?;
            let r = &eval.report;
            println!("MAE {:.6}  RMSE {:.6}  CRPS {:.6}  ({} points)", r.mae, r.rmse, r.crps, r.n_eval_points);
            println!("wrote {}", dir.join(METRICS).display());
        }
        Command::Impute { checkpoint, input, n_samples, seed, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut overrides = Vec::new();
            if let Some(n) = n_samples {
                overrides.push(format!("eval.n_samples={n}"));
            }
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            let cfg = RunConfig::from_toml(&ck.header.config, &overrides)?;
            let norm = ck.header.norms.get(Domain::Target.index()).context("checkpoint has no target normalization")?;
            let table = SeriesTable::from_csv(&input, Some(&ck.header.feature_names))?;
            let l = cfg.data.window_len;
            let opts = WindowOptions { len: l, stride: l, split: Split::Test };
            let mut ds = table.windows(0..table.n_rows(), &opts, Domain::Target);
            if ds.is_empty() {
                bail!("{} has {} rows, fewer than one window of {l}", input.display(), table.n_rows());
            }
            let tail = table.n_rows() % l;
            if tail != 0 {
                eprintln!("note: the last {tail} rows do not fill a window and are not imputed");
            }
            norm.apply(&mut ds);
            let results = impute_windows(&cfg, &ck.model, &ds.windows)?;
            let dir = out_dir(out.as_deref(), "impute");
            std::fs::create_dir_all(&dir)?;
            write_imputations_csv(&dir.join(IMPUTATIONS), &ds.windows, &results, norm, &table.feature_names, &table.timestamps)?;
            write_samples_npy(&dir.join(SAMPLES), &results, norm)?;
            println!("imputed {} windows; wrote {}", results.len(), dir.join(IMPUTATIONS).display());
        }
        Command::Ablate { run, with_double } => {
            let cfg = run.load()?;
            let data = prepare(&cfg)?;
            let dir = out_dir(run.common.out.as_deref(), "ablate");
            let mut variants = Variant::TABLE.to_vec();
            if with_double {
                variants.push(Variant::WithoutFmixupAndCdca);
            }
            let opts = TrainOptions { resume: false, stop_after_steps: None, quiet: run.common.quiet };
            let rows = ablate(&cfg, &data, &dir, &variants, &opts)?;
            print!("{}", format_table(&rows));
        }
        Command::Synth { seed, out, n_features, window_len, n_windows, domain_shift, missing_rate, noise } => {
            let mut spec = SynthSpec::default();
            spec.n_features = n_features.unwrap_or(spec.n_features);
            spec.window_len = window_len.unwrap_or(spec.window_len);
            spec.n_windows = n_windows.unwrap_or(spec.n_windows);
            spec.domain_shift = domain_shift.unwrap_or(spec.domain_shift);
            spec.missing_rate = missing_rate.unwrap_or(spec.missing_rate);
            spec.noise = noise.unwrap_or(spec.noise);
            spec.validate()?;
            let dir = out_dir(out.as_deref(), "synth");
            std::fs::create_dir_all(&dir)?;
            let (source, target) = generate_tables(seed, &spec);
            save_table_csv(&source, &dir.join("source.csv"))?;
            save_table_csv(&target, &dir.join("target.csv"))?;
            println!("wrote source.csv and target.csv to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
