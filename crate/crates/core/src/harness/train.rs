//! The joint source/target training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::checkpoint::{Checkpoint, Progress};
use super::{DomainData, HarnessError, Prepared, RunConfig};
use crate::cdca::{alignment_term, total_loss};
use crate::data::{apply_test_pattern, apply_train_masking, DataError, Domain, TimeWindow};
use crate::denoiser::{Denoiser, ForwardCache};
use crate::diffusion::{denoising_loss, denoising_loss_grad, forward_sample, NoiseInput, NoiseSchedule};
use crate::fmixup::{interpolate_window, linear_fill, Interpolation, MixSettings};
use crate::nn::{Adam, Grads};
use crate::rng::{stream, Purpose};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const MANIFEST: &str = "manifest.json";

const TRAIN_HEADER: &str = "step,L_src,L_tgt,delta,L_align,L,lr";
const VAL_HEADER: &str = "epoch,val_loss,lr,best";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `last.ckpt` in the output directory.
    pub resume: bool,
    /// Stop (and write `last.ckpt`) once this many optimizer steps have run in total.
    pub stop_after_steps: Option<u64>,
    pub quiet: bool,
}

/// One optimizer step's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_src: f64,
    pub l_tgt: f64,
    pub delta: f64,
    pub l_align: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step taken.
    pub model: Denoiser,
    pub progress: Progress,
    pub finished: bool,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub runtime_seconds: f64,
}

/// Train-time view of one window: clean targets, conditioning and loss mask.
#[derive(Debug, Clone)]
struct Item {
    x0: Vec<f64>,
    x_cond: Vec<f64>,
    cond: Vec<bool>,
}

impl Item {
    fn from_window(w: &TimeWindow) -> Self {
        Self {
            x0: w.values.iter().copied().collect(),
            x_cond: w.x_cond().iter().copied().collect(),
            cond: w.cond_mask().iter().copied().collect(),
        }
    }
}

/// Masks a training window and fills its original-missing positions
/// according to the configured interpolation mode. `None` when the window has
/// nothing observed.
fn augment(
    cfg: &RunConfig,
    window: &TimeWindow,
    partners: &[TimeWindow],
    epoch: usize,
) -> Result<Option<Item>, HarnessError> {
    let (d, wid) = (window.domain.index() as u64, window.window_id.0);
    let mut rng = stream(cfg.seed, Purpose::TrainMask, &[cfg.masking.seed, epoch as u64, d, wid]);
    let masked = match apply_train_masking(window, &cfg.masking, &mut rng) {
        Ok(w) => w,
        Err(DataError::NoObserved(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let filled = match cfg.fmixup.interpolation {
        Interpolation::Zero => masked,
        Interpolation::Linear => linear_fill(&masked),
        Interpolation::Fmixup => {
            let pick = stream(cfg.seed, Purpose::Pairing, &[epoch as u64, d, wid]).random_range(0..partners.len());
            let [lo, hi] = cfg.fmixup.lambda_range;
            let mut lrng = stream(cfg.seed, Purpose::Lambda, &[epoch as u64, d, wid]);
            let lambda = if hi > lo { lrng.random_range(lo..=hi) } else { lo };
            let settings = MixSettings { alpha: cfg.fmixup.alpha, lambda, mode: cfg.fmixup.mode };
            interpolate_window(&masked, &partners[pick], &settings)?
        }
    };
    Ok(Some(Item::from_window(&filled)))
}

/// A noised batch ready for the network.
struct Batch {
    n: usize,
    x_cond: Vec<f64>,
    cond: Vec<bool>,
    x_t: Vec<f64>,
    eps: Vec<f64>,
    steps: Vec<usize>,
    loss_mask: Vec<bool>,
}

impl Batch {
    fn input(&self, k: usize, l: usize) -> NoiseInput<'_> {
        NoiseInput {
            batch: self.n,
            n_features: k,
            len: l,
            x_cond: &self.x_cond,
            cond_mask: &self.cond,
            x_t: &self.x_t,
            steps: &self.steps,
        }
    }
}

/// Corrupts each item with its own `(t, ε)`, drawn from `rng_for(j)`.
fn noise_batch(
    items: &[Item],
    sched: &NoiseSchedule,
    mut rng_for: impl FnMut(usize) -> crate::rng::Stream,
) -> Result<Batch, HarnessError> {
    let kl = items.first().map_or(0, |i| i.x0.len());
    let mut b = Batch {
        n: items.len(),
        x_cond: Vec::with_capacity(items.len() * kl),
        cond: Vec::with_capacity(items.len() * kl),
        x_t: Vec::with_capacity(items.len() * kl),
        eps: Vec::with_capacity(items.len() * kl),
        steps: Vec::with_capacity(items.len()),
        loss_mask: Vec::with_capacity(items.len() * kl),
    };
    for (j, it) in items.iter().enumerate() {
        let mut rng = rng_for(j);
        let t = rng.random_range(1..=sched.n_steps());
        let eps: Vec<f64> = (0..kl).map(|_| rng.sample(StandardNormal)).collect();
        b.x_t.extend(forward_sample(&it.x0, t, &eps, sched)?);
        b.eps.extend(eps);
        b.steps.push(t);
        b.x_cond.extend(&it.x_cond);
        b.cond.extend(&it.cond);
        b.loss_mask.extend(it.cond.iter().map(|c| !c));
    }
    Ok(b)
}

/// Target-domain validation loss: fixed test-pattern masks, fixed `(t, ε)`
/// per draw, squared error over the artificial targets only.
pub fn validation_loss(cfg: &RunConfig, model: &Denoiser, data: &DomainData, sched: &NoiseSchedule) -> Result<Option<f64>, HarnessError> {
    let (k, l) = (model.spec.n_features, cfg.data.window_len);
    let mut masked = Vec::new();
    for w in &data.splits.val.windows {
        let mut rng = stream(cfg.seed, Purpose::ValMask, &[cfg.masking.seed, w.window_id.0]);
        match apply_test_pattern(w, &cfg.masking, &mut rng) {
            Ok(m) if m.n_artificial() > 0 => masked.push(m),
            Ok(_) | Err(DataError::NoObserved(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if masked.is_empty() {
        return Ok(None);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in masked.chunks(cfg.train.batch_size.max(1)) {
        for draw in 0..cfg.train.val_draws {
            let items: Vec<Item> = chunk.iter().map(Item::from_window).collect();
            let mut b = noise_batch(&items, sched, |j| {
                stream(cfg.seed, Purpose::Noise, &[u64::MAX, draw as u64, chunk[j].window_id.0])
            })?;
            b.loss_mask = chunk.iter().flat_map(|w| w.artificial_mask.iter().copied().collect::<Vec<_>>()).collect();
            let eps_hat = model.forward(Domain::Target, &b.input(k, l), None)?;
            let loss = denoising_loss(&b.eps, &eps_hat, &b.loss_mask)?;
            sum += loss.value * loss.count as f64;
            count += loss.count;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(HarnessError::io(path))
}

/// Keeps the first `keep` data rows of a CSV log (the header is always kept).
fn truncate_log(path: &Path, header: &str, keep: impl Fn(&str) -> bool) -> Result<(), HarnessError> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(header);
    out.push('\n');
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        if keep(line) {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_file(path, &out)
}

fn leading_number(line: &str) -> u64 {
    line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX)
}

struct Logs {
    train: std::io::BufWriter<std::fs::File>,
    val: std::io::BufWriter<std::fs::File>,
    train_path: PathBuf,
    val_path: PathBuf,
}

impl Logs {
    fn open(dir: &Path, fresh: bool, progress: &Progress) -> Result<Self, HarnessError> {
        let train_path = dir.join(TRAIN_LOG);
        let val_path = dir.join(VAL_LOG);
        if fresh {
            write_file(&train_path, &format!("{TRAIN_HEADER}\n"))?;
            write_file(&val_path, &format!("{VAL_HEADER}\n"))?;
        } else {
            let step = progress.step;
            let epoch = progress.epoch as u64;
            truncate_log(&train_path, TRAIN_HEADER, |l| leading_number(l) <= step)?;
            truncate_log(&val_path, VAL_HEADER, |l| leading_number(l) < epoch)?;
        }
        let append = |p: &Path| {
            std::fs::OpenOptions::new().append(true).open(p).map(std::io::BufWriter::new).map_err(HarnessError::io(p))
        };
        Ok(Self { train: append(&train_path)?, val: append(&val_path)?, train_path, val_path })
    }

    fn step(&mut self, r: &StepRecord) -> Result<(), HarnessError> {
        writeln!(self.train, "{},{},{},{},{},{},{}", r.step, r.l_src, r.l_tgt, r.delta, r.l_align, r.total, r.lr)
            .map_err(HarnessError::io(&self.train_path))
    }

    fn epoch(&mut self, epoch: usize, val: f64, lr: f64, best: bool) -> Result<(), HarnessError> {
        writeln!(self.val, "{epoch},{val},{lr},{}", best as u8).map_err(HarnessError::io(&self.val_path))
    }

    fn flush(&mut self) -> Result<(), HarnessError> {
        self.train.flush().map_err(HarnessError::io(&self.train_path))?;
        self.val.flush().map_err(HarnessError::io(&self.val_path))
    }
}

/// Runs (or resumes) training, writing logs and checkpoints into `out_dir`.
pub fn train(cfg: &RunConfig, data: &Prepared, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome, HarnessError> {
    let started = std::time::Instant::now();
    cfg.validate(false)?;
    std::fs::create_dir_all(out_dir).map_err(HarnessError::io(out_dir))?;
    let sched = cfg.schedule.build()?;
    let mut spec = cfg.model.clone();
    spec.n_features = data.n_features();
    let (k, l) = (spec.n_features, cfg.data.window_len);
    let config_text = cfg.to_toml();
    write_file(&out_dir.join(RESOLVED_CONFIG), &config_text)?;
    data.manifest.save(&out_dir.join(MANIFEST))?;

    let last_path = out_dir.join(LAST_CKPT);
    let best_path = out_dir.join(BEST_CKPT);
    let (mut model, mut adam, mut progress) = if opts.resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        if ck.header.spec != spec || ck.header.seed != cfg.seed {
            return Err(HarnessError::Invalid(format!(
                "{} was written by a different model or seed",
                last_path.display()
            )));
        }
        let adam = ck.adam.ok_or_else(|| HarnessError::Invalid("last.ckpt has no optimizer state".into()))?;
        (ck.model, adam, ck.header.progress)
    } else {
        let model = Denoiser::new(spec.clone(), cfg.seed)?;
        let adam = Adam::new(&model.store, cfg.train.adam);
        (model, adam, Progress { epoch: 0, batch_in_epoch: 0, step: 0, best_val: None, best_epoch: None })
    };
    let fresh = progress.step == 0 && progress.epoch == 0;
    let mut logs = Logs::open(out_dir, fresh, &progress)?;

    let norms = vec![data.source.norm.clone(), data.target.norm.clone()];
    let names = data.target.feature_names().to_vec();
    let checkpoint = |model: &Denoiser, adam: &Adam, progress: &Progress, path: &Path| {
        Checkpoint::new(model, Some(adam), config_text.clone(), cfg.seed, progress.clone(), names.clone(), norms.clone())
            .save(path)
    };

    let tgt = &data.target.splits.train.windows;
    let src = &data.source.splits.train.windows;
    let bsz = cfg.train.batch_size;
    let steps_per_epoch = tgt.len().div_ceil(bsz);
    let mut grads = Grads::new(&model.store);
    let mut cache_t = ForwardCache::default();
    let mut cache_s = ForwardCache::default();

    while progress.epoch < cfg.train.epochs {
        let epoch = progress.epoch;
        let lr = cfg.train.lr_at(epoch);
        let mut perm_t: Vec<usize> = (0..tgt.len()).collect();
        perm_t.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, &[epoch as u64, Domain::Target.index() as u64]));
        let mut perm_s: Vec<usize> = (0..src.len()).collect();
        perm_s.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, &[epoch as u64, Domain::Source.index() as u64]));

        for b in progress.batch_in_epoch..steps_per_epoch {
            if opts.stop_after_steps.is_some_and(|n| progress.step >= n) {
                logs.flush()?;
                checkpoint(&model, &adam, &progress, &last_path)?;
                return Ok(TrainOutcome {
                    model,
                    progress,
                    finished: false,
                    best_checkpoint: best_path,
                    last_checkpoint: last_path,
                    runtime_seconds: started.elapsed().as_secs_f64(),
                });
            }
            let tgt_idx = &perm_t[b * bsz..((b + 1) * bsz).min(tgt.len())];
            let src_idx: Vec<usize> = (0..bsz).map(|j| perm_s[(b * bsz + j) % src.len()]).collect();
            let collect = |idx: &[usize], windows: &[TimeWindow], partners: &[TimeWindow]| {
                let mut items = Vec::with_capacity(idx.len());
                for &i in idx {
                    if let Some(it) = augment(cfg, &windows[i], partners, epoch)? {
                        items.push(it);
                    }
                }
                Ok::<_, HarnessError>(items)
            };
            let items_t = collect(tgt_idx, tgt, src)?;
            let items_s = collect(&src_idx, src, tgt)?;
            let noise_rng = |d: Domain| {
                move |j: usize| stream(cfg.seed, Purpose::Noise, &[epoch as u64, b as u64, d.index() as u64, j as u64])
            };
            let bt = noise_batch(&items_t, &sched, noise_rng(Domain::Target))?;
            let bs = noise_batch(&items_s, &sched, noise_rng(Domain::Source))?;

            grads.clear();
            let (mut l_tgt, mut l_src, mut delta, mut l_align) = (0.0, 0.0, 0.0, 0.0);
            if bt.n > 0 {
                let input = bt.input(k, l);
                let eps_hat = model.forward(Domain::Target, &input, Some(&mut cache_t))?;
                l_tgt = denoising_loss(&bt.eps, &eps_hat, &bt.loss_mask)?.value;
                let mut d_eps = denoising_loss_grad(&bt.eps, &eps_hat, &bt.loss_mask);
                if cfg.cdca_enabled {
                    let eps_cross = model.forward(Domain::Source, &input, None)?;
                    if let Some(term) = alignment_term(&eps_hat, &eps_cross, &bt.loss_mask, k * l, &cfg.alignment)? {
                        delta = term.delta;
                        l_align = term.loss;
                        d_eps.iter_mut().zip(&term.grad).for_each(|(d, g)| *d += g);
                    }
                }
                model.backward(&cache_t, &d_eps, &mut grads);
            }
            if bs.n > 0 {
                let eps_hat = model.forward(Domain::Source, &bs.input(k, l), Some(&mut cache_s))?;
                l_src = denoising_loss(&bs.eps, &eps_hat, &bs.loss_mask)?.value;
                let d_eps = denoising_loss_grad(&bs.eps, &eps_hat, &bs.loss_mask);
                model.backward(&cache_s, &d_eps, &mut grads);
            }
            let total = total_loss(l_src, l_tgt, l_align, &cfg.alignment, progress.step + 1)?;
            if !grads.all_finite() {
                return Err(HarnessError::Diverged { step: progress.step + 1, reason: "non-finite gradient".into() });
            }
            adam.step(&mut model.store, &grads, lr);
            model.mark_trained(true);
            progress.step += 1;
            progress.batch_in_epoch = b + 1;
            logs.step(&StepRecord { step: progress.step, l_src, l_tgt, delta, l_align, total, lr })?;
        }

        logs.flush()?;
        let val = match validation_loss(cfg, &model, &data.target, &sched)? {
            Some(v) => v,
            None => last_train_target_loss(&logs.train_path)?,
        };
        let improved = progress.best_val.is_none_or(|b| val < b);
        if improved {
            progress.best_val = Some(val);
            progress.best_epoch = Some(epoch);
        }
        logs.epoch(epoch, val, lr, improved)?;
        logs.flush()?;
        progress.epoch += 1;
        progress.batch_in_epoch = 0;
        if improved {
            checkpoint(&model, &adam, &progress, &best_path)?;
        }
        checkpoint(&model, &adam, &progress, &last_path)?;
        if !opts.quiet {
            eprintln!(
                "epoch {:>4}/{}  step {:>6}  val {:.5}{}  lr {lr:e}",
                epoch + 1,
                cfg.train.epochs,
                progress.step,
                val,
                if improved { " *" } else { "" }
            );
        }
    }
    logs.flush()?;
    Ok(TrainOutcome {
        model,
        progress,
        finished: true,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Fallback selection signal when there are no usable validation windows.
fn last_train_target_loss(path: &Path) -> Result<f64, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    Ok(text.lines().last().and_then(|l| l.split(',').nth(2)).and_then(|s| s.parse().ok()).unwrap_or(f64::INFINITY))
}
