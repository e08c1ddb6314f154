//! Adam with the warmup learning-rate schedule, gradient clipping, and the
//! checkpointing training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{save_checkpoint, TrainerSnapshot};
use crate::corpus::{make_batches, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{sequence_grads, Model};
use crate::numerics::{clip_global_norm, NamedParams};
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Warmup schedule: rises like `step * warmup^-1.5`, decays like `step^-0.5`,
/// both scaled by `d_model^-0.5`. The two branches meet at `step == warmup`.
pub fn lrate(step: u64, d_model: usize, warmup: u64, num_gpus: u64) -> f64 {
    assert!(step >= 1, "lrate: steps are 1-based");
    assert!(d_model >= 1 && warmup >= 1 && num_gpus >= 1, "lrate: zero constant");
    let alpha = step as f64 / num_gpus as f64;
    let growth = alpha * (warmup as f64).powf(-1.5);
    (d_model as f64).powf(-0.5) * alpha.powf(-0.5).min(growth)
}

/// First and second moment accumulators, shaped like the parameters.
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
}

impl<S: Scalar> AdamState<Model<S>> {
    pub fn new(model: &Model<S>) -> Self {
        AdamState { m: model.zeros_like(), v: model.zeros_like() }
    }
}

/// One Adam update with bias correction. `step` is 1-based and must count
/// every update applied to `state` so the correction terms stay right.
pub fn adam_step<S: Scalar, P: NamedParams<S>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    step: u64,
    lr: f64,
) -> Result<()> {
    assert!(step >= 1, "adam_step: steps are 1-based");
    for (name, g) in grads.entries() {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                op: "adam_step",
                detail: format!("gradient {name}"),
            });
        }
    }

    let b1 = S::from_f64(BETA1);
    let b2 = S::from_f64(BETA2);
    let one = S::one();
    let c1 = S::from_f64(1.0 - BETA1.powi(step.min(i32::MAX as u64) as i32));
    let c2 = S::from_f64(1.0 - BETA2.powi(step.min(i32::MAX as u64) as i32));
    let lr = S::from_f64(lr);
    let eps = S::from_f64(ADAM_EPS);

    let mut ps = params.entries_mut();
    let gs = grads.entries();
    let mut ms = state.m.entries_mut();
    let mut vs = state.v.entries_mut();
    assert!(
        ps.len() == gs.len() && ps.len() == ms.len() && ps.len() == vs.len(),
        "adam_step: mismatched parameter sets"
    );
    for i in 0..ps.len() {
        assert!(
            ps[i].0 == gs[i].0 && ps[i].0 == ms[i].0 && ps[i].0 == vs[i].0,
            "adam_step: entry order disagrees at {}",
            ps[i].0
        );
        let p = ps[i].1.data_mut();
        let g = gs[i].1.data();
        let m = ms[i].1.data_mut();
        let v = vs[i].1.data_mut();
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    /// Width entering the schedule's `d^-0.5` factor.
    pub d_model: usize,
    pub warmup: u64,
    pub num_gpus: u64,
    pub clip_norm: f64,
    pub seed: u64,
    /// 0 disables mid-epoch checkpoints; a final one is still written.
    pub checkpoint_every: u64,
    /// Fixed learning rate replacing the schedule (tests, tiny tasks).
    pub lr_override: Option<f64>,
    /// Restore the parameters from the best epoch-loss at exit. In-memory
    /// runs only; checkpointed runs reload `best.ckpt` instead.
    pub keep_best: bool,
    pub fingerprint: u64,
    /// Vocabulary file paths recorded in checkpoints.
    pub vocab_refs: (String, String),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            dropout: 0.5,
            d_model: 512,
            warmup: 6000,
            num_gpus: 1,
            clip_norm: 1.0,
            seed: 1,
            checkpoint_every: 500,
            lr_override: None,
            keep_best: false,
            fingerprint: 0,
            vocab_refs: (String::new(), String::new()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lrate: f64,
    pub loss: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug)]
pub struct FitOutput {
    pub trace: Vec<TraceRow>,
    pub epoch_means: Vec<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub snapshot: TrainerSnapshot,
}

fn diverged(step: u64, e: Error, last_good: &Option<PathBuf>) -> Error {
    match e {
        Error::NonFinite { op, detail } => Error::Diverged {
            step,
            detail: format!("{op}: {detail}"),
            last_good: last_good.as_ref().map(|p| p.display().to_string()),
        },
        other => other,
    }
}

/// Train from a fresh state. See [`fit_from`].
pub fn fit<S: Scalar>(
    model: &mut Model<S>,
    adam: &mut AdamState<Model<S>>,
    pairs: &[(String, String)],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutput> {
    fit_from(model, adam, TrainerSnapshot::fresh(), pairs, src_vocab, tgt_vocab, cfg, out_dir)
}

/// The training loop. Epoch shuffles are keyed by `(seed, epoch)` and dropout
/// by `(seed, step)`, so a run resumed from `start` replays exactly the same
/// randomness as an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn fit_from<S: Scalar>(
    model: &mut Model<S>,
    adam: &mut AdamState<Model<S>>,
    start: TrainerSnapshot,
    pairs: &[(String, String)],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutput> {
    if pairs.is_empty() {
        return Err(Error::Empty("fit"));
    }
    assert!(cfg.batch_size >= 1, "fit: batch_size must be at least 1");
    assert!(
        !cfg.keep_best || out_dir.is_none(),
        "fit: keep_best is for in-memory runs; checkpointed runs reload best.ckpt"
    );

    let refs = (cfg.vocab_refs.0.as_str(), cfg.vocab_refs.1.as_str());
    let mut step = start.step;
    let mut best_loss = start.best_loss;
    let mut trace = Vec::new();
    let mut epoch_means = Vec::new();
    let mut last_saved: Option<PathBuf> = None;
    let mut best_saved: Option<PathBuf> = None;
    let mut best_params: Option<Vec<Tensor<S>>> = None;

    for epoch in (start.epoch as usize)..cfg.epochs {
        let mut shuffle_rng = Rng::stream(cfg.seed, streams::SHUFFLE, epoch as u64);
        let batches = make_batches(pairs, src_vocab, tgt_vocab, cfg.batch_size, &mut shuffle_rng)?;
        let resuming_here = epoch as u64 == start.epoch;
        let first_batch = if resuming_here { start.batch_in_epoch as usize } else { 0 };
        let (mut loss_sum, mut loss_count) = if resuming_here {
            (start.epoch_loss_sum, start.epoch_loss_count)
        } else {
            (0.0, 0)
        };

        for (bi, batch) in batches.iter().enumerate().skip(first_batch) {
            let begun = Instant::now();
            step += 1;
            let lr = cfg
                .lr_override
                .unwrap_or_else(|| lrate(step, cfg.d_model, cfg.warmup, cfg.num_gpus));

            let mut grads = model.zeros_like();
            let mut drop_rng = Rng::stream(cfg.seed, streams::DROPOUT, step);
            let mut batch_loss = 0.0;
            let mut batch_tokens = 0usize;
            for i in 0..batch.size() {
                let stats = sequence_grads(
                    model,
                    &mut grads,
                    batch.src_sentence(i),
                    batch.tgt_sentence(i),
                    cfg.dropout,
                    Some(&mut drop_rng),
                )
                .map_err(|e| diverged(step, e, &last_saved))?;
                batch_loss += stats.loss.to_f64();
                batch_tokens += stats.tokens;
            }
            let scale = S::from_f64(1.0 / batch.size() as f64);
            for (_, t) in grads.entries_mut() {
                t.scale(scale);
            }
            let mean_loss = batch_loss / batch.size() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("batch loss {mean_loss}"),
                    last_good: last_saved.as_ref().map(|p| p.display().to_string()),
                });
            }

            clip_global_norm(&mut grads, S::from_f64(cfg.clip_norm))
                .map_err(|e| diverged(step, e, &last_saved))?;
            adam_step(model, &grads, adam, step, lr)
                .map_err(|e| diverged(step, e, &last_saved))?;

            loss_sum += mean_loss;
            loss_count += 1;
            let secs = begun.elapsed().as_secs_f64().max(1e-9);
            trace.push(TraceRow {
                step,
                lrate: lr,
                loss: mean_loss,
                tokens_per_sec: batch_tokens as f64 / secs,
            });

            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    let snap = TrainerSnapshot {
                        step,
                        epoch: epoch as u64,
                        batch_in_epoch: (bi + 1) as u64,
                        epoch_loss_sum: loss_sum,
                        epoch_loss_count: loss_count,
                        best_loss,
                    };
                    let path = dir.join("last.ckpt");
                    save_checkpoint(&path, cfg.fingerprint, &snap, refs, model, &adam.m, &adam.v)?;
                    last_saved = Some(path);
                }
            }
        }

        if loss_count > 0 {
            let mean = loss_sum / loss_count as f64;
            epoch_means.push(mean);
            if mean < best_loss {
                best_loss = mean;
                if cfg.keep_best {
                    let copies = model.entries().into_iter().map(|(_, t)| t.clone()).collect();
                    best_params = Some(copies);
                }
                if let Some(dir) = out_dir {
                    let snap = TrainerSnapshot {
                        step,
                        epoch: epoch as u64 + 1,
                        batch_in_epoch: 0,
                        epoch_loss_sum: 0.0,
                        epoch_loss_count: 0,
                        best_loss,
                    };
                    let path = dir.join("best.ckpt");
                    save_checkpoint(&path, cfg.fingerprint, &snap, refs, model, &adam.m, &adam.v)?;
                    best_saved = Some(path);
                }
            }
        }
    }

    if let Some(best) = best_params {
        for ((_, dst), src) in model.entries_mut().into_iter().zip(best) {
            *dst = src;
        }
    }

    let snapshot = TrainerSnapshot {
        step,
        epoch: (cfg.epochs as u64).max(start.epoch),
        batch_in_epoch: 0,
        epoch_loss_sum: 0.0,
        epoch_loss_count: 0,
        best_loss,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("last.ckpt");
        save_checkpoint(&path, cfg.fingerprint, &snapshot, refs, model, &adam.m, &adam.v)?;
        last_saved = Some(path);
    }

    Ok(FitOutput {
        trace,
        epoch_means,
        last_checkpoint: last_saved,
        best_checkpoint: best_saved,
        snapshot,
    })
}

/// Loss trace as CSV: `step,lrate,loss,tokens_per_sec`.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut text = String::from("step,lrate,loss,tokens_per_sec\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{}\n", r.step, r.lrate, r.loss, r.tokens_per_sec));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Extend an existing trace with rows from a resumed run; starts a fresh
/// file (with header) when there is nothing to extend.
pub fn append_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    if !path.exists() {
        return write_trace(path, rows);
    }
    let mut text = String::new();
    for r in rows {
        text.push_str(&format!("{},{},{},{}\n", r.step, r.lrate, r.loss, r.tokens_per_sec));
    }
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
