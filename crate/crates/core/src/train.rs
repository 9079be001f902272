//! The training regime: shuffled length-bucketed mini-batches, teacher
//! forcing, Adam under linear warmup, dev cross-entropy / perplexity
//! monitoring, periodic checkpoints, early stopping, and best-checkpoint
//! selection.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, TrainMeta};
use crate::data::TokenPair;
use crate::model::{Batch, Model, ModelError};
use crate::optim::{adam_step, clip_global_norm, AdamState, LrSchedule};
use crate::params::ParamError;
use crate::segment::{BpeModel, SegmentError, Segmenter, Vocabulary};
use crate::tape::Tape;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at update {update}")]
    Diverged { update: u64 },
    #[error("training corpus is empty")]
    EmptyTrain,
    #[error("development corpus is empty")]
    EmptyDev,
    #[error("no checkpoints to select from")]
    NoCheckpoints,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] crate::tape::AutogradError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters. The `full` profile is the full-size regime
/// (learning rate 3e-4, 16,000 warmup steps, a checkpoint every 500
/// updates, patience of 8 checkpoints); `toy` scales the schedule down for
/// desk-size corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub checkpoint_every: u64,
    /// Early-stopping patience, counted in checkpoints.
    pub patience: u64,
    pub batch_size: usize,
    /// Hard cap on optimizer updates.
    pub max_updates: u64,
    pub seed: u64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub label_smoothing: f64,
}

impl TrainConfig {
    pub fn full() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            warmup_steps: 16_000,
            checkpoint_every: 500,
            patience: 8,
            batch_size: 64,
            max_updates: 200_000,
            seed: 1,
            clip_norm: Some(1.0),
            label_smoothing: 0.0,
        }
    }

    pub fn toy() -> Self {
        TrainConfig {
            warmup_steps: 1_600,
            checkpoint_every: 100,
            max_updates: 20_000,
            ..Self::full()
        }
    }

    /// Scale the schedule lengths (warmup, checkpoint interval) by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.warmup_steps = ((self.warmup_steps as f64 * factor).round() as u64).max(1);
        self.checkpoint_every = ((self.checkpoint_every as f64 * factor).round() as u64).max(1);
        self
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base_lr: self.base_lr, warmup_steps: self.warmup_steps }
    }
}

/// One saved checkpoint and its dev metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub update_step: u64,
    /// Mean dev negative log-likelihood per target symbol, in nats.
    pub dev_cross_entropy: f64,
    pub dev_perplexity: f64,
    pub path: PathBuf,
}

/// Result of one training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<CheckpointMeta>,
    /// Index into `checkpoints` of the best (lowest perplexity) entry.
    pub best: usize,
    pub stopped_early: bool,
    pub final_update: u64,
    /// Deterministic training log, one line per checkpoint.
    pub log: String,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> &CheckpointMeta {
        &self.checkpoints[self.best]
    }
}

/// Id-encoded (source, target) pairs ready for batching.
pub type EncodedPair = (Vec<u32>, Vec<u32>);

/// Segment and id-encode token pairs (historical side is the source).
pub fn encode_pairs(
    pairs: &[TokenPair],
    segmenter: &Segmenter,
    vocab: &Vocabulary,
) -> Result<Vec<EncodedPair>, SegmentError> {
    pairs
        .iter()
        .map(|p| {
            let src = vocab.encode(&segmenter.segment(&p.historical)?);
            let tgt = vocab.encode(&segmenter.segment(&p.modern)?);
            Ok((src, tgt))
        })
        .collect()
}

/// Group pairs into equal-source-length batches. With an RNG, pair order
/// within a length bucket and the batch order are shuffled; without one the
/// order is deterministic (dev evaluation).
pub fn make_batches(
    pairs: &[EncodedPair],
    batch_size: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Batch>, ModelError> {
    use std::collections::BTreeMap;
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (src, _)) in pairs.iter().enumerate() {
        buckets.entry(src.len()).or_default().push(i);
    }
    let mut order: Vec<Vec<usize>> = Vec::new();
    match rng {
        Some(rng) => {
            for bucket in buckets.values_mut() {
                bucket.shuffle(rng);
            }
            for bucket in buckets.values() {
                for chunk in bucket.chunks(batch_size) {
                    order.push(chunk.to_vec());
                }
            }
            order.shuffle(rng);
        }
        None => {
            for bucket in buckets.values() {
                for chunk in bucket.chunks(batch_size) {
                    order.push(chunk.to_vec());
                }
            }
        }
    }
    order
        .into_iter()
        .map(|chunk| {
            let members: Vec<EncodedPair> =
                chunk.into_iter().map(|i| pairs[i].clone()).collect();
            Batch::new(&members)
        })
        .collect()
}

/// Teacher-forced dev metrics: (cross-entropy in nats per target symbol
/// with EOS included, perplexity).
pub fn evaluate_dev<F: Scalar>(
    model: &Model<F>,
    dev: &[EncodedPair],
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    if dev.is_empty() {
        return Err(TrainError::EmptyDev);
    }
    let batches = make_batches(dev, batch_size, None)?;
    let mut nll_sum = 0.0;
    let mut n_symbols = 0.0;
    for batch in &batches {
        let (mean_loss, n) = model.eval_batch(batch)?;
        nll_sum += mean_loss * n;
        n_symbols += n;
    }
    let ce = nll_sum / n_symbols;
    Ok((ce, ce.exp()))
}

/// Lowest dev perplexity wins; ties go to the earlier checkpoint.
pub fn select_best(checkpoints: &[CheckpointMeta]) -> Result<&CheckpointMeta, TrainError> {
    checkpoints
        .iter()
        .reduce(|best, c| if c.dev_perplexity < best.dev_perplexity { c } else { best })
        .ok_or(TrainError::NoCheckpoints)
}

/// Train `model` on the encoded corpus, writing checkpoints and a
/// deterministic `train.log` under `out_dir`. Training stops when dev
/// perplexity has not improved for `patience` consecutive checkpoints, or at
/// `max_updates`.
#[allow(clippy::too_many_arguments)]
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    train_pairs: &[EncodedPair],
    dev_pairs: &[EncodedPair],
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    vocab: &Vocabulary,
    bpe: Option<&BpeModel>,
) -> Result<TrainOutcome, TrainError> {
    if train_pairs.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if dev_pairs.is_empty() {
        return Err(TrainError::EmptyDev);
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let schedule = cfg.schedule();
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut update: u64 = 0;
    let mut window_nll = 0.0;
    let mut window_symbols = 0.0;
    let mut checkpoints: Vec<CheckpointMeta> = Vec::new();
    let mut best_ppl = f64::INFINITY;
    let mut since_best: u64 = 0;
    let mut stopped_early = false;
    let mut log = String::new();

    'training: loop {
        let batches = make_batches(train_pairs, cfg.batch_size, Some(&mut rng))?;
        for batch in &batches {
            let tape = Tape::new();
            let bound = model.params.bind(&tape)?;
            let out = model.forward_batch(
                &tape,
                &bound,
                batch,
                true,
                &mut rng,
                cfg.label_smoothing,
            )?;
            let loss_val = out.loss.item().to_f64();
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { update: update + 1 });
            }
            window_nll += loss_val * out.n_symbols;
            window_symbols += out.n_symbols;
            let grads = tape.backward(&out.loss)?;
            let mut grad_vecs = model.params.collect_grads(&bound, &grads)?;
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut grad_vecs, max_norm);
            }
            adam_step(&mut model.params, &grad_vecs, &mut adam, &schedule)?;
            update += 1;

            if update.is_multiple_of(cfg.checkpoint_every) {
                let (dev_ce, dev_ppl) = evaluate_dev(model, dev_pairs, cfg.batch_size)?;
                let path = out_dir.join(format!("checkpoint-{update:08}.hnck"));
                let meta = TrainMeta {
                    update_step: update,
                    dev_cross_entropy: dev_ce,
                    dev_perplexity: dev_ppl,
                };
                checkpoint::save(&path, model, vocab, bpe, &meta)?;
                let train_loss = window_nll / window_symbols.max(1.0);
                window_nll = 0.0;
                window_symbols = 0.0;
                let line = format!(
                    "checkpoint update={} lr={:.8} train_loss={:.6} dev_ce={:.6} dev_ppl={:.6} path={}",
                    update,
                    schedule.lr(update),
                    train_loss,
                    dev_ce,
                    dev_ppl,
                    path.display()
                );
                log::info!("{line}");
                log.push_str(&line);
                log.push('\n');
                checkpoints.push(CheckpointMeta {
                    update_step: update,
                    dev_cross_entropy: dev_ce,
                    dev_perplexity: dev_ppl,
                    path,
                });
                if dev_ppl < best_ppl {
                    best_ppl = dev_ppl;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        stopped_early = true;
                        break 'training;
                    }
                }
            }
            if update >= cfg.max_updates {
                break 'training;
            }
        }
    }

    // A run shorter than one checkpoint interval still leaves one checkpoint.
    if checkpoints.is_empty() {
        let (dev_ce, dev_ppl) = evaluate_dev(model, dev_pairs, cfg.batch_size)?;
        let path = out_dir.join(format!("checkpoint-{update:08}.hnck"));
        let meta = TrainMeta {
            update_step: update,
            dev_cross_entropy: dev_ce,
            dev_perplexity: dev_ppl,
        };
        checkpoint::save(&path, model, vocab, bpe, &meta)?;
        let line = format!(
            "checkpoint update={} lr={:.8} train_loss={:.6} dev_ce={:.6} dev_ppl={:.6} path={}",
            update,
            schedule.lr(update),
            window_nll / window_symbols.max(1.0),
            dev_ce,
            dev_ppl,
            path.display()
        );
        log.push_str(&line);
        log.push('\n');
        checkpoints.push(CheckpointMeta {
            update_step: update,
            dev_cross_entropy: dev_ce,
            dev_perplexity: dev_ppl,
            path,
        });
    }

    let best_meta = select_best(&checkpoints)?.clone();
    let best = checkpoints.iter().position(|c| c == &best_meta).unwrap();
    fs::write(out_dir.join("best_checkpoint.txt"), format!("{}\n", best_meta.path.display()))?;
    fs::write(out_dir.join("train.log"), &log)?;
    Ok(TrainOutcome { checkpoints, best, stopped_early, final_update: update, log })
}
