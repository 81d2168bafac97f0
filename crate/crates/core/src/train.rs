//! Training loops for every regime: in-domain, the Transfer/Merge/Fine-tune
//! baselines, and the three adversarial adaptation scenarios.
//!
//! All randomness is drawn from purpose-keyed streams of one master seed
//! (see [`crate::rng`]): parameter init is keyed by parameter name, batch
//! sampling by pool and step, dropout by step and batch slot. Fixed-seed
//! runs are therefore bit-reproducible, and runs that share a pool see
//! identical draws for it regardless of what the other pools do.

use crate::adversary::lambda_schedule;
use crate::autodiff::{Mode, Tape, Var};
use crate::corpus::{Conversation, DomainLabel};
use crate::embed::build_vocab;
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionMatrix, RunReport};
use crate::model::{prepare_chunks, IndexedChunk, ModelConfig, OutputKind, SpeechActModel};
use crate::optim::{dynamic_lr, AdamState, Optimizer, SgdMomentumState};
use crate::output::ActTag;
use crate::params::{BoundParams, Params};
use crate::rng::{stream, StreamKind};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Indomain,
    Transfer,
    Merge,
    Finetune,
    AdaptUnsup,
    AdaptSemisup,
    AdaptSup,
}

impl Regime {
    pub fn is_adapt(self) -> bool {
        matches!(self, Regime::AdaptUnsup | Regime::AdaptSemisup | Regime::AdaptSup)
    }

    fn uses_target_labels(self) -> bool {
        matches!(
            self,
            Regime::Merge | Regime::Finetune | Regime::AdaptSemisup | Regime::AdaptSup
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    5
}
fn default_adam_lr() -> f64 {
    0.001
}
fn default_sgd_lr0() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_dropout() -> f64 {
    0.5
}
fn default_fraction() -> f64 {
    1.0
}
fn default_embed_dim() -> usize {
    300
}
fn default_hidden() -> usize {
    100
}
fn default_min_count() -> usize {
    1
}
fn default_chunk_len() -> usize {
    100
}
fn default_clip() -> f64 {
    5.0
}
fn default_patience() -> usize {
    5
}
fn default_variant() -> crate::encoder::EncoderVariant {
    crate::encoder::EncoderVariant::HLstm
}
fn default_output() -> OutputKind {
    OutputKind::Softmax
}

/// Everything a run needs, serializable as a JSON document. Unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Batch size in conversations (chunks once long conversations are split).
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_adam_lr")]
    pub adam_lr: f64,
    #[serde(default = "default_sgd_lr0")]
    pub sgd_lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    pub seed: u64,
    #[serde(default = "default_fraction")]
    pub target_label_fraction: f64,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub word_hidden: usize,
    #[serde(default = "default_hidden")]
    pub conv_hidden: usize,
    #[serde(default = "default_hidden")]
    pub disc_hidden: usize,
    #[serde(default = "default_variant")]
    pub variant: crate::encoder::EncoderVariant,
    #[serde(default = "default_output")]
    pub output: OutputKind,
    #[serde(default)]
    pub freeze_embeddings: bool,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    #[serde(default = "default_chunk_len")]
    pub max_chunk_len: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Pin λ to a fixed value instead of the schedule (diagnostics).
    #[serde(default)]
    pub lambda_override: Option<f64>,
    /// Update rule; defaults to SGD+momentum for adapt regimes, Adam otherwise.
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    /// Fine-tune phase 1 stops after this many epochs without source-dev
    /// improvement.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub embeddings_path: Option<PathBuf>,
    /// Development corpus path; read by the CLI for regimes whose command
    /// line has no --dev flag.
    #[serde(default)]
    pub dev_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn defaults_for(regime: Regime, seed: u64) -> Self {
        TrainConfig {
            regime,
            epochs: default_epochs(),
            batch_size: default_batch(),
            adam_lr: default_adam_lr(),
            sgd_lr0: default_sgd_lr0(),
            momentum: default_momentum(),
            dropout_rate: default_dropout(),
            seed,
            target_label_fraction: default_fraction(),
            embed_dim: default_embed_dim(),
            word_hidden: default_hidden(),
            conv_hidden: default_hidden(),
            disc_hidden: default_hidden(),
            variant: default_variant(),
            output: default_output(),
            freeze_embeddings: false,
            min_count: default_min_count(),
            max_chunk_len: default_chunk_len(),
            clip_norm: default_clip(),
            lambda_override: None,
            optimizer: None,
            patience: default_patience(),
            embeddings_path: None,
            dev_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        let allowed = [0.25, 0.5, 0.75, 1.0];
        if !allowed
            .iter()
            .any(|a| (a - self.target_label_fraction).abs() < 1e-9)
        {
            return Err(Error::Config(format!(
                "target_label_fraction {} not in {{0.25, 0.5, 0.75, 1.0}}",
                self.target_label_fraction
            )));
        }
        match self.regime {
            Regime::AdaptUnsup if self.batch_size % 2 != 0 => Err(Error::Config(
                "adapt-unsup needs an even batch_size (b/2 + b/2 composition)".into(),
            )),
            Regime::AdaptSemisup | Regime::AdaptSup if self.batch_size % 4 != 0 => {
                Err(Error::Config(
                    "adapt-semisup/adapt-sup need batch_size divisible by 4 (b/2 + b/4 + b/4)"
                        .into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            word_hidden: self.word_hidden,
            conv_hidden: self.conv_hidden,
            disc_hidden: self.disc_hidden,
            variant: self.variant,
            output: self.output,
            dropout_rate: self.dropout_rate,
            freeze_embeddings: self.freeze_embeddings,
            with_discriminator: self.regime.is_adapt(),
            max_chunk_len: self.max_chunk_len,
        }
    }

    fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(if self.regime.is_adapt() {
            OptimizerKind::Sgd
        } else {
            OptimizerKind::Adam
        })
    }
}

/// Training data by role. Which pools must be present depends on the regime.
#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub source: Vec<Conversation>,
    pub target_labeled: Vec<Conversation>,
    pub target_unlabeled: Vec<Conversation>,
    pub dev: Vec<Conversation>,
    /// Source-domain dev set; required by fine-tune phase 1.
    pub source_dev: Vec<Conversation>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub train_loss_c: f64,
    pub train_loss_d: Option<f64>,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
    pub lambda: Option<f64>,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: SpeechActModel,
    pub history: Vec<HistoryEntry>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub embedding_coverage: Option<f64>,
}

// pool tags for stream keying
const POOL_SRC: u64 = 0;
const POOL_TL: u64 = 1;
const POOL_TU: u64 = 2;

struct PoolSpec<'a> {
    chunks: &'a [IndexedChunk],
    tag: u64,
    quota: usize,
    /// classification loss uses this pool's labels
    labeled: bool,
    domain: DomainLabel,
}

struct Phase<'a> {
    pools: Vec<PoolSpec<'a>>,
    adversarial: bool,
    epochs: usize,
    patience: Option<usize>,
    dev: &'a [IndexedChunk],
}

/// Decode every chunk and tally metrics. All sentences must carry labels.
pub fn evaluate_chunks(
    model: &SpeechActModel,
    chunks: &[IndexedChunk],
) -> Result<(RunReport, ConfusionMatrix)> {
    let mut gold = Vec::with_capacity(chunks.len());
    let mut pred = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        gold.push(chunk.labels_strict()?);
        pred.push(model.predict_chunk(chunk)?);
    }
    let cm = confusion(&gold, &pred, crate::output::NUM_TAGS)?;
    let labels: Vec<&str> = ActTag::ALL.iter().map(|t| t.as_str()).collect();
    Ok((RunReport::from_confusion(&cm, &labels), cm))
}

/// Keep ⌈fraction·n⌉ labeled target conversations (chosen by the run seed);
/// returns (kept, leftover-with-labels-stripped).
pub fn subsample_target_labels(
    convs: &[Conversation],
    fraction: f64,
    seed: u64,
) -> (Vec<Conversation>, Vec<Conversation>) {
    let n_keep = (fraction * convs.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..convs.len()).collect();
    let mut rng = stream(seed, StreamKind::Subsample, &[]);
    order.shuffle(&mut rng);
    let kept: Vec<Conversation> = order[..n_keep].iter().map(|&i| convs[i].clone()).collect();
    let rest = order[n_keep..]
        .iter()
        .map(|&i| {
            let mut c = convs[i].clone();
            for comment in &mut c.comments {
                for s in &mut comment.sentences {
                    s.act = None;
                }
            }
            c
        })
        .collect();
    (kept, rest)
}

fn strip_labels(chunks: &mut [IndexedChunk]) {
    for c in chunks {
        c.labels.iter_mut().for_each(|l| *l = None);
    }
}

fn require_pool(name: &str, pool: &[Conversation]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Regime(format!("{name} pool is empty")));
    }
    Ok(())
}

/// Train a model under `config` on `pools`; returns the checkpoint with the
/// best dev macro-F1 (ties to the earlier epoch) and the epoch history.
pub fn train(config: &TrainConfig, pools: &Pools) -> Result<TrainOutcome> {
    config.validate()?;
    let regime = config.regime;
    require_pool("dev", &pools.dev)?;
    match regime {
        Regime::Indomain | Regime::Transfer => require_pool("train", &pools.source)?,
        Regime::Merge => {
            require_pool("source", &pools.source)?;
            require_pool("target-labeled", &pools.target_labeled)?;
        }
        Regime::Finetune => {
            require_pool("source", &pools.source)?;
            require_pool("target-labeled", &pools.target_labeled)?;
            require_pool("source-dev", &pools.source_dev)?;
        }
        Regime::AdaptUnsup => {
            require_pool("source", &pools.source)?;
            require_pool("target-unlabeled", &pools.target_unlabeled)?;
            if !pools.target_labeled.is_empty() {
                return Err(Error::Regime(
                    "adapt-unsup must not receive a target-labeled pool".into(),
                ));
            }
        }
        Regime::AdaptSemisup | Regime::AdaptSup => {
            require_pool("source", &pools.source)?;
            require_pool("target-labeled", &pools.target_labeled)?;
        }
    }

    // target-label subsampling at conversation granularity; in adapt
    // regimes the unselected conversations join the unlabeled pool
    let (target_labeled, target_unlabeled) = if regime.uses_target_labels() {
        let (kept, rest) =
            subsample_target_labels(&pools.target_labeled, config.target_label_fraction, config.seed);
        let mut unlab = pools.target_unlabeled.clone();
        if regime.is_adapt() {
            unlab.extend(rest);
        }
        (kept, unlab)
    } else {
        (pools.target_labeled.clone(), pools.target_unlabeled.clone())
    };

    // vocabulary over every conversation supplied to this run, sampled or
    // not, so runs sharing pools build identical embedding tables
    let mut train_convs: Vec<Conversation> = pools.source.clone();
    train_convs.extend(target_labeled.iter().cloned());
    train_convs.extend(target_unlabeled.iter().cloned());
    let vocab = build_vocab(&train_convs, config.min_count)?;

    let (mut model, embedding_coverage) = SpeechActModel::new(
        config.model_config(),
        vocab,
        config.seed,
        config.embeddings_path.as_deref(),
    )?;

    let chunk = |convs: &[Conversation]| prepare_chunks(convs, &model.vocab, config.max_chunk_len);
    let source_chunks = chunk(&pools.source);
    let tl_chunks = chunk(&target_labeled);
    let mut tu_chunks = chunk(&target_unlabeled);
    strip_labels(&mut tu_chunks);
    let dev_chunks = chunk(&pools.dev);
    let source_dev_chunks = chunk(&pools.source_dev);

    let merged_chunks: Vec<IndexedChunk> = if regime == Regime::Merge {
        source_chunks.iter().chain(&tl_chunks).cloned().collect()
    } else {
        Vec::new()
    };

    let b = config.batch_size;
    let opt_kind = config.optimizer_kind();
    let mut optimizer = match opt_kind {
        OptimizerKind::Adam => Optimizer::Adam(AdamState::new(&model.params)),
        OptimizerKind::Sgd => {
            Optimizer::Sgd(SgdMomentumState::new(&model.params, config.momentum))
        }
    };

    let mut runner = PhaseRunner {
        config,
        opt_kind,
        global_step: 0,
        history: Vec::new(),
        best: None,
        epoch_counter: 0,
    };

    match regime {
        Regime::Indomain | Regime::Transfer => {
            let phase = Phase {
                pools: vec![PoolSpec {
                    chunks: &source_chunks,
                    tag: POOL_SRC,
                    quota: b,
                    labeled: true,
                    domain: DomainLabel::Source,
                }],
                adversarial: false,
                epochs: config.epochs,
                patience: None,
                dev: &dev_chunks,
            };
            runner.run(&mut model, &mut optimizer, &phase)?;
        }
        Regime::Merge => {
            let phase = Phase {
                pools: vec![PoolSpec {
                    chunks: &merged_chunks,
                    tag: POOL_SRC,
                    quota: b,
                    labeled: true,
                    domain: DomainLabel::Source,
                }],
                adversarial: false,
                epochs: config.epochs,
                patience: None,
                dev: &dev_chunks,
            };
            runner.run(&mut model, &mut optimizer, &phase)?;
        }
        Regime::Finetune => {
            // phase 1: source until convergence (dev-F1 patience)
            let phase1 = Phase {
                pools: vec![PoolSpec {
                    chunks: &source_chunks,
                    tag: POOL_SRC,
                    quota: b,
                    labeled: true,
                    domain: DomainLabel::Source,
                }],
                adversarial: false,
                epochs: config.epochs,
                patience: Some(config.patience),
                dev: &source_dev_chunks,
            };
            runner.run(&mut model, &mut optimizer, &phase1)?;
            // best-checkpoint tracking restarts for the target phase
            runner.best = None;
            let phase2 = Phase {
                pools: vec![PoolSpec {
                    chunks: &tl_chunks,
                    tag: POOL_TL,
                    quota: b,
                    labeled: true,
                    domain: DomainLabel::Target,
                }],
                adversarial: false,
                epochs: config.epochs,
                patience: None,
                dev: &dev_chunks,
            };
            runner.run(&mut model, &mut optimizer, &phase2)?;
        }
        Regime::AdaptUnsup => {
            let phase = Phase {
                pools: vec![
                    PoolSpec {
                        chunks: &source_chunks,
                        tag: POOL_SRC,
                        quota: b / 2,
                        labeled: true,
                        domain: DomainLabel::Source,
                    },
                    PoolSpec {
                        chunks: &tu_chunks,
                        tag: POOL_TU,
                        quota: b / 2,
                        labeled: false,
                        domain: DomainLabel::Target,
                    },
                ],
                adversarial: true,
                epochs: config.epochs,
                patience: None,
                dev: &dev_chunks,
            };
            runner.run(&mut model, &mut optimizer, &phase)?;
        }
        Regime::AdaptSemisup | Regime::AdaptSup => {
            // an absent unlabeled pool is refilled from the labeled one,
            // with labels ignored for those slots
            let tu_pool: &[IndexedChunk] = if tu_chunks.is_empty() {
                &tl_chunks
            } else {
                &tu_chunks
            };
            let phase = Phase {
                pools: vec![
                    PoolSpec {
                        chunks: &source_chunks,
                        tag: POOL_SRC,
                        quota: b / 2,
                        labeled: true,
                        domain: DomainLabel::Source,
                    },
                    PoolSpec {
                        chunks: &tl_chunks,
                        tag: POOL_TL,
                        quota: b / 4,
                        labeled: true,
                        domain: DomainLabel::Target,
                    },
                    PoolSpec {
                        chunks: tu_pool,
                        tag: POOL_TU,
                        quota: b / 4,
                        labeled: false,
                        domain: DomainLabel::Target,
                    },
                ],
                adversarial: true,
                epochs: config.epochs,
                patience: None,
                dev: &dev_chunks,
            };
            runner.run(&mut model, &mut optimizer, &phase)?;
        }
    }

    let (best_params, best_epoch, best_dev_f1) = runner
        .best
        .ok_or_else(|| Error::State("training produced no epochs".into()))?;
    model.params = best_params;
    Ok(TrainOutcome {
        model,
        history: runner.history,
        best_epoch,
        best_dev_f1,
        embedding_coverage,
    })
}

struct PhaseRunner<'c> {
    config: &'c TrainConfig,
    opt_kind: OptimizerKind,
    global_step: u64,
    history: Vec<HistoryEntry>,
    best: Option<(Params, usize, f64)>,
    epoch_counter: usize,
}

impl PhaseRunner<'_> {
    fn run(
        &mut self,
        model: &mut SpeechActModel,
        optimizer: &mut Optimizer,
        phase: &Phase<'_>,
    ) -> Result<()> {
        let cfg = self.config;
        for p in &phase.pools {
            if p.chunks.is_empty() && p.quota > 0 {
                return Err(Error::Regime("a required pool has no conversations".into()));
            }
        }
        // the largest pool defines an epoch; the others resample per step
        let driving = phase
            .pools
            .iter()
            .enumerate()
            .filter(|(_, p)| p.quota > 0)
            .max_by(|(ia, a), (ib, b)| {
                (a.chunks.len())
                    .cmp(&b.chunks.len())
                    .then(ib.cmp(ia)) // ties go to the earlier pool (source first)
            })
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Regime("no active pools".into()))?;
        let steps_per_epoch =
            phase.pools[driving].chunks.len().div_ceil(phase.pools[driving].quota);
        let total_steps = (phase.epochs * steps_per_epoch) as f64;

        let mut epochs_since_best = 0usize;
        let mut phase_best = f64::NEG_INFINITY;
        let mut phase_step = 0u64;

        for epoch_in_phase in 0..phase.epochs {
            self.epoch_counter += 1;
            let mut orders: Vec<Vec<usize>> = Vec::with_capacity(phase.pools.len());
            for (i, p) in phase.pools.iter().enumerate() {
                if i == driving {
                    let mut order: Vec<usize> = (0..p.chunks.len()).collect();
                    let mut rng = stream(
                        cfg.seed,
                        StreamKind::Shuffle,
                        &[p.tag, epoch_in_phase as u64],
                    );
                    order.shuffle(&mut rng);
                    orders.push(order);
                } else {
                    orders.push(Vec::new());
                }
            }

            let mut loss_c_sum = 0.0;
            let mut loss_d_sum = 0.0;
            let mut last_lambda = 0.0;
            let mut last_lr = 0.0;
            for step_in_epoch in 0..steps_per_epoch {
                let progress = phase_step as f64 / total_steps;
                let lambda = if phase.adversarial {
                    cfg.lambda_override.unwrap_or_else(|| lambda_schedule(progress))
                } else {
                    0.0
                };
                let lr = match self.opt_kind {
                    OptimizerKind::Adam => cfg.adam_lr,
                    OptimizerKind::Sgd => dynamic_lr(progress, cfg.sgd_lr0, 10.0, 0.75),
                };

                let mut batch: Vec<(usize, Vec<usize>)> = Vec::new();
                for (i, p) in phase.pools.iter().enumerate() {
                    if p.quota == 0 {
                        continue;
                    }
                    let picks = if i == driving {
                        let order = &orders[i];
                        (0..p.quota)
                            .map(|j| order[(step_in_epoch * p.quota + j) % order.len()])
                            .collect()
                    } else {
                        let mut rng =
                            stream(cfg.seed, StreamKind::Sample, &[p.tag, self.global_step]);
                        (0..p.quota)
                            .map(|_| rng.random_range(0..p.chunks.len()))
                            .collect::<Vec<usize>>()
                    };
                    batch.push((i, picks));
                }

                let (loss_c, loss_d) =
                    self.step(model, optimizer, phase, &batch, lambda, lr)?;
                loss_c_sum += loss_c;
                loss_d_sum += loss_d.unwrap_or(0.0);
                last_lambda = lambda;
                last_lr = lr;
                self.global_step += 1;
                phase_step += 1;
            }

            let (report, _) = evaluate_chunks(model, phase.dev)?;
            let entry = HistoryEntry {
                epoch: self.epoch_counter,
                train_loss_c: loss_c_sum / steps_per_epoch as f64,
                train_loss_d: phase
                    .adversarial
                    .then_some(loss_d_sum / steps_per_epoch as f64),
                dev_accuracy: report.accuracy,
                dev_macro_f1: report.macro_f1,
                lambda: phase.adversarial.then_some(last_lambda),
                lr: last_lr,
            };
            self.history.push(entry);

            let improved_overall = self.best.as_ref().is_none_or(|(_, _, f1)| report.macro_f1 > *f1);
            if improved_overall {
                self.best = Some((model.params.clone(), self.epoch_counter, report.macro_f1));
            }
            if report.macro_f1 > phase_best {
                phase_best = report.macro_f1;
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
            }
            if let Some(patience) = phase.patience {
                if epochs_since_best >= patience {
                    break;
                }
            }
        }
        Ok(())
    }

    /// One optimizer step on one batch. Implements the composite objective
    /// L_c + λ·L_d with the discriminator wired through gradient reversal:
    /// descending it steps the classifier and encoder on ∇L_c, the
    /// discriminator on λ·∇_ω L_d, and the encoder on −λ·∇_θ L_d.
    fn step(
        &mut self,
        model: &mut SpeechActModel,
        optimizer: &mut Optimizer,
        phase: &Phase<'_>,
        batch: &[(usize, Vec<usize>)],
        lambda: f64,
        lr: f64,
    ) -> Result<(f64, Option<f64>)> {
        let cfg = self.config;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &model.params);
        let mut class_losses: Vec<Var> = Vec::new();
        let mut domain_losses: Vec<Var> = Vec::new();
        for (pool_idx, picks) in batch {
            let pool = &phase.pools[*pool_idx];
            for (slot, &chunk_idx) in picks.iter().enumerate() {
                let chunk = &pool.chunks[chunk_idx];
                let mut rng = stream(
                    cfg.seed,
                    StreamKind::Dropout,
                    &[self.global_step, pool.tag, slot as u64],
                );
                let us = model.encode_chunk(&mut tape, &bound, chunk, Mode::Train, &mut rng)?;
                if pool.labeled {
                    let labels = chunk.labels_strict()?;
                    class_losses.push(model.chunk_class_loss(&mut tape, &bound, &us, &labels)?);
                }
                if phase.adversarial {
                    domain_losses.extend(model.chunk_domain_losses(
                        &mut tape,
                        &bound,
                        &us,
                        pool.domain,
                        1.0,
                    )?);
                }
            }
        }

        let loss_c = {
            let sum = tape.add_n(&class_losses)?;
            tape.affine(sum, 1.0 / class_losses.len() as f64, 0.0)
        };
        let (total, loss_d_value) = if phase.adversarial {
            let sum = tape.add_n(&domain_losses)?;
            let mean = tape.affine(sum, 1.0 / domain_losses.len() as f64, 0.0);
            let weighted = tape.affine(mean, lambda, 0.0);
            let total = tape.add(loss_c, weighted)?;
            (total, Some(tape.value(mean).item()))
        } else {
            (loss_c, None)
        };

        let loss_c_value = tape.value(loss_c).item();
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::Divergence {
                step: self.global_step as usize,
                msg: format!(
                    "loss_c = {loss_c_value}, loss_d = {loss_d_value:?} at λ = {lambda}"
                ),
            });
        }

        tape.backward(total)?;
        model.params.zero_grad();
        bound.export_grads(&tape, &mut model.params)?;
        model.params.clip_grad_norm(cfg.clip_norm);
        optimizer.step(&mut model.params, lr)?;
        Ok((loss_c_value, loss_d_value))
    }
}
