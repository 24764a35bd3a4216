//! Adaptation tuning, adapter fine-tuning and the shared training loop.

mod eval;
mod optim;

pub use eval::{evaluate, EvalReport, SampleResult};
pub use optim::{clip_global_norm, AdamW};

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, QaRecord, Split};
use crate::encoder::{GradientSet, Mode, ModelConfig, ModelParameters, Tape, TrainablePolicy};
use crate::error::{Error, Result};
use crate::head::{build_target, kl_loss, kl_loss_grad, AnswerScores, TargetDistribution};
use crate::sequencer::{build_input, InputSequence, Vocabulary};
use crate::serialize::{serialize_subgraph, NodeToken};

pub const REASONING_ADAPTER: &str = "reasoning";
pub const RETRIEVAL_ADAPTER: &str = "retrieval";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Adapt,
    FinetuneReason,
    FinetuneRetrieve,
}

impl Task {
    pub fn adapter(self) -> Option<&'static str> {
        match self {
            Task::Adapt => None,
            Task::FinetuneReason => Some(REASONING_ADAPTER),
            Task::FinetuneRetrieve => Some(RETRIEVAL_ADAPTER),
        }
    }

    pub fn default_policy(self) -> TrainablePolicy {
        match self {
            Task::Adapt => TrainablePolicy::Full,
            _ => TrainablePolicy::AdaptersAndHeadOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `None` picks the task default.
    pub policy: Option<TrainablePolicy>,
    /// Evaluate on the validation split every this many epochs.
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(Task::Adapt)
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        let (lr, batch_size) = match task {
            Task::Adapt => (1e-4, 40),
            Task::FinetuneRetrieve => (5e-5, 10),
            Task::FinetuneReason => (1e-4, 4),
        };
        Self {
            task,
            lr,
            batch_size,
            epochs: 10,
            seed: 0,
            policy: None,
            eval_interval: 1,
            patience: 5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            tau: 0.5,
        }
    }

    pub fn policy(&self) -> TrainablePolicy {
        self.policy.unwrap_or(self.task.default_policy())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::invalid(
                "batch size and eval interval must be positive",
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid("tau must be in (0, 1]"));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::invalid(
                "weight decay and clip norm must be non-negative",
            ));
        }
        match (self.task, self.policy()) {
            (Task::Adapt, TrainablePolicy::Full) => Ok(()),
            (Task::Adapt, _) => Err(Error::invalid("adaptation tuning updates all parameters")),
            (_, TrainablePolicy::AdaptersAndHeadOnly) => Ok(()),
            (_, TrainablePolicy::Full) => {
                Err(Error::invalid("fine-tuning trains adapters and head only"))
            }
        }
    }
}

/// A prepared training or evaluation instance: an input, the candidate
/// positions scored by the head, and the target over them.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: usize,
    pub input: InputSequence,
    pub candidates: Vec<usize>,
    /// `None` when no gold answer made it into the input.
    pub target: Option<TargetDistribution>,
    pub answer_positions: HashSet<usize>,
    /// Gold answer count including answers absent from the input.
    pub gold_total: usize,
}

impl Example {
    /// Surface label of the token at absolute position `pos`.
    pub fn label(&self, pos: usize) -> &str {
        &self.input.graph.labels()[pos - self.input.question_len()]
    }
}

/// Serializes a record's subgraph and assembles its answer-prediction example.
pub fn reasoning_example(
    vocab: &Vocabulary,
    config: &ModelConfig,
    record: &QaRecord,
) -> Result<Example> {
    let sample = record.to_graph_sample()?;
    let ser = serialize_subgraph(&sample.graph, &sample.subgraph)?;
    let input = build_input(
        vocab,
        &record.question,
        &ser,
        config.max_len,
        config.graph_attention,
    )?;
    let n_q = input.question_len();
    let target = build_target(&sample.answers, &input.graph, n_q);
    let answer_positions = input
        .graph
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t, NodeToken::Entity(e) if sample.answers.contains(e)))
        .map(|(i, _)| i + n_q)
        .collect();
    Ok(Example {
        id: record.id,
        candidates: input.entity_positions(),
        input,
        target,
        answer_positions,
        gold_total: sample.gold_total,
    })
}

pub fn reasoning_examples<'a>(
    vocab: &Vocabulary,
    config: &ModelConfig,
    records: impl IntoIterator<Item = &'a QaRecord>,
) -> Result<Vec<Example>> {
    records
        .into_iter()
        .map(|r| reasoning_example(vocab, config, r))
        .collect()
}

/// Eval-mode scores for one example.
pub fn predict(model: &ModelParameters, ex: &Example) -> Result<AnswerScores> {
    let h = model.forward(&ex.input, Mode::Eval)?;
    model.score_positions(&h, &ex.candidates)
}

/// Loss of one example without gradients; `None` when it has no target.
pub fn example_loss(model: &ModelParameters, ex: &Example, mode: Mode) -> Result<Option<f64>> {
    let Some(target) = &ex.target else {
        return Ok(None);
    };
    let h = model.forward(&ex.input, mode)?;
    let scores = model.score_positions(&h, &ex.candidates)?;
    kl_loss(target, &scores).map(Some)
}

/// Loss of one example, accumulating its gradients into `grads`.
pub fn example_loss_grad(
    model: &ModelParameters,
    ex: &Example,
    mode: Mode,
    grads: &mut GradientSet,
) -> Result<Option<f64>> {
    let Some(target) = &ex.target else {
        return Ok(None);
    };
    let mut tape = Tape::new();
    let h = model.forward_recorded(&ex.input, mode, &mut tape)?;
    let scores = model.score_positions(&h, &ex.candidates)?;
    let loss = kl_loss(target, &scores)?;
    let d_logits = kl_loss_grad(target, &scores);
    let dh = model.head_backward(&h, &ex.candidates, &d_logits, grads);
    tape.backward(model, &dh, grads)?;
    Ok(Some(loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hits1: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub best_val_hits1: Option<f64>,
    pub best_checkpoint: Option<String>,
    pub params_total: usize,
    pub params_updated: usize,
    pub updated_fraction: f64,
    pub structural_mask: bool,
    /// Whether the starting weights came from adaptation tuning.
    pub adapted: bool,
    pub train_examples: usize,
    /// Training examples without any gold answer in their input.
    pub skipped_examples: usize,
    pub aborted: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Copy with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Shared loop: shuffled mini-batches, gradient averaging over the batch,
/// global-norm clipping, AdamW, periodic validation Hits@1 with best-state
/// restore and early stopping. The model must already carry the right
/// trainable flags and active adapter.
pub fn train_examples(
    model: &mut ModelParameters,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let counts = model.param_counts();
    let mut report = RunReport {
        task: cfg.task,
        seed: cfg.seed,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: Vec::new(),
        best_epoch: None,
        best_val_hits1: None,
        best_checkpoint: None,
        params_total: counts.total,
        params_updated: counts.trainable,
        updated_fraction: counts.trainable_fraction(),
        structural_mask: model.config().graph_attention == crate::mask::GraphAttention::Structural,
        adapted: false,
        train_examples: train.len(),
        skipped_examples: train.iter().filter(|e| e.target.is_none()).count(),
        aborted: None,
        wall_clock_secs: 0.0,
    };
    if report.skipped_examples > 0 {
        log::warn!(
            "{} of {} training examples have no answer in their input and are skipped",
            report.skipped_examples,
            train.len()
        );
    }
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut grads = GradientSet::zeros_like(model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best_state = None;
    let mut stale = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let mut n = 0usize;
            for &i in batch {
                let mode = Mode::Train {
                    seed: derive_seed(epoch_seed, i as u64),
                };
                let loss = match example_loss_grad(model, &train[i], mode, &mut grads) {
                    Ok(l) => l,
                    Err(Error::NonFinite(m)) => {
                        report.aborted = Some(format!("epoch {epoch}: {m}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                if let Some(l) = loss {
                    if !l.is_finite() {
                        report.aborted = Some(format!("epoch {epoch}: non-finite loss"));
                        break 'epochs;
                    }
                    loss_sum += l;
                    counted += 1;
                    n += 1;
                }
            }
            if n == 0 {
                continue;
            }
            grads.scale(1.0 / n as f64);
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                report.aborted = Some(format!("epoch {epoch}: non-finite gradient"));
                break 'epochs;
            }
            opt.step(model, &grads);
        }
        let train_loss = if counted > 0 {
            loss_sum / counted as f64
        } else {
            0.0
        };
        let mut entry = EpochReport {
            epoch,
            train_loss,
            val_hits1: None,
            val_f1: None,
        };
        let mut stop = false;
        if !val.is_empty() && (epoch % cfg.eval_interval == 0 || epoch == cfg.epochs) {
            let m = evaluate(model, val, cfg.tau)?;
            entry.val_hits1 = Some(m.hits1);
            entry.val_f1 = Some(m.f1);
            if report.best_val_hits1.is_none_or(|b| m.hits1 > b) {
                report.best_val_hits1 = Some(m.hits1);
                report.best_epoch = Some(epoch);
                best_state = Some(model.tensors().to_vec());
                stale = 0;
            } else {
                stale += 1;
                stop = cfg.patience > 0 && stale >= cfg.patience;
            }
        }
        log::info!(
            "epoch {epoch}: loss {train_loss:.4} val hits@1 {}",
            entry.val_hits1.map_or("-".into(), |h| format!("{h:.4}"))
        );
        report.epochs.push(entry);
        if stop {
            log::info!("early stop after {stale} evaluations without improvement");
            break;
        }
    }
    if let Some(state) = best_state {
        model.tensors_mut().clone_from_slice(&state);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

fn split_examples(
    vocab: &Vocabulary,
    model: &ModelParameters,
    records: &[QaRecord],
) -> Result<(Vec<Example>, Vec<Example>)> {
    let cfg = model.config();
    let train = reasoning_examples(
        vocab,
        cfg,
        records.iter().filter(|r| r.split == Split::Train),
    )?;
    let val = reasoning_examples(
        vocab,
        cfg,
        records.iter().filter(|r| r.split == Split::Validation),
    )?;
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training records"));
    }
    Ok((train, val))
}

/// Full-parameter answer-prediction training of the bare encoder.
pub fn adapt_tune(
    model: &mut ModelParameters,
    vocab: &Vocabulary,
    records: &[QaRecord],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    if cfg.task != Task::Adapt {
        return Err(Error::invalid("adapt_tune needs the adapt task"));
    }
    model.set_active_adapter(None)?;
    model.set_trainable(cfg.policy())?;
    let (train, val) = split_examples(vocab, model, records)?;
    if val.is_empty() {
        return Err(Error::invalid("dataset has no validation records"));
    }
    train_examples(model, &train, &val, cfg)
}

/// Adapter-only training on prepared examples; adds the task's adapter set
/// when missing and checks the base tensors are untouched afterwards.
pub fn fine_tune_examples(
    model: &mut ModelParameters,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    let name = cfg
        .task
        .adapter()
        .ok_or_else(|| Error::invalid("fine-tuning needs a reasoning or retrieval task"))?;
    cfg.validate()?;
    if !model.has_adapter(name) {
        model.add_adapter_set(name)?;
    }
    model.set_active_adapter(Some(name))?;
    model.set_trainable(cfg.policy())?;
    let base = model.base_tensor_hash();
    let report = train_examples(model, train, val, cfg)?;
    if model.base_tensor_hash() != base {
        return Err(Error::invalid(
            "base tensors changed during adapter fine-tuning",
        ));
    }
    Ok(report)
}

/// Reasoning-adapter fine-tuning on a record set.
pub fn fine_tune(
    model: &mut ModelParameters,
    vocab: &Vocabulary,
    records: &[QaRecord],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    if cfg.task != Task::FinetuneReason {
        return Err(Error::invalid(
            "fine_tune over records needs the finetune_reason task",
        ));
    }
    let (train, val) = split_examples(vocab, model, records)?;
    fine_tune_examples(model, &train, &val, cfg)
}
