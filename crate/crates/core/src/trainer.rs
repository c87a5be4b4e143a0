//! Training loops: base pretraining, prompt-tuning and the two fine-tuning
//! baselines, sharing one epoch driver.
//!
//! Batches are not padded. Each packed sequence gets its own tape, its mean
//! masked loss is weighted by its share of the batch's masked targets, and the
//! gradients are summed before a single clipped Adam step.

use alloc::borrow::Cow;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DialoguePair;
use crate::error::{Error, Result};
use crate::model::{DecoderLM, ModelConfig, ModelVars};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::prompt::{prepend, PersonaPrompt};
use crate::real::Real;
use crate::rng::{seeded, Stream};
use crate::tape::{Tape, Var};
use crate::tokenizer::{Vocab, BOS, EOS, PAD, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    PromptTune,
    FineTuneNone,
    FineTuneAdded,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [Self::Pretrain, Self::PromptTune, Self::FineTuneNone, Self::FineTuneAdded];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::PromptTune => "prompt_tune",
            Self::FineTuneNone => "fine_tune_none",
            Self::FineTuneAdded => "fine_tune_added",
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Self::Pretrain | Self::PromptTune => 1e-3,
            Self::FineTuneNone | Self::FineTuneAdded => 5e-5,
        }
    }
}

impl core::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Defaults per mode when unset.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub convergence_rel_tol: f64,
    pub convergence_patience: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub grad_clip: f64,
    /// Stop as soon as an epoch's mean loss drops below this.
    pub target_loss: Option<f64>,
    /// Predictions per pretraining window, capped at and defaulting to the
    /// model's `max_seq − 1`.
    pub pretrain_window: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::PromptTune,
            learning_rate: None,
            batch_size: 8,
            max_epochs: 50,
            convergence_rel_tol: 1e-3,
            convergence_patience: 3,
            seed: 0,
            max_new_tokens: 60,
            grad_clip: 1.0,
            target_loss: None,
            pretrain_window: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for `mode`. Pretraining windows are long, so its batches
    /// hold fewer of them and the base gets more updates per epoch.
    pub fn for_mode(mode: TrainMode) -> Self {
        let batch_size = if mode == TrainMode::Pretrain { 2 } else { Self::default().batch_size };
        Self { mode, batch_size, ..Self::default() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| self.mode.default_learning_rate())
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
        }
        if self.convergence_patience == 0 {
            return Err(Error::Config("convergence_patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.pretrain_window.is_some_and(|w| w == 0) {
            return Err(Error::Config("pretrain_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epoch_losses: Vec<f64>,
    pub stop_reason: StopReason,
    pub steps: u64,
    pub trainable_parameters: usize,
    pub learning_rate: f64,
    /// Filled in by callers that can read a clock.
    pub wall_time_secs: Option<f64>,
    pub checkpoint: Option<String>,
}

/// A token sequence with next-token targets. `targets[t]` is the label for
/// the prediction made at input position `t`; only masked-in positions count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Packed {
    /// Every position but the last predicts the next token.
    pub fn language_model(ids: Vec<usize>) -> Self {
        let n = ids.len();
        let mut targets: Vec<usize> = ids.iter().skip(1).copied().collect();
        targets.push(PAD);
        let mut loss_mask = vec![true; n];
        if let Some(last) = loss_mask.last_mut() {
            *last = false;
        }
        Self { ids, targets, loss_mask }
    }

    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// `[BOS, persona tokens?, utterance tokens, SEP]`
pub fn prefix_ids(vocab: &Vocab, utterance: &str, persona_sentences: Option<&[String]>) -> Vec<usize> {
    let mut ids = vec![BOS];
    if let Some(s) = persona_sentences {
        ids.extend(vocab.encode(&s.join(" ")));
    }
    ids.extend(vocab.encode(utterance));
    ids.push(SEP);
    ids
}

fn describe(pair: &DialoguePair) -> String {
    format!("pair {:?} -> {:?}", pair.utterance, pair.response)
}

/// Packs `[BOS, (persona)?, utterance, SEP, response, EOS]`. The mask is true
/// exactly at the positions whose target is a response token or EOS.
/// Persona tokens are inserted only for `FineTuneAdded`.
pub fn pack_example(
    pair: &DialoguePair,
    vocab: &Vocab,
    mode: TrainMode,
    persona_sentences: &[String],
    prompt_len: usize,
    max_seq: usize,
) -> Result<Packed> {
    let u = vocab.encode(&pair.utterance);
    let r = vocab.encode(&pair.response);
    if u.is_empty() || r.is_empty() {
        return Err(Error::InvalidRecord {
            record_id: describe(pair),
            reason: "utterance and response must each have a token".into(),
        });
    }
    let persona = (mode == TrainMode::FineTuneAdded).then_some(persona_sentences);
    let mut ids = prefix_ids(vocab, &pair.utterance, persona);
    let first_target = ids.len();
    ids.extend(r);
    ids.push(EOS);
    if ids.len() + prompt_len > max_seq {
        return Err(Error::SequenceLength {
            len: ids.len() + prompt_len,
            max: max_seq,
            context: Some(describe(pair)),
        });
    }
    let n = ids.len();
    let mut packed = Packed::language_model(ids);
    for (t, m) in packed.loss_mask.iter_mut().enumerate() {
        *m = t + 1 >= first_target && t + 1 < n;
    }
    Ok(packed)
}

/// Packs every pair, failing on the first that does not fit.
pub fn pack_all(
    pairs: &[DialoguePair],
    vocab: &Vocab,
    mode: TrainMode,
    persona_sentences: &[String],
    prompt_len: usize,
    max_seq: usize,
) -> Result<Vec<Packed>> {
    pairs
        .iter()
        .map(|p| pack_example(p, vocab, mode, persona_sentences, prompt_len, max_seq))
        .collect()
}

/// Mean masked loss of one packed sequence. Only the masked-in rows are
/// projected to the vocabulary, which gives the same value as projecting every
/// row and masking afterwards.
pub fn example_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &DecoderLM<T>,
    vars: &ModelVars,
    prompt: Option<Var>,
    example: &Packed,
) -> Result<Var> {
    let n = example.ids.len();
    if example.targets.len() != n || example.loss_mask.len() != n {
        return Err(Error::dims("example_loss", &[n], &[example.targets.len(), example.loss_mask.len()]));
    }
    let mut x = model.embed_tokens(tape, vars, &example.ids)?;
    let offset = match prompt {
        Some(p) => {
            x = prepend(tape, p, x, model.config.max_seq)?;
            tape.shape(p).0
        }
        None => 0,
    };
    let hidden = model.hidden_states(tape, vars, x)?;
    let rows: Vec<usize> = (0..n).filter(|&t| example.loss_mask[t]).map(|t| t + offset).collect();
    if rows.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let targets: Vec<usize> = (0..n).filter(|&t| example.loss_mask[t]).map(|t| example.targets[t]).collect();
    let picked = tape.select_rows(hidden, &rows)?;
    let logits = model.project(tape, vars, picked)?;
    let all = vec![true; rows.len()];
    tape.masked_cross_entropy(logits, &targets, &all)
}

/// Mean masked per-token loss over `examples`, with no parameter updates.
pub fn mean_loss<T: Real>(model: &DecoderLM<T>, prompt: Option<&PersonaPrompt<T>>, examples: &[Packed]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape)?;
        let pv = prompt.map(|p| p.bind(&mut tape)).transpose()?;
        let loss = example_loss(&mut tape, model, &vars, pv, ex)?;
        let c = ex.target_count();
        sum += tape.scalar(loss)?.to_f64() * c as f64;
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(sum / count as f64)
}

/// Turns corpus lines into documents: `u<TAB>r` lines become
/// `[BOS, u, SEP, r, EOS]`, `c<TAB>u<TAB>r` lines put the context `c` in
/// front of BOS (where a soft prompt sits), and other lines become
/// `[BOS, text, EOS]`. Blank lines are skipped.
pub fn pretrain_documents<S: AsRef<str>>(lines: &[S], vocab: &Vocab) -> Vec<Vec<usize>> {
    lines
        .iter()
        .filter_map(|line| {
            let fields: Vec<&str> = line.as_ref().splitn(3, '\t').collect();
            let mut ids = Vec::new();
            let body = match fields.as_slice() {
                [c, u, r] => {
                    ids.extend(vocab.encode(c));
                    Some((*u, *r))
                }
                [u, r] => Some((*u, *r)),
                _ => None,
            };
            let start = ids.len();
            ids.push(BOS);
            match body {
                Some((u, r)) => {
                    ids.extend(vocab.encode(u));
                    ids.push(SEP);
                    ids.extend(vocab.encode(r));
                }
                None => ids.extend(vocab.encode(fields[0])),
            }
            if ids.len() == start + 1 {
                return None;
            }
            ids.push(EOS);
            Some(ids)
        })
        .collect()
}

enum EpochSource<'a> {
    Fixed(&'a [Packed]),
    /// One token stream cut into windows of `window` inputs, starting at a
    /// seeded offset each epoch.
    Windows { stream: Vec<usize>, window: usize },
}

impl EpochSource<'_> {
    fn examples(&self, epoch: usize, seed: u64) -> Cow<'_, [Packed]> {
        match self {
            Self::Fixed(ex) => Cow::Borrowed(ex),
            Self::Windows { stream, window } => {
                let (n, w) = (stream.len(), *window);
                let offset = if n > w + 1 {
                    seeded(seed.wrapping_add(epoch as u64), Stream::PretrainOffset).random_range(0..w)
                } else {
                    0
                };
                let mut out = Vec::new();
                let mut start = offset;
                while start + 1 < n {
                    let end = (start + w + 1).min(n);
                    out.push(Packed::language_model(stream[start..end].to_vec()));
                    start += w;
                }
                Cow::Owned(out)
            }
        }
    }
}

/// Drives epochs: seeded order, batching, loss bookkeeping and stopping.
/// `step` consumes one batch and returns the sum of per-token losses and the
/// number of masked-in targets it covered.
fn run_epochs<F>(
    config: &TrainConfig,
    source: &EpochSource<'_>,
    trainable: usize,
    mut step: F,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport>
where
    F: FnMut(&[&Packed]) -> Result<(f64, usize)>,
{
    config.validate()?;
    let mut report = TrainReport {
        mode: config.mode,
        epoch_losses: Vec::new(),
        stop_reason: StopReason::MaxEpochs,
        steps: 0,
        trainable_parameters: trainable,
        learning_rate: config.learning_rate(),
        wall_time_secs: None,
        checkpoint: None,
    };
    let mut streak = 0usize;
    for epoch in 0..config.max_epochs {
        let examples = source.examples(epoch, config.seed);
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seeded(config.seed.wrapping_add(epoch as u64), Stream::EpochOrder));
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Packed> = chunk.iter().map(|&i| &examples[i]).collect();
            let (s, c) = step(&batch).map_err(|e| match e {
                Error::TrainingFailure { reason, .. } => Error::TrainingFailure { epoch: epoch + 1, reason },
                other => other,
            })?;
            sum += s;
            count += c;
            report.steps += 1;
        }
        let loss = sum / count as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure { epoch: epoch + 1, reason: format!("epoch loss is {loss}") });
        }
        if let Some(&prev) = report.epoch_losses.last() {
            let improvement = (prev - loss) / prev;
            streak = if improvement < config.convergence_rel_tol { streak + 1 } else { 0 };
        }
        report.epoch_losses.push(loss);
        on_epoch(epoch + 1, loss);
        if config.target_loss.is_some_and(|t| loss < t) {
            report.stop_reason = StopReason::TargetReached;
            break;
        }
        if streak >= config.convergence_patience {
            report.stop_reason = StopReason::Converged;
            break;
        }
    }
    Ok(report)
}

fn batch_total(batch: &[&Packed]) -> Result<usize> {
    let total: usize = batch.iter().map(|p| p.target_count()).sum();
    if total == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total)
}

fn check_finite(value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingFailure { epoch: 0, reason: format!("loss is {value}") })
    }
}

/// Optimizer state for prompt-tuning, usable one batch at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTuner<T> {
    pub adam: AdamState<T>,
    pub learning_rate: f64,
    pub grad_clip: f64,
}

impl<T: Real> PromptTuner<T> {
    /// Checks that `base` is frozen and matches `prompt`'s width.
    pub fn new(base: &DecoderLM<T>, prompt: &PersonaPrompt<T>, config: &TrainConfig) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::State("prompt-tuning needs a frozen base model".into()));
        }
        if prompt.d_model() != base.config.d_model {
            return Err(Error::dims(
                "prompt_tune",
                prompt.matrix().shape(),
                &[prompt.length(), base.config.d_model],
            ));
        }
        Ok(Self {
            adam: AdamState::for_param(prompt.matrix()),
            learning_rate: config.learning_rate(),
            grad_clip: config.grad_clip,
        })
    }

    /// One clipped Adam step on `prompt`. Returns the summed per-token loss
    /// and the number of targets.
    pub fn step(&mut self, base: &DecoderLM<T>, prompt: &mut PersonaPrompt<T>, batch: &[&Packed]) -> Result<(f64, usize)> {
        let total = batch_total(batch)?;
        let mut sum = 0.0;
        for ex in batch {
            let (value, grad) = {
                let mut tape = Tape::new();
                let vars = base.bind(&mut tape)?;
                let pv = prompt.bind(&mut tape)?;
                let loss = example_loss(&mut tape, base, &vars, Some(pv), ex)?;
                let scaled = tape.scale(loss, T::from_f64(ex.target_count() as f64 / total as f64))?;
                let value = tape.scalar(loss)?.to_f64();
                check_finite(value)?;
                let mut grads = tape.backward(scaled)?;
                (value, grads.take(pv))
            };
            sum += value * ex.target_count() as f64;
            if let Some(g) = grad {
                prompt.matrix_mut().accumulate_grad(&g)?;
            }
        }
        clip_grad_norm(&mut [prompt.matrix_mut()], self.grad_clip);
        adam_step(prompt.matrix_mut(), &mut self.adam, self.learning_rate)?;
        Ok((sum, total))
    }
}

/// Trains only `prompt`'s matrix in front of a frozen `base`.
pub fn prompt_tune<T: Real>(
    base: &DecoderLM<T>,
    prompt: &mut PersonaPrompt<T>,
    examples: &[Packed],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let mut tuner = PromptTuner::new(base, prompt, config)?;
    let trainable = prompt.trainable_parameter_count();
    let step = |batch: &[&Packed]| tuner.step(base, prompt, batch);
    run_epochs(config, &EpochSource::Fixed(examples), trainable, step, &mut on_epoch)
}

/// One clipped Adam step over every trainable model parameter, from batch
/// gradients accumulated per example.
fn model_step<T: Real>(
    model: &mut DecoderLM<T>,
    adam: &mut [AdamState<T>],
    batch: &[&Packed],
    config: &TrainConfig,
) -> Result<(f64, usize)> {
    let total = batch_total(batch)?;
    let mut sum = 0.0;
    for ex in batch {
        let (value, vars, grads) = {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape)?;
            let loss = example_loss(&mut tape, model, &vars, None, ex)?;
            let scaled = tape.scale(loss, T::from_f64(ex.target_count() as f64 / total as f64))?;
            let value = tape.scalar(loss)?.to_f64();
            check_finite(value)?;
            let grads = tape.backward(scaled)?;
            (value, vars, grads)
        };
        sum += value * ex.target_count() as f64;
        model.accumulate_grads(&vars, &grads)?;
    }
    let mut params = model.parameters_mut();
    clip_grad_norm(&mut params, config.grad_clip);
    let lr = config.learning_rate();
    for (p, state) in params.into_iter().zip(adam.iter_mut()) {
        if p.trainable() {
            adam_step(p, state, lr)?;
        }
    }
    Ok((sum, total))
}

/// Updates every parameter of `model` on response-masked examples.
pub fn fine_tune<T: Real>(
    model: &mut DecoderLM<T>,
    examples: &[Packed],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if !matches!(config.mode, TrainMode::FineTuneNone | TrainMode::FineTuneAdded) {
        return Err(Error::Config(format!("fine_tune called with mode {}", config.mode.as_str())));
    }
    model.unfreeze();
    train_model(model, &EpochSource::Fixed(examples), config, &mut on_epoch)
}

fn train_model<T: Real>(
    model: &mut DecoderLM<T>,
    source: &EpochSource<'_>,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    let mut adam: Vec<AdamState<T>> = model.parameters().iter().map(|p| AdamState::for_param(p)).collect();
    let trainable = model.trainable_parameter_count();
    run_epochs(config, source, trainable, |batch| model_step(model, &mut adam, batch, config), on_epoch)
}

/// Trains a freshly initialized model as a plain next-token language model
/// over the concatenation of `documents`. The result is left unfrozen.
pub fn pretrain_base<T: Real>(
    documents: &[Vec<usize>],
    model_config: ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(DecoderLM<T>, TrainReport)> {
    if config.mode != TrainMode::Pretrain {
        return Err(Error::Config(format!("pretrain_base called with mode {}", config.mode.as_str())));
    }
    let stream: Vec<usize> = documents.iter().flatten().copied().collect();
    if stream.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    if let Some(&bad) = stream.iter().find(|&&id| id >= model_config.vocab_size) {
        return Err(Error::Index { what: "token", index: bad, bound: model_config.vocab_size });
    }
    let mut model = DecoderLM::new(model_config, config.seed)?;
    // A window of `w` predictions spans `w + 1` input positions.
    let cap = model_config.max_seq.saturating_sub(1).max(1);
    let window = config.pretrain_window.unwrap_or(cap).min(cap);
    let report = train_model(&mut model, &EpochSource::Windows { stream, window }, config, &mut on_epoch)?;
    Ok((model, report))
}
