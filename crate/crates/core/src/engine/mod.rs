//! Per-subject online adaptation.
//!
//! A run copies the pretrained parameters, optionally fine-tunes them on the
//! subject's initial labeled pool, then walks the target stream one event at
//! a time through the configured [`AdaptStrategy`].

mod log;
mod strategy;

pub use log::{PredictionLog, PredictionRecord};
pub use strategy::{AdaptStrategy, DualQueue, Frozen, StrategyRegistry};

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{BatchComposition, BufferCapacity, DualQueueBuffer, Entry, Slot};
use crate::error::{OttaError, Result};
use crate::net::{
    backward, forward_predict, sgd_step_in_place, LossWeights, MaskSpec, ModelParams,
    ShrinkageParams, TrainItem,
};
use crate::seed::derive_seed;
use crate::signal::{
    tokenize_values, BpLabel, NormStats, SignalSegment, StreamEvent, SubjectStream,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Registered strategy name.
    pub strategy: String,
    /// Label every `F`-th event (1-based); `None` means no stream labels.
    pub injection_frequency: Option<usize>,
    /// Size `N0` of the initial labeled pool used for fine-tuning.
    pub init_labels: usize,
    /// Gradient updates `K` per incoming event.
    pub reps_per_batch: usize,
    /// Draw a fresh batch for each of the `K` updates; otherwise one batch
    /// per event is reused `K` times.
    pub resample_per_rep: bool,
    pub lr_test: f64,
    pub composition: BatchComposition,
    pub capacity: BufferCapacity,
    pub mask_ratio: f64,
    pub loss_weights: LossWeights,
    pub shrinkage: ShrinkageParams,
    /// Passes over the initial pool before the stream starts.
    pub init_finetune_epochs: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            strategy: "dual-queue".into(),
            injection_frequency: Some(10),
            init_labels: 0,
            reps_per_batch: 10,
            resample_per_rep: true,
            lr_test: 1e-3,
            composition: BatchComposition::default(),
            capacity: BufferCapacity::default(),
            mask_ratio: 0.5,
            loss_weights: LossWeights::default(),
            shrinkage: ShrinkageParams::default(),
            init_finetune_epochs: 20,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        let bad = |field: &str, why: String| Err(OttaError::Config(format!("{field}: {why}")));
        if self.injection_frequency == Some(0) {
            return bad("injection_frequency", "must be positive or null".into());
        }
        if self.reps_per_batch == 0 {
            return bad("reps_per_batch", "must be at least 1".into());
        }
        if !(self.lr_test.is_finite() && self.lr_test >= 0.0) {
            return bad(
                "lr_test",
                format!("must be finite and >= 0, got {}", self.lr_test),
            );
        }
        if let Err(e) = self.composition.validate() {
            return bad("composition", e.to_string());
        }
        if let Err(e) = self.capacity.validate() {
            return bad("capacity", e.to_string());
        }
        let masked = (self.mask_ratio * n_tokens as f64).round();
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) || masked < 1.0 {
            return bad(
                "mask_ratio",
                format!(
                    "must mask at least one of {n_tokens} tokens, got {}",
                    self.mask_ratio
                ),
            );
        }
        if !self.loss_weights.lambda_pred.is_finite() || self.loss_weights.lambda_pred < 0.0 {
            return bad("loss_weights.lambda_pred", "must be finite and >= 0".into());
        }
        if let Err(e) = self.shrinkage.validate() {
            return bad("shrinkage", e.to_string());
        }
        Ok(())
    }
}

/// 1-based stream positions that receive a label: every multiple of `F` up
/// to `T`. `None` yields the empty set.
pub fn label_schedule(stream_len: usize, frequency: Option<usize>) -> Result<BTreeSet<usize>> {
    match frequency {
        None => Ok(BTreeSet::new()),
        Some(0) => Err(OttaError::Config(
            "injection_frequency: must be positive or null".into(),
        )),
        Some(f) => Ok((f..=stream_len).step_by(f).collect()),
    }
}

/// Normalized token matrix with an optional normalized `[sbp, dbp]` label.
pub type Sample = (Array2<f64>, [f64; 2]);

/// Mutable per-subject adaptation state.
pub struct AdaptState {
    pub params: ModelParams,
    pub buffer: DualQueueBuffer<Array2<f64>, Sample>,
    pub rng: ChaCha8Rng,
    pub events_seen: usize,
    /// SGD updates applied so far, initial fine-tuning excluded.
    pub updates: usize,
}

/// Read-only inputs shared by every step of one run.
pub struct StepContext<'a> {
    pub cfg: &'a AdaptConfig,
    pub norm: &'a NormStats,
}

impl StepContext<'_> {
    pub fn tokens(&self, segment: &SignalSegment, params: &ModelParams) -> Result<Array2<f64>> {
        let g = params.geometry;
        if segment.len() != g.segment_len() {
            return Err(OttaError::Contract(format!(
                "segment length {} does not match model geometry {}",
                segment.len(),
                g.segment_len()
            )));
        }
        tokenize_values(&self.norm.normalize_signal(&segment.values), g.token_len)
    }

    fn record(
        &self,
        params: &ModelParams,
        tokens: &Array2<f64>,
        event: &StreamEvent,
    ) -> Result<PredictionRecord> {
        let z = forward_predict(params, tokens.view())?;
        let (sbp, dbp) = self.norm.denormalize_label(z);
        if !(sbp.is_finite() && dbp.is_finite()) {
            return Err(OttaError::NumericFailure { item: 0 });
        }
        Ok(PredictionRecord {
            index: event.segment.index,
            pred_sbp: sbp,
            pred_dbp: dbp,
            true_sbp: event.truth.map(|t| t.sbp()),
            true_dbp: event.truth.map(|t| t.dbp()),
        })
    }
}

/// Combined-loss SGD on the first `N0` entries of the initial pool, with
/// batches of `min(batch, N0)` and fresh masks on every pass. Returns the
/// mean batch loss of each pass.
pub fn initial_finetune(
    params: &mut ModelParams,
    pool: &[(SignalSegment, BpLabel)],
    ctx: &StepContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let cfg = ctx.cfg;
    let n0 = cfg.init_labels;
    if n0 == 0 || cfg.init_finetune_epochs == 0 {
        return Ok(Vec::new());
    }
    if pool.len() < n0 {
        return Err(OttaError::InsufficientData(format!(
            "initial pool holds {} labeled samples, {n0} requested",
            pool.len()
        )));
    }
    let samples = pool[..n0]
        .iter()
        .map(|(seg, label)| Ok((ctx.tokens(seg, params)?, ctx.norm.normalize_label(label))))
        .collect::<Result<Vec<Sample>>>()?;
    let batch = cfg.composition.total().min(n0);
    let s = params.geometry.n_tokens;
    let mut order: Vec<usize> = (0..n0).collect();
    let mut losses = Vec::with_capacity(cfg.init_finetune_epochs);
    for _ in 0..cfg.init_finetune_epochs {
        order.shuffle(rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let masks = chunk
                .iter()
                .map(|_| MaskSpec::random(cfg.mask_ratio, s, rng))
                .collect::<Result<Vec<_>>>()?;
            let items: Vec<TrainItem> = chunk
                .iter()
                .zip(&masks)
                .map(|(&i, mask)| TrainItem {
                    tokens: samples[i].0.view(),
                    label: Some(samples[i].1),
                    mask,
                })
                .collect();
            let (grad, loss) = backward(params, &items, &cfg.loss_weights, &cfg.shrinkage)?;
            sgd_step_in_place(params, &grad, cfg.lr_test)?;
            sum += loss;
            count += 1;
        }
        losses.push(sum / count as f64);
    }
    Ok(losses)
}

/// One online step of the dual-queue adapter: push the event, run `K`
/// updates on batches from the buffer, then predict (unlabeled events only)
/// with the updated parameters. Masks are redrawn for every update.
pub fn otta_step(
    state: &mut AdaptState,
    event: &StreamEvent,
    ctx: &StepContext<'_>,
) -> Result<Option<PredictionRecord>> {
    let cfg = ctx.cfg;
    let tokens = ctx.tokens(&event.segment, &state.params)?;
    match event.label {
        Some(label) => state.buffer.push(Entry::Labeled((
            tokens.clone(),
            ctx.norm.normalize_label(&label),
        ))),
        None => state.buffer.push(Entry::Unlabeled(tokens.clone())),
    }
    state.events_seen += 1;

    let s = state.params.geometry.n_tokens;
    let AdaptState {
        params,
        buffer,
        rng,
        ..
    } = state;
    let mut picks = None;
    for _ in 0..cfg.reps_per_batch {
        if cfg.resample_per_rep || picks.is_none() {
            picks = Some(buffer.sample_batch(&cfg.composition, rng)?);
        }
        let batch = picks.as_ref().expect("drawn above");
        let masks = batch
            .iter()
            .map(|_| MaskSpec::random(cfg.mask_ratio, s, rng))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<TrainItem> = batch
            .iter()
            .zip(&masks)
            .map(|(slot, mask)| match slot {
                Slot::Unlabeled(t) => TrainItem {
                    tokens: t.view(),
                    label: None,
                    mask,
                },
                Slot::Labeled((t, y)) => TrainItem {
                    tokens: t.view(),
                    label: Some(*y),
                    mask,
                },
            })
            .collect();
        let (grad, _) = backward(params, &items, &cfg.loss_weights, &cfg.shrinkage)?;
        sgd_step_in_place(params, &grad, cfg.lr_test)?;
        state.updates += 1;
    }
    if !state.params.all_finite() {
        return Err(OttaError::NumericFailure { item: 0 });
    }

    if event.is_labeled() {
        return Ok(None);
    }
    ctx.record(&state.params, &tokens, event).map(Some)
}

/// Runs one subject from a copy of `pretrained`. The stream's visible labels
/// must already follow the intended schedule.
///
/// The random stream is derived from `(cfg.seed, subject_id)`, so results do
/// not depend on which other subjects run or in what order.
pub fn run_subject(
    pretrained: &ModelParams,
    stream: &SubjectStream,
    cfg: &AdaptConfig,
    norm: &NormStats,
    registry: &StrategyRegistry,
) -> Result<PredictionLog> {
    let fail = |event: usize, e: OttaError| match e {
        e @ OttaError::Config(_) => e,
        e => OttaError::AdaptationFailure {
            subject: stream.subject_id.clone(),
            event,
            reason: e.to_string(),
        },
    };
    cfg.validate(pretrained.geometry.n_tokens)?;
    let strategy = registry.get(&cfg.strategy)?;
    let ctx = StepContext { cfg, norm };
    let mut state = AdaptState {
        params: pretrained.clone(),
        buffer: DualQueueBuffer::new(cfg.capacity)?,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &stream.subject_id)),
        events_seen: 0,
        updates: 0,
    };
    strategy
        .prepare(&mut state, stream, &ctx)
        .map_err(|e| fail(0, e))?;

    let mut log = PredictionLog::new(&stream.subject_id);
    for event in &stream.events {
        if event.is_labeled() {
            log.labeled_indices.push(event.segment.index);
        }
        if let Some(rec) = strategy
            .observe(&mut state, event, &ctx)
            .map_err(|e| fail(event.segment.index, e))?
        {
            log.records.push(rec);
        }
    }
    Ok(log)
}
