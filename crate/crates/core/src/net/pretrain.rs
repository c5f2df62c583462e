use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::{gradients, Objective, TrainItem};
use super::loss::{MaskSpec, ShrinkageParams};
use super::params::{sgd_step_in_place, ModelParams};
use crate::error::{OttaError, Result};
use crate::signal::{tokenize_values, NormStats, SubjectStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_ssl: f64,
    pub lr_sl: f64,
    pub mask_ratio: f64,
    pub shrinkage: ShrinkageParams,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_ssl: 1e-2,
            lr_sl: 1e-2,
            mask_ratio: 0.5,
            shrinkage: ShrinkageParams::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(OttaError::Config("batch_size: must be positive".into()));
        }
        for (name, lr) in [("lr_ssl", self.lr_ssl), ("lr_sl", self.lr_sl)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(OttaError::Config(format!(
                    "{name}: must be finite and nonnegative"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(OttaError::Config("mask_ratio: must lie in [0, 1]".into()));
        }
        self.shrinkage.validate()
    }
}

/// Mean per-batch losses for each epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub recon_loss: Vec<f64>,
    pub pred_loss: Vec<f64>,
}

/// Sequential two-step training on labeled source data: every batch first
/// takes an SGD step on masked reconstruction at `lr_ssl`, then a step on the
/// shrinkage prediction loss at `lr_sl`.
pub fn pretrain(
    params: &ModelParams,
    source: &[SubjectStream],
    norm: &NormStats,
    cfg: &PretrainConfig,
) -> Result<(ModelParams, PretrainReport)> {
    cfg.validate()?;
    let g = params.geometry;
    let mut samples: Vec<(Array2<f64>, [f64; 2])> = Vec::new();
    for stream in source {
        if let Some(ev) = stream.events.iter().find(|e| e.label.is_none()) {
            return Err(OttaError::Contract(format!(
                "source subject {} event {} is unlabeled",
                stream.subject_id, ev.segment.index
            )));
        }
        for (seg, label) in stream.labeled_pairs() {
            if seg.len() != g.segment_len() {
                return Err(OttaError::Config(format!(
                    "segment length {} does not match model geometry {}",
                    seg.len(),
                    g.segment_len()
                )));
            }
            let tokens = tokenize_values(&norm.normalize_signal(&seg.values), g.token_len)?;
            samples.push((tokens, norm.normalize_label(&label)));
        }
    }

    let mut params = params.clone();
    let mut report = PretrainReport::default();
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    if samples.is_empty() {
        return Err(OttaError::InsufficientData(
            "no labeled source samples".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut recon_sum, mut pred_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let masks = chunk
                .iter()
                .map(|_| MaskSpec::random(cfg.mask_ratio, g.n_tokens, &mut rng))
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
            let fail = |e: OttaError| OttaError::TrainingFailure {
                epoch,
                batch: bi,
                reason: e.to_string(),
            };

            let (grad, recon) =
                gradients(&params, &items, Objective::Reconstruction, &cfg.shrinkage)
                    .map_err(fail)?;
            sgd_step_in_place(&mut params, &grad, cfg.lr_ssl).map_err(fail)?;
            let (grad, pred) =
                gradients(&params, &items, Objective::Prediction, &cfg.shrinkage).map_err(fail)?;
            sgd_step_in_place(&mut params, &grad, cfg.lr_sl).map_err(fail)?;
            if !params.all_finite() {
                return Err(fail(OttaError::NumericFailure { item: 0 }));
            }
            recon_sum += recon;
            pred_sum += pred;
            batches += 1;
        }
        report.recon_loss.push(recon_sum / batches as f64);
        report.pred_loss.push(pred_sum / batches as f64);
    }
    Ok((params, report))
}
