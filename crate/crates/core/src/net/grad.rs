use ndarray::{s, Array2, ArrayView2};

use super::loss::{
    masked_mse, masked_mse_grad, shrinkage, shrinkage_grad, LossWeights, MaskSpec, ShrinkageParams,
};
use super::model::{
    encode, encode_backward, head_backward, head_forward, mean_pool, mean_pool_backward,
    stack_tokens,
};
use super::params::{GradientBundle, ModelParams};
use crate::error::{OttaError, Result};

/// One training example: normalized tokens, an optional normalized
/// `[sbp, dbp]` label, and the mask for the reconstruction pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub tokens: ArrayView2<'a, f64>,
    pub label: Option<[f64; 2]>,
    pub mask: &'a MaskSpec,
}

/// Which loss terms contribute to the batch objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Masked reconstruction on every item.
    Reconstruction,
    /// Shrinkage loss on every item; all items must be labeled.
    Prediction,
    /// Masked reconstruction on every item, plus `lambda_pred` times the
    /// shrinkage loss on labeled items.
    Combined(LossWeights),
}

/// Exact gradient of the batch loss, the mean over items of the per-item
/// objective.
pub fn backward(
    params: &ModelParams,
    batch: &[TrainItem<'_>],
    w: &LossWeights,
    sp: &ShrinkageParams,
) -> Result<(GradientBundle, f64)> {
    gradients(params, batch, Objective::Combined(*w), sp)
}

pub fn gradients(
    params: &ModelParams,
    batch: &[TrainItem<'_>],
    objective: Objective,
    sp: &ShrinkageParams,
) -> Result<(GradientBundle, f64)> {
    if batch.is_empty() {
        return Err(OttaError::Contract(
            "backward needs a nonempty batch".into(),
        ));
    }
    let g = params.geometry;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut grad = params.zeros_like();
    let mut per_item = vec![0.0; n];

    let (use_recon, pred_weight) = match objective {
        Objective::Reconstruction => (true, 0.0),
        Objective::Prediction => (false, 1.0),
        Objective::Combined(w) => (true, w.lambda_pred),
    };

    if use_recon {
        if let Some(i) = batch.iter().position(|it| it.mask.is_empty()) {
            return Err(OttaError::Contract(format!(
                "batch item {i} has an empty mask"
            )));
        }
        let x = stack_tokens(batch.iter().map(|it| it.tokens), g.n_tokens, g.token_len)?;
        let masks: Vec<&MaskSpec> = batch.iter().map(|it| it.mask).collect();
        let enc = encode(params, x, Some(&masks))?;
        let dec = head_forward(&params.decoder, enc.out.clone());
        let mut d_recon = Array2::zeros(dec.out.dim());
        for (i, it) in batch.iter().enumerate() {
            let rows = s![i * g.n_tokens..(i + 1) * g.n_tokens, ..];
            let r = dec.out.slice(rows);
            per_item[i] += masked_mse(r, it.tokens, it.mask)?;
            d_recon
                .slice_mut(rows)
                .assign(&masked_mse_grad(r, it.tokens, it.mask, inv_n));
        }
        let d_enc = head_backward(&params.decoder, &dec, &d_recon, &mut grad.decoder);
        encode_backward(params, &enc, d_enc, &mut grad);
    }

    if matches!(objective, Objective::Prediction) {
        if let Some(i) = batch.iter().position(|it| it.label.is_none()) {
            return Err(OttaError::Contract(format!(
                "prediction objective needs labels, item {i} has none"
            )));
        }
    }
    let labeled: Vec<usize> = (0..n).filter(|&i| batch[i].label.is_some()).collect();
    if pred_weight != 0.0 && !labeled.is_empty() {
        let x = stack_tokens(
            labeled.iter().map(|&i| batch[i].tokens),
            g.n_tokens,
            g.token_len,
        )?;
        let enc = encode(params, x, None)?;
        let reg = head_forward(&params.regressor, mean_pool(&enc.out, g.n_tokens));
        let mut d_y = Array2::zeros(reg.out.dim());
        for (row, &i) in labeled.iter().enumerate() {
            let pred = [reg.out[[row, 0]], reg.out[[row, 1]]];
            let target = batch[i].label.expect("filtered");
            per_item[i] += pred_weight * shrinkage(pred, target, sp);
            let gy = shrinkage_grad(pred, target, sp);
            d_y[[row, 0]] = pred_weight * inv_n * gy[0];
            d_y[[row, 1]] = pred_weight * inv_n * gy[1];
        }
        let d_pooled = head_backward(&params.regressor, &reg, &d_y, &mut grad.regressor);
        encode_backward(
            params,
            &enc,
            mean_pool_backward(&d_pooled, g.n_tokens),
            &mut grad,
        );
    }

    if let Some(item) = per_item.iter().position(|l| !l.is_finite()) {
        return Err(OttaError::NumericFailure { item });
    }
    let grad = GradientBundle(grad);
    if !grad.params().all_finite() {
        return Err(OttaError::NumericFailure { item: 0 });
    }
    Ok((grad, per_item.iter().sum::<f64>() * inv_n))
}

/// Batch loss without gradients; same definition as [`gradients`].
pub fn batch_loss(
    params: &ModelParams,
    batch: &[TrainItem<'_>],
    objective: Objective,
    sp: &ShrinkageParams,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(OttaError::Contract("loss needs a nonempty batch".into()));
    }
    let mut total = 0.0;
    for it in batch {
        let recon = match objective {
            Objective::Prediction => 0.0,
            _ => {
                let r = super::model::forward_recon(params, it.tokens, it.mask)?;
                masked_mse(r.view(), it.tokens, it.mask)?
            }
        };
        let pred = match (objective, it.label) {
            (Objective::Reconstruction, _) | (Objective::Combined(_), None) => 0.0,
            (Objective::Prediction, None) => {
                return Err(OttaError::Contract(
                    "prediction objective needs labels".into(),
                ))
            }
            (Objective::Prediction, Some(t)) => {
                shrinkage(super::model::forward_predict(params, it.tokens)?, t, sp)
            }
            (Objective::Combined(w), Some(t)) => {
                w.lambda_pred * shrinkage(super::model::forward_predict(params, it.tokens)?, t, sp)
            }
        };
        total += recon + pred;
    }
    Ok(total / batch.len() as f64)
}
