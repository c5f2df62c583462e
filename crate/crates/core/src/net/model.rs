//! Forward and reverse passes of the dual-head network.
//!
//! Items are processed as a stack: `N` token matrices of shape `S x d` become
//! one `(N*S) x d` matrix so every position-wise layer is a single matmul.
//! Attention and pooling work on the `S`-row block of each item.
//!
//! Encoder block (pre-norm):
//!
//! ```text
//! A  = LN1(H)
//! H' = H  + softmax(A Wq (A Wk)^T / sqrt(h)) (A Wv) Wo
//! H''= H' + gelu(LN2(H') W1 + b1) W2 + b2
//! ```

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{Head, LayerNorm, Linear, ModelParams};
use crate::error::{OttaError, Result};

const LN_EPS: f64 = 1e-5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[cfg(test)]
fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Standard normal CDF; `gelu(x) = x * phi(x)`.
#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// GELU derivative given the cached CDF at `x`.
#[inline]
fn gelu_grad_from_cdf(x: f64, cdf: f64) -> f64 {
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Pre-activation `u` and its normal CDF, enough to run GELU both ways.
struct GeluCache {
    u: Array2<f64>,
    cdf: Array2<f64>,
}

fn gelu_forward(u: Array2<f64>) -> (Array2<f64>, GeluCache) {
    let cdf = u.mapv(normal_cdf);
    let g = &u * &cdf;
    (g, GeluCache { u, cdf })
}

fn gelu_backward(d: &mut Array2<f64>, cache: &GeluCache) {
    ndarray::Zip::from(d)
        .and(&cache.u)
        .and(&cache.cdf)
        .for_each(|d, &u, &c| *d *= gelu_grad_from_cdf(u, c));
}

fn affine(x: &ArrayView2<f64>, lin: &Linear) -> Array2<f64> {
    let mut y = x.dot(&lin.w);
    y += &lin.b;
    y
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let (rows, h) = x.dim();
    let mut xhat = Array2::zeros((rows, h));
    let mut rstd = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = inv;
        for (o, v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
            *o = (v - mean) * inv;
        }
    }
    let mut y = &xhat * &ln.gamma;
    y += &ln.beta;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    ln: &LayerNorm,
    grad: &mut LayerNorm,
) -> Array2<f64> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * &ln.gamma;
    let h = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.sum() / h;
        let mean_gx = g.dot(&xh) / h;
        let inv = cache.rstd[r];
        for ((o, gv), xv) in dx.row_mut(r).iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = inv * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    z: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    act: GeluCache,
    g: Array2<f64>,
}

/// Everything the reverse pass needs from one encoder evaluation.
pub(crate) struct EncoderCache {
    n_items: usize,
    x: Array2<f64>,
    masked_rows: Vec<bool>,
    blocks: Vec<BlockCache>,
    pub(crate) out: Array2<f64>,
}

fn check_tokens(params: &ModelParams, x: &Array2<f64>) -> Result<usize> {
    let g = params.geometry;
    if x.ncols() != g.token_len || x.nrows() % g.n_tokens != 0 {
        return Err(OttaError::Contract(format!(
            "token stack {:?} does not match geometry S={} d={}",
            x.dim(),
            g.n_tokens,
            g.token_len
        )));
    }
    Ok(x.nrows() / g.n_tokens)
}

/// Runs the encoder on stacked tokens. `masks[i]`, when given, lists the
/// tokens of item `i` whose embedding is replaced by the mask token.
pub(crate) fn encode(
    params: &ModelParams,
    x: Array2<f64>,
    masks: Option<&[&super::loss::MaskSpec]>,
) -> Result<EncoderCache> {
    let n_items = check_tokens(params, &x)?;
    let s_len = params.geometry.n_tokens;
    let hdim = params.geometry.hidden;

    let mut masked_rows = vec![false; x.nrows()];
    if let Some(masks) = masks {
        if masks.len() != n_items {
            return Err(OttaError::Contract(format!(
                "{} masks for {n_items} items",
                masks.len()
            )));
        }
        for (i, m) in masks.iter().enumerate() {
            for &t in m.indices() {
                if t >= s_len {
                    return Err(OttaError::Contract(format!("mask index {t} >= {s_len}")));
                }
                masked_rows[i * s_len + t] = true;
            }
        }
    }

    let mut h = affine(&x.view(), &params.embed);
    for (r, &m) in masked_rows.iter().enumerate() {
        if m {
            h.row_mut(r).assign(&params.mask_token.row(0));
        }
    }
    for i in 0..n_items {
        let mut block = h.slice_mut(s![i * s_len..(i + 1) * s_len, ..]);
        block += &params.pos;
    }

    let scale = 1.0 / (hdim as f64).sqrt();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (a, ln1) = layer_norm(&h, &blk.norm1);
        let q = a.dot(&blk.wq);
        let k = a.dot(&blk.wk);
        let v = a.dot(&blk.wv);
        let mut z = Array2::zeros(h.dim());
        let mut probs = Vec::with_capacity(n_items);
        for i in 0..n_items {
            let rows = s![i * s_len..(i + 1) * s_len, ..];
            let mut p = q.slice(rows).dot(&k.slice(rows).t());
            for mut row in p.rows_mut() {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut sum = 0.0;
                row.mapv_inplace(|v| {
                    let e = (v * scale - max).exp();
                    sum += e;
                    e
                });
                row.mapv_inplace(|e| e / sum);
            }
            z.slice_mut(rows).assign(&p.dot(&v.slice(rows)));
            probs.push(p);
        }
        h += &z.dot(&blk.wo);

        let (b, ln2) = layer_norm(&h, &blk.norm2);
        let (g, act) = gelu_forward(affine(&b.view(), &blk.mlp_in));
        h += &affine(&g.view(), &blk.mlp_out);
        caches.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            z,
            ln2,
            b,
            act,
            g,
        });
    }

    Ok(EncoderCache {
        n_items,
        x,
        masked_rows,
        blocks: caches,
        out: h,
    })
}

/// Accumulates parameter gradients for `d_out = dLoss/dEncoderOutput`.
pub(crate) fn encode_backward(
    params: &ModelParams,
    cache: &EncoderCache,
    d_out: Array2<f64>,
    grad: &mut ModelParams,
) {
    let s_len = params.geometry.n_tokens;
    let scale = 1.0 / (params.geometry.hidden as f64).sqrt();
    let mut dh = d_out;

    for (bi, (blk, c)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut grad.blocks[bi];

        // MLP residual branch.
        gb.mlp_out.w += &c.g.t().dot(&dh);
        gb.mlp_out.b += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut du = dh.dot(&blk.mlp_out.w.t());
        gelu_backward(&mut du, &c.act);
        gb.mlp_in.w += &c.b.t().dot(&du);
        gb.mlp_in.b += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
        let db = du.dot(&blk.mlp_in.w.t());
        dh += &layer_norm_backward(&db, &c.ln2, &blk.norm2, &mut gb.norm2);

        // Attention residual branch.
        gb.wo += &c.z.t().dot(&dh);
        let dz = dh.dot(&blk.wo.t());
        let mut dq = Array2::zeros(dz.dim());
        let mut dk = Array2::zeros(dz.dim());
        let mut dv = Array2::zeros(dz.dim());
        for i in 0..cache.n_items {
            let rows = s![i * s_len..(i + 1) * s_len, ..];
            let p = &c.probs[i];
            let dz_i = dz.slice(rows);
            dv.slice_mut(rows).assign(&p.t().dot(&dz_i));
            let dp = dz_i.dot(&c.v.slice(rows).t());
            // softmax backward, then the score scaling
            let mut ds = &dp * p;
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let total = ds_row.sum();
                ds_row.zip_mut_with(&p_row, |d, &pv| *d -= pv * total);
            }
            ds *= scale;
            dq.slice_mut(rows).assign(&ds.dot(&c.k.slice(rows)));
            dk.slice_mut(rows).assign(&ds.t().dot(&c.q.slice(rows)));
        }
        let at = c.a.t();
        gb.wq += &at.dot(&dq);
        gb.wk += &at.dot(&dk);
        gb.wv += &at.dot(&dv);
        let mut da = dq.dot(&blk.wq.t());
        da += &dk.dot(&blk.wk.t());
        da += &dv.dot(&blk.wv.t());
        dh += &layer_norm_backward(&da, &c.ln1, &blk.norm1, &mut gb.norm1);
    }

    // Positional table is shared by every item.
    for i in 0..cache.n_items {
        grad.pos += &dh.slice(s![i * s_len..(i + 1) * s_len, ..]);
    }
    for (r, &m) in cache.masked_rows.iter().enumerate() {
        if m {
            let mut row = grad.mask_token.row_mut(0);
            row += &dh.row(r);
            dh.row_mut(r).fill(0.0);
        }
    }
    grad.embed.w += &cache.x.t().dot(&dh);
    grad.embed.b += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
}

pub(crate) struct HeadCache {
    input: Array2<f64>,
    act: GeluCache,
    g: Array2<f64>,
    pub(crate) out: Array2<f64>,
}

pub(crate) fn head_forward(head: &Head, input: Array2<f64>) -> HeadCache {
    let (g, act) = gelu_forward(affine(&input.view(), &head.hidden));
    let out = affine(&g.view(), &head.out);
    HeadCache { input, act, g, out }
}

/// Returns the gradient with respect to the head input.
pub(crate) fn head_backward(
    head: &Head,
    cache: &HeadCache,
    d_out: &Array2<f64>,
    grad: &mut Head,
) -> Array2<f64> {
    grad.out.w += &cache.g.t().dot(d_out);
    grad.out.b += &d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut du = d_out.dot(&head.out.w.t());
    gelu_backward(&mut du, &cache.act);
    grad.hidden.w += &cache.input.t().dot(&du);
    grad.hidden.b += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
    du.dot(&head.hidden.w.t())
}

/// Per-item mean over token rows: `(N*S) x h -> N x h`.
pub(crate) fn mean_pool(h: &Array2<f64>, s_len: usize) -> Array2<f64> {
    let n = h.nrows() / s_len;
    let mut out = Array2::zeros((n, h.ncols()));
    for i in 0..n {
        out.row_mut(i).assign(
            &h.slice(s![i * s_len..(i + 1) * s_len, ..])
                .mean_axis(Axis(0))
                .expect("nonempty"),
        );
    }
    out
}

pub(crate) fn mean_pool_backward(d_pooled: &Array2<f64>, s_len: usize) -> Array2<f64> {
    let (n, h) = d_pooled.dim();
    let mut out = Array2::zeros((n * s_len, h));
    let inv = 1.0 / s_len as f64;
    for i in 0..n {
        let row = d_pooled.row(i).mapv(|v| v * inv);
        for r in 0..s_len {
            out.row_mut(i * s_len + r).assign(&row);
        }
    }
    out
}

/// Stacks token matrices into one `(N*S) x d` matrix.
pub(crate) fn stack_tokens<'a>(
    items: impl ExactSizeIterator<Item = ArrayView2<'a, f64>>,
    s_len: usize,
    d: usize,
) -> Result<Array2<f64>> {
    let n = items.len();
    let mut x = Array2::zeros((n * s_len, d));
    for (i, t) in items.enumerate() {
        if t.dim() != (s_len, d) {
            return Err(OttaError::Contract(format!(
                "tokens {:?} do not match geometry ({s_len}, {d})",
                t.dim()
            )));
        }
        x.slice_mut(s![i * s_len..(i + 1) * s_len, ..]).assign(&t);
    }
    Ok(x)
}

/// Reconstructs every token of `tokens` after masking the tokens in `mask`.
pub fn forward_recon(
    params: &ModelParams,
    tokens: ArrayView2<f64>,
    mask: &super::loss::MaskSpec,
) -> Result<Array2<f64>> {
    let g = params.geometry;
    let x = stack_tokens(std::iter::once(tokens), g.n_tokens, g.token_len)?;
    let enc = encode(params, x, Some(&[mask]))?;
    Ok(head_forward(&params.decoder, enc.out).out)
}

/// Normalized `[sbp, dbp]` from the unmasked encoding.
pub fn forward_predict(params: &ModelParams, tokens: ArrayView2<f64>) -> Result<[f64; 2]> {
    let out = predict_batch(params, std::iter::once(tokens))?;
    Ok(out[0])
}

pub fn predict_batch<'a>(
    params: &ModelParams,
    tokens: impl ExactSizeIterator<Item = ArrayView2<'a, f64>>,
) -> Result<Vec<[f64; 2]>> {
    let g = params.geometry;
    let x = stack_tokens(tokens, g.n_tokens, g.token_len)?;
    let enc = encode(params, x, None)?;
    let pooled = mean_pool(&enc.out, g.n_tokens);
    let y = head_forward(&params.regressor, pooled).out;
    Ok(y.rows().into_iter().map(|r| [r[0], r[1]]).collect())
}
