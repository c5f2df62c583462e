use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OttaError, Result};

/// Network shape: `S` tokens of length `d`, hidden width `h`, `E` encoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub token_len: usize,
    pub n_tokens: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            token_len: 16,
            n_tokens: 16,
            hidden: 32,
            depth: 2,
        }
    }
}

impl Geometry {
    pub fn segment_len(&self) -> usize {
        self.token_len * self.n_tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_len == 0 || self.n_tokens == 0 || self.hidden == 0 {
            return Err(OttaError::Config(
                "geometry: token_len, n_tokens and hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Affine map `x W + b` on row vectors; `b` is stored as a `1 x out` row.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: uniform(fan_in, fan_out, fan_in, rng),
            b: Array2::zeros((1, fan_out)),
        }
    }
}

/// Per-feature scale and shift, each `1 x h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

impl LayerNorm {
    fn init(h: usize) -> Self {
        Self {
            gamma: Array2::ones((1, h)),
            beta: Array2::zeros((1, h)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub norm2: LayerNorm,
    /// `h -> 4h`
    pub mlp_in: Linear,
    /// `4h -> h`
    pub mlp_out: Linear,
}

/// Two-layer GELU MLP head.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

/// Every weight of the dual-head network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub geometry: Geometry,
    pub embed: Linear,
    pub pos: Array2<f64>,
    pub mask_token: Array2<f64>,
    pub blocks: Vec<EncoderBlock>,
    /// Reconstruction head, `h -> d` per token.
    pub decoder: Head,
    /// Regression head on the mean-pooled encoding, `h -> 2`.
    pub regressor: Head,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle(pub ModelParams);

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

impl ModelParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases and shifts zero, scales one,
    /// mask token zero.
    pub fn init(geometry: Geometry, rng: &mut impl Rng) -> Result<Self> {
        geometry.validate()?;
        let Geometry {
            token_len: d,
            n_tokens: s,
            hidden: h,
            depth,
        } = geometry;
        let embed = Linear::init(d, h, rng);
        let pos = uniform(s, h, h, rng);
        let blocks = (0..depth)
            .map(|_| EncoderBlock {
                norm1: LayerNorm::init(h),
                wq: uniform(h, h, h, rng),
                wk: uniform(h, h, h, rng),
                wv: uniform(h, h, h, rng),
                wo: uniform(h, h, h, rng),
                norm2: LayerNorm::init(h),
                mlp_in: Linear::init(h, 4 * h, rng),
                mlp_out: Linear::init(4 * h, h, rng),
            })
            .collect();
        let decoder = Head {
            hidden: Linear::init(h, h, rng),
            out: Linear::init(h, d, rng),
        };
        let regressor = Head {
            hidden: Linear::init(h, h, rng),
            out: Linear::init(h, 2, rng),
        };
        Ok(Self {
            geometry,
            embed,
            pos,
            mask_token: Array2::zeros((1, h)),
            blocks,
            decoder,
            regressor,
        })
    }

    /// [`ModelParams::init`] from a ChaCha8 stream seeded with `seed`.
    pub fn init_seeded(geometry: Geometry, seed: u64) -> Result<Self> {
        Self::init(geometry, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_tensor_mut(|_, t| t.fill(0.0));
        out
    }

    /// Visits every tensor in a fixed canonical order with its dotted name.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(&str, &'a Array2<f64>)) {
        f("embed.w", &self.embed.w);
        f("embed.b", &self.embed.b);
        f("pos", &self.pos);
        f("mask_token", &self.mask_token);
        for (i, b) in self.blocks.iter().enumerate() {
            let name = |field: &str| format!("blocks.{i}.{field}");
            f(&name("norm1.gamma"), &b.norm1.gamma);
            f(&name("norm1.beta"), &b.norm1.beta);
            f(&name("wq"), &b.wq);
            f(&name("wk"), &b.wk);
            f(&name("wv"), &b.wv);
            f(&name("wo"), &b.wo);
            f(&name("norm2.gamma"), &b.norm2.gamma);
            f(&name("norm2.beta"), &b.norm2.beta);
            f(&name("mlp_in.w"), &b.mlp_in.w);
            f(&name("mlp_in.b"), &b.mlp_in.b);
            f(&name("mlp_out.w"), &b.mlp_out.w);
            f(&name("mlp_out.b"), &b.mlp_out.b);
        }
        f("decoder.hidden.w", &self.decoder.hidden.w);
        f("decoder.hidden.b", &self.decoder.hidden.b);
        f("decoder.out.w", &self.decoder.out.w);
        f("decoder.out.b", &self.decoder.out.b);
        f("regressor.hidden.w", &self.regressor.hidden.w);
        f("regressor.hidden.b", &self.regressor.hidden.b);
        f("regressor.out.w", &self.regressor.out.w);
        f("regressor.out.b", &self.regressor.out.b);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        f("embed.w", &mut self.embed.w);
        f("embed.b", &mut self.embed.b);
        f("pos", &mut self.pos);
        f("mask_token", &mut self.mask_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let name = |field: &str| format!("blocks.{i}.{field}");
            f(&name("norm1.gamma"), &mut b.norm1.gamma);
            f(&name("norm1.beta"), &mut b.norm1.beta);
            f(&name("wq"), &mut b.wq);
            f(&name("wk"), &mut b.wk);
            f(&name("wv"), &mut b.wv);
            f(&name("wo"), &mut b.wo);
            f(&name("norm2.gamma"), &mut b.norm2.gamma);
            f(&name("norm2.beta"), &mut b.norm2.beta);
            f(&name("mlp_in.w"), &mut b.mlp_in.w);
            f(&name("mlp_in.b"), &mut b.mlp_in.b);
            f(&name("mlp_out.w"), &mut b.mlp_out.w);
            f(&name("mlp_out.b"), &mut b.mlp_out.b);
        }
        f("decoder.hidden.w", &mut self.decoder.hidden.w);
        f("decoder.hidden.b", &mut self.decoder.hidden.b);
        f("decoder.out.w", &mut self.decoder.out.w);
        f("decoder.out.b", &mut self.decoder.out.b);
        f("regressor.hidden.w", &mut self.regressor.hidden.w);
        f("regressor.hidden.b", &mut self.regressor.hidden.b);
        f("regressor.out.w", &mut self.regressor.out.w);
        f("regressor.out.b", &mut self.regressor.out.b);
    }

    /// `(name, shape)` of every tensor, in canonical order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.for_each_tensor(|name, t| out.push((name.to_string(), t.dim())));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// Flattened copy of every parameter in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.for_each_tensor(|_, t| out.extend(t.iter().copied()));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(OttaError::Contract(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        self.for_each_tensor_mut(|_, t| {
            for v in t.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        });
        Ok(())
    }
}

impl GradientBundle {
    pub fn zeros_for(params: &ModelParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn params(&self) -> &ModelParams {
        &self.0
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        check_congruent(&self.0, &other.0)?;
        let mut others = Vec::new();
        other.0.for_each_tensor(|_, t| others.push(t));
        let mut it = others.into_iter();
        self.0
            .for_each_tensor_mut(|_, t| *t += it.next().expect("congruent"));
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.0
            .for_each_tensor_mut(|_, t| t.mapv_inplace(|v| v * factor));
    }
}

fn check_congruent(a: &ModelParams, b: &ModelParams) -> Result<()> {
    if a.layout() != b.layout() {
        return Err(OttaError::Contract(
            "parameter and gradient layouts differ".into(),
        ));
    }
    Ok(())
}

/// Plain SGD: `p <- p - lr * g` on every entry.
pub fn sgd_step(params: &ModelParams, grads: &GradientBundle, lr: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

/// Zero `lr` is accepted and leaves every finite parameter unchanged.
pub fn sgd_step_in_place(params: &mut ModelParams, grads: &GradientBundle, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(OttaError::Contract(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    check_congruent(params, &grads.0)?;
    let mut gs = Vec::new();
    grads.0.for_each_tensor(|_, t| gs.push(t));
    let mut it = gs.into_iter();
    params.for_each_tensor_mut(|_, p| {
        Zip::from(p)
            .and(it.next().expect("congruent"))
            .for_each(|p, &g| *p -= lr * g);
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> ModelParams {
        let g = Geometry {
            token_len: 3,
            n_tokens: 4,
            hidden: 4,
            depth: 2,
        };
        ModelParams::init(g, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_grads(p: &ModelParams, seed: u64) -> GradientBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = p.zeros_like();
        g.for_each_tensor_mut(|_, t| t.mapv_inplace(|_| rng.gen_range(-1.0..1.0)));
        GradientBundle(g)
    }

    #[test]
    fn init_shapes_and_defaults() {
        let p = ModelParams::init(Geometry::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.embed.w.dim(), (16, 32));
        assert_eq!(p.pos.dim(), (16, 32));
        assert_eq!(p.blocks.len(), 2);
        assert_eq!(p.blocks[0].mlp_in.w.dim(), (32, 128));
        assert_eq!(p.decoder.out.w.dim(), (32, 16));
        assert_eq!(p.regressor.out.w.dim(), (32, 2));
        assert!(p.mask_token.iter().all(|&v| v == 0.0));
        assert!(p.blocks[0].norm1.gamma.iter().all(|&v| v == 1.0));
        let bound = 1.0 / 16f64.sqrt();
        assert!(p.embed.w.iter().all(|v| v.abs() <= bound));
        assert!(p.all_finite());
    }

    #[test]
    fn zero_grads_leave_params() {
        let p = tiny(1);
        let g = GradientBundle::zeros_for(&p);
        assert_eq!(sgd_step(&p, &g, 0.1).unwrap(), p);
    }

    #[test]
    fn single_entry_update() {
        let mut p = tiny(1);
        p.embed.w[[0, 0]] = 1.0;
        let mut g = GradientBundle::zeros_for(&p);
        g.0.embed.w[[0, 0]] = 0.5;
        let q = sgd_step(&p, &g, 0.1).unwrap();
        assert_eq!(q.embed.w[[0, 0]], 0.95);
        assert_eq!(q.embed.w[[0, 1]], p.embed.w[[0, 1]]);
    }

    #[test]
    fn opposite_steps_cancel() {
        let p = tiny(2);
        let g = random_grads(&p, 3);
        let mut neg = g.clone();
        neg.scale(-1.0);
        let back = sgd_step(&sgd_step(&p, &g, 0.01).unwrap(), &neg, 0.01).unwrap();
        for (a, b) in p.to_flat().iter().zip(back.to_flat()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let p = tiny(1);
        let other = ModelParams::init(
            Geometry {
                token_len: 2,
                n_tokens: 4,
                hidden: 4,
                depth: 2,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(sgd_step(&p, &GradientBundle(other), 0.1).is_err());
        assert!(sgd_step(&p, &GradientBundle::zeros_for(&p), -1.0).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let p = tiny(4);
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
    }

    proptest! {
        #[test]
        fn sgd_is_linear_in_grads(s1 in any::<u64>(), s2 in any::<u64>(), lr in 1e-4f64..0.5) {
            let p = tiny(7);
            let g1 = random_grads(&p, s1);
            let g2 = random_grads(&p, s2);
            let mut sum = g1.clone();
            sum.accumulate(&g2).unwrap();
            let joint = sgd_step(&p, &sum, lr).unwrap();
            let seq = sgd_step(&sgd_step(&p, &g1, lr).unwrap(), &g2, lr).unwrap();
            for (a, b) in joint.to_flat().iter().zip(seq.to_flat()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
