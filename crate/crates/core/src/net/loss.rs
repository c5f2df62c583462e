use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OttaError, Result};

/// Token indices replaced by the mask token before encoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    ratio_permille: u32,
    masked: Vec<usize>,
}

impl MaskSpec {
    /// `masked` must contain exactly `round(ratio * n_tokens)` distinct
    /// indices below `n_tokens`.
    pub fn new(ratio: f64, mut masked: Vec<usize>, n_tokens: usize) -> Result<Self> {
        let expected = mask_count(ratio, n_tokens)?;
        masked.sort_unstable();
        masked.dedup();
        if masked.len() != expected || masked.iter().any(|&i| i >= n_tokens) {
            return Err(OttaError::Contract(format!(
                "mask needs {expected} distinct indices below {n_tokens}"
            )));
        }
        Ok(Self {
            ratio_permille: (ratio * 1000.0).round() as u32,
            masked,
        })
    }

    /// Uniform draw without replacement.
    pub fn random(ratio: f64, n_tokens: usize, rng: &mut impl Rng) -> Result<Self> {
        let count = mask_count(ratio, n_tokens)?;
        let mut masked = index::sample(rng, n_tokens, count).into_vec();
        masked.sort_unstable();
        Ok(Self {
            ratio_permille: (ratio * 1000.0).round() as u32,
            masked,
        })
    }

    pub fn none() -> Self {
        Self {
            ratio_permille: 0,
            masked: Vec::new(),
        }
    }

    pub fn ratio(&self) -> f64 {
        f64::from(self.ratio_permille) / 1000.0
    }

    pub fn indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.masked.binary_search(&token).is_ok()
    }
}

fn mask_count(ratio: f64, n_tokens: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(OttaError::Config(format!(
            "mask ratio {ratio} outside [0, 1]"
        )));
    }
    Ok((ratio * n_tokens as f64).round() as usize)
}

/// Shrinkage-loss shape: `a` sets how sharply small residuals are suppressed,
/// `c` is the residual level where the suppression switches off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkageParams {
    pub a: f64,
    pub c: f64,
}

impl Default for ShrinkageParams {
    fn default() -> Self {
        Self { a: 10.0, c: 0.2 }
    }
}

impl ShrinkageParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0 && self.c.is_finite() && self.c > 0.0) {
            return Err(OttaError::Config(
                "shrinkage: a and c must be finite and positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_pred: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_pred: 1.0 }
    }
}

/// Mean squared error over the masked tokens' entries only.
pub fn masked_mse(recon: ArrayView2<f64>, target: ArrayView2<f64>, mask: &MaskSpec) -> Result<f64> {
    if recon.dim() != target.dim() {
        return Err(OttaError::Contract(format!(
            "reconstruction {:?} and target {:?} differ in shape",
            recon.dim(),
            target.dim()
        )));
    }
    if mask.is_empty() {
        return Err(OttaError::Contract(
            "masked_mse needs a nonempty mask".into(),
        ));
    }
    let d = recon.ncols();
    let mut sum = 0.0;
    for &i in mask.indices() {
        if i >= recon.nrows() {
            return Err(OttaError::Contract(format!("mask index {i} out of range")));
        }
        for j in 0..d {
            let e = recon[[i, j]] - target[[i, j]];
            sum += e * e;
        }
    }
    Ok(sum / (mask.indices().len() * d) as f64)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `mean_j l_j^2 / (1 + exp(a (c - l_j)))` with `l_j = |pred_j - target_j|`.
pub fn shrinkage(pred: [f64; 2], target: [f64; 2], sp: &ShrinkageParams) -> f64 {
    pred.iter()
        .zip(&target)
        .map(|(p, t)| {
            let l = (p - t).abs();
            l * l * sigmoid(sp.a * (l - sp.c))
        })
        .sum::<f64>()
        / 2.0
}

/// Derivative of [`shrinkage`] with respect to `pred`.
pub(crate) fn shrinkage_grad(pred: [f64; 2], target: [f64; 2], sp: &ShrinkageParams) -> [f64; 2] {
    let mut g = [0.0; 2];
    for j in 0..2 {
        let r = pred[j] - target[j];
        let l = r.abs();
        let s = sigmoid(sp.a * (l - sp.c));
        g[j] = (2.0 * r * s + r * l * sp.a * s * (1.0 - s)) / 2.0;
    }
    g
}

pub fn combined_loss(recon_loss: f64, pred_loss: f64, w: &LossWeights) -> f64 {
    recon_loss + w.lambda_pred * pred_loss
}

/// Squared-error reconstruction gradient restricted to masked rows, scaled by
/// `weight / (|mask| * d)`.
pub(crate) fn masked_mse_grad(
    recon: ArrayView2<f64>,
    target: ArrayView2<f64>,
    mask: &MaskSpec,
    weight: f64,
) -> Array2<f64> {
    let d = recon.ncols();
    let mut g = Array2::zeros(recon.dim());
    let scale = 2.0 * weight / (mask.indices().len() * d) as f64;
    for &i in mask.indices() {
        for j in 0..d {
            g[[i, j]] = scale * (recon[[i, j]] - target[[i, j]]);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_count_rounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MaskSpec::random(0.5, 16, &mut rng).unwrap();
        assert_eq!(m.indices().len(), 8);
        assert!(m.indices().windows(2).all(|w| w[0] < w[1]));
        assert!(MaskSpec::random(1.5, 16, &mut rng).is_err());
        assert!(MaskSpec::new(0.5, vec![0, 0, 1, 2], 8).is_err());
        assert!(MaskSpec::new(0.5, vec![0, 1, 2, 9], 8).is_err());
        assert_eq!(
            MaskSpec::new(0.25, vec![3, 1], 8).unwrap().indices(),
            &[1, 3]
        );
    }

    #[test]
    fn masked_mse_cases() {
        let t = array![[0.0], [1.0]];
        let r = array![[5.0], [3.0]];
        let m = MaskSpec::new(0.5, vec![1], 2).unwrap();
        assert_eq!(masked_mse(r.view(), t.view(), &m).unwrap(), 4.0);
        assert_eq!(masked_mse(t.view(), t.view(), &m).unwrap(), 0.0);

        let all = MaskSpec::new(1.0, vec![0, 1], 2).unwrap();
        let plain = ((5.0f64).powi(2) + 2.0f64.powi(2)) / 2.0;
        assert_eq!(masked_mse(r.view(), t.view(), &all).unwrap(), plain);

        assert!(masked_mse(r.view(), t.view(), &MaskSpec::none()).is_err());
    }

    #[test]
    fn shrinkage_closed_form() {
        let sp = ShrinkageParams::default();
        assert_eq!(shrinkage([0.3, -0.2], [0.3, -0.2], &sp), 0.0);
        // independent evaluation: l = 1 on both outputs, a(c - l) = -8
        let expected = 1.0 / (1.0 + (-8.0f64).exp());
        let got = shrinkage([1.0, 0.0], [0.0, 1.0], &sp);
        assert!((got - expected).abs() < 1e-9);
        assert!((got - 0.999_665).abs() < 1e-6);

        let tiny_a = ShrinkageParams { a: 1e-12, c: 0.2 };
        let got = shrinkage([0.7, 0.0], [0.0, 0.0], &tiny_a);
        assert!((got - 0.49 / 2.0 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn combined_cases() {
        let w = |l| LossWeights { lambda_pred: l };
        assert_eq!(combined_loss(0.5, 0.25, &w(1.0)), 0.75);
        assert_eq!(combined_loss(0.5, 0.25, &w(0.0)), 0.5);
        assert_eq!(combined_loss(1.0, 2.0, &w(0.5)), 2.0);
    }

    #[test]
    fn shrinkage_grad_matches_finite_differences() {
        let sp = ShrinkageParams::default();
        for (p, t) in [([0.5, -1.3], [0.1, 0.2]), ([0.21, 3.0], [0.0, 2.95])] {
            let g = shrinkage_grad(p, t, &sp);
            for j in 0..2 {
                let h = 1e-6;
                let mut pp = p;
                let mut pm = p;
                pp[j] += h;
                pm[j] -= h;
                let fd = (shrinkage(pp, t, &sp) - shrinkage(pm, t, &sp)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-7, "{fd} vs {}", g[j]);
            }
        }
    }

    proptest! {
        #[test]
        fn masked_mse_ignores_unmasked_targets(
            seed in any::<u64>(),
            noise in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = Array2::from_shape_simple_fn((6, 3), || rng.gen_range(-1.0..1.0));
            let t = Array2::from_shape_simple_fn((6, 3), || rng.gen_range(-1.0..1.0));
            let m = MaskSpec::random(0.5, 6, &mut rng).unwrap();
            let mut t2 = t.clone();
            for i in (0..6).filter(|i| !m.contains(*i)) {
                t2.row_mut(i).mapv_inplace(|v| v + noise);
            }
            prop_assert_eq!(
                masked_mse(r.view(), t.view(), &m).unwrap(),
                masked_mse(r.view(), t2.view(), &m).unwrap()
            );
        }

        #[test]
        fn shrinkage_nonnegative_and_monotone(
            a in 0.1f64..20.0,
            c in 0.01f64..2.0,
            l1 in 0.0f64..5.0,
            dl in 0.0f64..5.0,
            other in 0.0f64..5.0,
        ) {
            let sp = ShrinkageParams { a, c };
            let lo = shrinkage([l1, other], [0.0, 0.0], &sp);
            let hi = shrinkage([l1 + dl, other], [0.0, 0.0], &sp);
            prop_assert!(lo >= 0.0);
            prop_assert!(hi >= lo);
            let neg = shrinkage([-(l1 + dl), other], [0.0, 0.0], &sp);
            prop_assert_eq!(hi, neg);
            if l1 > 0.0 {
                prop_assert!(shrinkage([l1, 0.0], [0.0, 0.0], &sp) > 0.0);
            }
        }
    }
}
