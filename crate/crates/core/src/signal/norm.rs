use serde::{Deserialize, Serialize};

use super::{BpLabel, SignalSegment};
use crate::error::{OttaError, Result};

/// Z-score statistics for the signal amplitude and both label channels.
///
/// Fit on source-domain data only; target streams are normalized with the
/// same statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub signal_mean: f64,
    pub signal_std: f64,
    pub sbp_mean: f64,
    pub sbp_std: f64,
    pub dbp_mean: f64,
    pub dbp_std: f64,
}

/// Population mean and standard deviation, two-pass.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values
        .clone()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub fn fit_norm(source: &[(SignalSegment, BpLabel)]) -> Result<NormStats> {
    if source.is_empty() {
        return Err(OttaError::Degenerate("no source samples to fit".into()));
    }
    let (signal_mean, signal_std) =
        mean_std(source.iter().flat_map(|(s, _)| s.values.iter().copied()));
    let (sbp_mean, sbp_std) = mean_std(source.iter().map(|(_, l)| l.sbp()));
    let (dbp_mean, dbp_std) = mean_std(source.iter().map(|(_, l)| l.dbp()));
    let stats = NormStats {
        signal_mean,
        signal_std,
        sbp_mean,
        sbp_std,
        dbp_mean,
        dbp_std,
    };
    stats.validate()?;
    Ok(stats)
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        for (name, std) in [
            ("signal", self.signal_std),
            ("sbp", self.sbp_std),
            ("dbp", self.dbp_std),
        ] {
            if !(std.is_finite() && std > 0.0) {
                return Err(OttaError::Degenerate(format!(
                    "{name} has zero or non-finite spread"
                )));
            }
        }
        Ok(())
    }

    pub fn normalize_signal(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|v| (v - self.signal_mean) / self.signal_std)
            .collect()
    }

    pub fn denormalize_signal(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|v| v * self.signal_std + self.signal_mean)
            .collect()
    }

    pub fn normalize_segment(&self, segment: &SignalSegment) -> SignalSegment {
        SignalSegment {
            values: self.normalize_signal(&segment.values),
            subject_id: segment.subject_id.clone(),
            index: segment.index,
        }
    }

    /// `[sbp, dbp]` on the normalized label scale.
    pub fn normalize_label(&self, label: &BpLabel) -> [f64; 2] {
        [
            (label.sbp() - self.sbp_mean) / self.sbp_std,
            (label.dbp() - self.dbp_mean) / self.dbp_std,
        ]
    }

    /// Back to mmHg. Returned as a plain pair since model outputs need not
    /// satisfy the label invariants.
    pub fn denormalize_label(&self, z: [f64; 2]) -> (f64, f64) {
        (
            z[0] * self.sbp_std + self.sbp_mean,
            z[1] * self.dbp_std + self.dbp_mean,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(values: Vec<f64>, sbp: f64, dbp: f64) -> (SignalSegment, BpLabel) {
        (
            SignalSegment::new(values, "s", 0).unwrap(),
            BpLabel::new(sbp, dbp).unwrap(),
        )
    }

    #[test]
    fn two_point_label_means() {
        // Signals must carry some spread or the fit is degenerate.
        let data = vec![
            pair(vec![0.0, 1.0], 100.0, 60.0),
            pair(vec![1.0, 0.0], 120.0, 80.0),
        ];
        let s = fit_norm(&data).unwrap();
        assert_eq!(s.sbp_mean, 110.0);
        assert_eq!(s.dbp_mean, 70.0);
        assert_eq!(s.sbp_std, 10.0);
        assert_eq!(s.signal_mean, 0.5);
        assert_eq!(s.signal_std, 0.5);
    }

    #[test]
    fn constant_signals_are_degenerate() {
        let data = vec![
            pair(vec![3.0; 4], 100.0, 60.0),
            pair(vec![3.0; 4], 120.0, 80.0),
        ];
        assert!(matches!(fit_norm(&data), Err(OttaError::Degenerate(_))));
        assert!(matches!(fit_norm(&[]), Err(OttaError::Degenerate(_))));
    }

    #[test]
    fn constant_labels_are_degenerate() {
        let data = vec![
            pair(vec![0.0, 1.0], 120.0, 80.0),
            pair(vec![1.0, 2.0], 120.0, 80.0),
        ];
        assert!(fit_norm(&data).is_err());
    }

    #[test]
    fn random_fixture_matches_one_pass_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<_> = (0..7)
            .map(|_| {
                let v: Vec<f64> = (0..13).map(|_| rng.gen_range(-3.0..5.0)).collect();
                let dbp = rng.gen_range(50.0..90.0);
                pair(v, dbp + rng.gen_range(20.0..60.0), dbp)
            })
            .collect();
        let s = fit_norm(&data).unwrap();

        // Welford, one pass, independent of the two-pass fit.
        let welford = |xs: &mut dyn Iterator<Item = f64>| {
            let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for x in xs {
                n += 1.0;
                let delta = x - mean;
                mean += delta / n;
                m2 += delta * (x - mean);
            }
            (mean, (m2 / n).sqrt())
        };
        let (sm, ss) = welford(&mut data.iter().flat_map(|(s, _)| s.values.clone()));
        let (bm, bs) = welford(&mut data.iter().map(|(_, l)| l.sbp()));
        let (dm, ds) = welford(&mut data.iter().map(|(_, l)| l.dbp()));
        for (a, b) in [
            (s.signal_mean, sm),
            (s.signal_std, ss),
            (s.sbp_mean, bm),
            (s.sbp_std, bs),
            (s.dbp_mean, dm),
            (s.dbp_std, ds),
        ] {
            approx::assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn z_score_anchors_and_round_trip() {
        let s = NormStats {
            signal_mean: 2.0,
            signal_std: 4.0,
            sbp_mean: 120.0,
            sbp_std: 15.0,
            dbp_mean: 75.0,
            dbp_std: 9.0,
        };
        assert_eq!(s.normalize_signal(&[2.0, 6.0]), vec![0.0, 1.0]);
        let z = s.normalize_label(&BpLabel::new(135.0, 75.0).unwrap());
        assert_eq!(z, [1.0, 0.0]);
        assert_eq!(s.denormalize_label(z), (135.0, 75.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..256).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let back = s.denormalize_signal(&s.normalize_signal(&v));
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
