//! Synthetic pulse-like streams with controllable covariate shift and label drift.
//!
//! Each subject gets harmonic amplitudes `A_k` drawn from its domain's ranges
//! and per-subject phases. Every segment is
//! `sum_k A_k sin(2 pi k c t / L + phi_k) + eps_t`, and labels are linear in
//! the amplitudes:
//!
//! ```text
//! sbp = 100 + 40 A1 + 15 A2 + drift(i)
//! dbp =  65 + 20 A1 +  8 A3 + 0.5 drift(i)
//! ```
//!
//! where `drift(i) = drift_delta * i / T` on the target domain and zero on the
//! source domain.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BpLabel, SignalSegment, StreamEvent, SubjectStream};
use crate::error::{OttaError, Result};
use crate::seed::splitmix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Domain::Source => 0x5EED_0001,
            Domain::Target => 0x5EED_0002,
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = OttaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(OttaError::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// Closed interval `[lo, hi]` for one harmonic amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeRange {
    pub lo: f64,
    pub hi: f64,
}

impl AmplitudeRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Segment length `L`.
    pub segment_len: usize,
    /// Token length `d`.
    pub token_len: usize,
    /// Events per subject stream `T`.
    pub stream_len: usize,
    /// Initial labeled samples generated per subject, separate from the stream.
    pub init_pool: usize,
    pub n_harmonics: usize,
    pub source_amplitudes: Vec<AmplitudeRange>,
    pub target_amplitudes: Vec<AmplitudeRange>,
    pub noise_sigma: f64,
    /// Total label drift in mmHg across the target stream.
    pub drift_delta: f64,
    /// Fundamental cycles per window.
    pub heart_cycles: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            segment_len: 256,
            token_len: 16,
            stream_len: 200,
            init_pool: 50,
            n_harmonics: 3,
            source_amplitudes: vec![
                AmplitudeRange::new(0.3, 0.7),
                AmplitudeRange::new(0.1, 0.4),
                AmplitudeRange::new(0.05, 0.3),
            ],
            target_amplitudes: vec![
                AmplitudeRange::new(0.6, 1.0),
                AmplitudeRange::new(0.3, 0.6),
                AmplitudeRange::new(0.2, 0.45),
            ],
            noise_sigma: 0.05,
            drift_delta: 0.0,
            heart_cycles: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(OttaError::Config(format!("{field}: {why}")));
        if self.segment_len == 0 {
            return bad("segment_len", "must be positive");
        }
        if self.token_len == 0 || self.segment_len % self.token_len != 0 {
            return bad("token_len", "must divide segment_len");
        }
        if self.stream_len == 0 {
            return bad("stream_len", "must be positive");
        }
        if self.n_harmonics == 0 {
            return bad("n_harmonics", "must be positive");
        }
        for (field, ranges) in [
            ("source_amplitudes", &self.source_amplitudes),
            ("target_amplitudes", &self.target_amplitudes),
        ] {
            if ranges.len() != self.n_harmonics {
                return bad(field, "needs one range per harmonic");
            }
            if ranges
                .iter()
                .any(|r| !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi))
            {
                return bad(field, "ranges must be finite with lo <= hi");
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be finite and nonnegative");
        }
        if !self.drift_delta.is_finite() {
            return bad("drift_delta", "must be finite");
        }
        if !(self.heart_cycles.is_finite() && self.heart_cycles > 0.0) {
            return bad("heart_cycles", "must be positive");
        }
        Ok(())
    }

    fn ranges(&self, domain: Domain) -> &[AmplitudeRange] {
        match domain {
            Domain::Source => &self.source_amplitudes,
            Domain::Target => &self.target_amplitudes,
        }
    }
}

/// Label drift in mmHg at stream position `i`.
pub fn drift_at(cfg: &SynthConfig, domain: Domain, i: usize) -> f64 {
    match domain {
        Domain::Source => 0.0,
        Domain::Target => cfg.drift_delta * i as f64 / cfg.stream_len as f64,
    }
}

/// Generates one subject's stream. Pure in `(cfg, domain, subject_seed)`.
///
/// Source-domain events carry visible labels; target-domain events carry only
/// ground truth, to be exposed later by a label schedule.
pub fn synth_subject(
    cfg: &SynthConfig,
    domain: Domain,
    subject_seed: u64,
) -> Result<SubjectStream> {
    cfg.validate()?;
    let seed = splitmix64(splitmix64(cfg.seed ^ domain.tag()) ^ subject_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let amps: Vec<f64> = cfg
        .ranges(domain)
        .iter()
        .map(|r| r.sample(&mut rng))
        .collect();
    let phases: Vec<f64> = (0..cfg.n_harmonics)
        .map(|_| rng.gen_range(0.0..2.0 * PI))
        .collect();
    let amp = |k: usize| amps.get(k).copied().unwrap_or(0.0);

    let subject_id = format!("{}-{subject_seed:03}", domain.as_str());
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    let len = cfg.segment_len;
    let make_segment = |rng: &mut ChaCha8Rng, index: usize| -> Result<SignalSegment> {
        let values = (0..len)
            .map(|t| {
                let clean: f64 = amps
                    .iter()
                    .zip(&phases)
                    .enumerate()
                    .map(|(k, (a, phi))| {
                        let harmonic = (k + 1) as f64;
                        let theta = 2.0 * PI * harmonic * cfg.heart_cycles * t as f64 / len as f64;
                        a * (theta + phi).sin()
                    })
                    .sum();
                if cfg.noise_sigma > 0.0 {
                    clean + noise.sample(rng)
                } else {
                    clean
                }
            })
            .collect();
        SignalSegment::new(values, subject_id.clone(), index)
    };
    let label_at = |drift: f64| {
        BpLabel::new(
            100.0 + 40.0 * amp(0) + 15.0 * amp(1) + drift,
            65.0 + 20.0 * amp(0) + 8.0 * amp(2) + 0.5 * drift,
        )
    };

    let mut init_labeled = Vec::with_capacity(cfg.init_pool);
    for j in 0..cfg.init_pool {
        let seg = make_segment(&mut rng, j)?;
        init_labeled.push((seg, label_at(0.0)?));
    }
    let mut events = Vec::with_capacity(cfg.stream_len);
    for i in 0..cfg.stream_len {
        let segment = make_segment(&mut rng, i)?;
        let truth = label_at(drift_at(cfg, domain, i))?;
        events.push(StreamEvent {
            segment,
            label: (domain == Domain::Source).then_some(truth),
            truth: Some(truth),
        });
    }
    Ok(SubjectStream {
        subject_id,
        init_labeled,
        events,
    })
}
