//! Signal-domain types: fixed-length segments, blood-pressure labels, and the
//! per-subject event streams the adaptation engine consumes.
//!
//! A segment of length `L` is cut into `S = L / d` tokens of length `d`; the
//! token matrix is the network's input unit.

mod csv_io;
mod norm;
mod synth;

pub use csv_io::{load_stream_csv, read_stream_csv, write_stream_csv, CSV_FIXED_COLUMNS};
pub use norm::{fit_norm, NormStats};
pub use synth::{drift_at, synth_subject, AmplitudeRange, Domain, SynthConfig};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{OttaError, Result};

/// One fixed-length window of a single-channel biosignal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSegment {
    pub values: Vec<f64>,
    pub subject_id: String,
    pub index: usize,
}

impl SignalSegment {
    pub fn new(values: Vec<f64>, subject_id: impl Into<String>, index: usize) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(OttaError::Contract(format!(
                "segment value at position {pos} is not finite"
            )));
        }
        Ok(Self {
            values,
            subject_id: subject_id.into(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Systolic / diastolic blood pressure in mmHg.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpLabel {
    sbp: f64,
    dbp: f64,
}

impl BpLabel {
    pub fn new(sbp: f64, dbp: f64) -> Result<Self> {
        if !(sbp.is_finite() && dbp.is_finite()) {
            return Err(OttaError::Contract("blood pressure must be finite".into()));
        }
        if dbp <= 0.0 || sbp <= dbp {
            return Err(OttaError::Contract(format!(
                "blood pressure must satisfy sbp > dbp > 0, got {sbp}/{dbp}"
            )));
        }
        Ok(Self { sbp, dbp })
    }

    pub fn sbp(&self) -> f64 {
        self.sbp
    }

    pub fn dbp(&self) -> f64 {
        self.dbp
    }
}

/// A segment arriving on the target stream.
///
/// `label` is the calibration label visible to the adapter; `truth` is the
/// ground truth kept for evaluation only and is never shown to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub segment: SignalSegment,
    pub label: Option<BpLabel>,
    pub truth: Option<BpLabel>,
}

impl StreamEvent {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectStream {
    pub subject_id: String,
    pub init_labeled: Vec<(SignalSegment, BpLabel)>,
    pub events: Vec<StreamEvent>,
}

impl SubjectStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// All (segment, label) pairs carrying a visible label, init pool included.
    pub fn labeled_pairs(&self) -> Vec<(SignalSegment, BpLabel)> {
        let mut out = self.init_labeled.clone();
        out.extend(
            self.events
                .iter()
                .filter_map(|e| e.label.map(|l| (e.segment.clone(), l))),
        );
        out
    }

    /// Moves the first `n` events into the initial labeled pool and reindexes
    /// the remainder from zero. Used for streams loaded from CSV, which carry
    /// no separate pool. Every carved event must have a ground-truth label.
    pub fn carve_init_pool(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Ok(self);
        }
        if n > self.events.len() {
            return Err(OttaError::InsufficientData(format!(
                "subject {} has {} events, cannot carve {n} initial labels",
                self.subject_id,
                self.events.len()
            )));
        }
        let rest = self.events.split_off(n);
        for ev in std::mem::replace(&mut self.events, rest) {
            let label = ev.label.or(ev.truth).ok_or_else(|| {
                OttaError::InsufficientData(format!(
                    "subject {} event {} has no label for the initial pool",
                    self.subject_id, ev.segment.index
                ))
            })?;
            self.init_labeled.push((ev.segment, label));
        }
        for (i, ev) in self.events.iter_mut().enumerate() {
            ev.segment.index = i;
        }
        Ok(self)
    }

    /// Replaces visible labels: the event at 1-based position `p` is labeled
    /// iff `p` is in `positions` (and a truth label exists). All other labels
    /// are cleared.
    pub fn with_schedule(mut self, positions: &std::collections::BTreeSet<usize>) -> Self {
        for ev in &mut self.events {
            ev.label = if positions.contains(&(ev.segment.index + 1)) {
                ev.truth
            } else {
                None
            };
        }
        self
    }
}

/// Cuts a segment into an `S x d` token matrix, row `i` holding
/// `values[i*d .. (i+1)*d]`.
pub fn tokenize(segment: &SignalSegment, d: usize) -> Result<Array2<f64>> {
    tokenize_values(&segment.values, d)
}

pub fn tokenize_values(values: &[f64], d: usize) -> Result<Array2<f64>> {
    if d == 0 || values.is_empty() || values.len() % d != 0 {
        return Err(OttaError::Config(format!(
            "segment length {} is not divisible by token length {d}",
            values.len()
        )));
    }
    let s = values.len() / d;
    Ok(Array2::from_shape_vec((s, d), values.to_vec()).expect("shape checked above"))
}

/// Inverse of [`tokenize`]: row-major concatenation.
pub fn flatten(tokens: &Array2<f64>) -> Vec<f64> {
    tokens.iter().copied().collect()
}
