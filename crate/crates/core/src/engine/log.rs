use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One scored event. Predictions are in mmHg; truth is absent when the
/// stream carried no ground truth for the event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub pred_sbp: f64,
    pub pred_dbp: f64,
    pub true_sbp: Option<f64>,
    pub true_dbp: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionLog {
    pub subject_id: String,
    pub records: Vec<PredictionRecord>,
    /// Stream indices whose label was shown to the adapter.
    pub labeled_indices: Vec<usize>,
}

#[derive(Serialize)]
struct Line<'a> {
    subject_id: &'a str,
    #[serde(flatten)]
    record: &'a PredictionRecord,
}

impl PredictionLog {
    pub fn new(subject_id: &str) -> Self {
        Self {
            subject_id: subject_id.to_string(),
            ..Self::default()
        }
    }

    /// One JSON object per scored event.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for record in &self.records {
            let line = Line {
                subject_id: &self.subject_id,
                record,
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
