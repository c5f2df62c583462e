//! Metrics, exclusion accounting, the frequency x initial-label sweep, and
//! report emission.

mod report;
mod sweep;

pub use report::{ReportTable, REFERENCE_BASELINE, REFERENCE_TABLE};
pub use sweep::{
    baseline_logs, baseline_no_adapt, sweep, CellMetrics, CellOutcome, CellReport, RunLog,
    SweepGrid, SweepInputs, SweepOutput,
};

use serde::{Deserialize, Serialize};

use crate::engine::PredictionLog;
use crate::error::{OttaError, Result};

/// Metrics of one subject run over its scored (unlabeled) events.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mae_sbp: f64,
    pub mae_dbp: f64,
    /// `None` when either series has zero variance.
    pub corr_sbp: Option<f64>,
    pub corr_dbp: Option<f64>,
    pub n_eval: usize,
}

fn check_pair(preds: &[f64], truths: &[f64]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(OttaError::Contract(format!(
            "{} predictions but {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(OttaError::Contract("metrics need at least one pair".into()));
    }
    Ok(())
}

pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(preds, truths)?;
    let sum: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / preds.len() as f64)
}

/// Pearson correlation. Zero variance in either series is an error rather
/// than a silent zero.
pub fn pearson(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(preds, truths)?;
    if preds.len() < 2 {
        return Err(OttaError::UndefinedCorrelation(
            "fewer than two pairs".into(),
        ));
    }
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = truths.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(truths) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(OttaError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn optional_corr(preds: &[f64], truths: &[f64]) -> Result<Option<f64>> {
    match pearson(preds, truths) {
        Ok(r) => Ok(Some(r)),
        Err(OttaError::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Metrics over the logged predictions that carry ground truth.
pub fn evaluate(log: &PredictionLog) -> Result<RunMetrics> {
    let (mut ps, mut ts, mut pd, mut td) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in &log.records {
        if let (Some(s), Some(d)) = (r.true_sbp, r.true_dbp) {
            ps.push(r.pred_sbp);
            ts.push(s);
            pd.push(r.pred_dbp);
            td.push(d);
        }
    }
    if ps.len() < 2 {
        return Err(OttaError::InsufficientData(format!(
            "subject {}: {} evaluable predictions, need at least 2",
            log.subject_id,
            ps.len()
        )));
    }
    Ok(RunMetrics {
        mae_sbp: mae(&ps, &ts)?,
        mae_dbp: mae(&pd, &td)?,
        corr_sbp: optional_corr(&ps, &ts)?,
        corr_dbp: optional_corr(&pd, &td)?,
        n_eval: ps.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::PredictionRecord;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mae(&[3.0, 1.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(mae(&[], &[]), Err(OttaError::Contract(_))));
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(OttaError::Contract(_))
        ));
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 5.0, 3.0];
        assert_eq!(pearson(&x, &x).unwrap(), 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&neg, &x).unwrap(), -1.0);
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &x[..3]),
            Err(OttaError::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn pearson_longhand() {
        // means 2 and 7/3; deviations (-1,0,1) and (-4/3,-1/3,5/3)
        // cov = 3/3, var_x = 2/3, var_y = (16+1+25)/27 = 42/27
        let expected = 1.0 / ((2.0f64 / 3.0).sqrt() * (42.0f64 / 27.0).sqrt());
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_abs_diff_eq!(r, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.98198, epsilon = 1e-5);
    }

    fn record(index: usize, pred: f64, truth: Option<f64>) -> PredictionRecord {
        PredictionRecord {
            index,
            pred_sbp: pred,
            pred_dbp: pred / 2.0,
            true_sbp: truth,
            true_dbp: truth.map(|t| t / 2.0),
        }
    }

    #[test]
    fn perfect_predictor() {
        let mut log = PredictionLog::new("s");
        log.records = (0..5)
            .map(|i| record(i, 100.0 + i as f64, Some(100.0 + i as f64)))
            .collect();
        let m = evaluate(&log).unwrap();
        assert_eq!(m.mae_sbp, 0.0);
        assert_eq!(m.corr_sbp, Some(1.0));
        assert_eq!(m.n_eval, 5);
    }

    #[test]
    fn records_without_truth_are_skipped() {
        let mut log = PredictionLog::new("s");
        log.records = vec![
            record(0, 1.0, Some(2.0)),
            record(1, 5.0, None),
            record(2, 3.0, Some(2.0)),
        ];
        let m = evaluate(&log).unwrap();
        assert_eq!(m.n_eval, 2);
        assert_eq!(m.mae_sbp, 1.0);
        assert_eq!(m.corr_sbp, None);
    }

    #[test]
    fn too_few_predictions() {
        let mut log = PredictionLog::new("s");
        log.records = vec![record(0, 1.0, Some(2.0))];
        assert!(matches!(
            evaluate(&log),
            Err(OttaError::InsufficientData(_))
        ));
    }
}
