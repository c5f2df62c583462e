use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{evaluate, RunMetrics};
use crate::engine::{label_schedule, run_subject, AdaptConfig, PredictionLog, StrategyRegistry};
use crate::error::{OttaError, Result};
use crate::net::ModelParams;
use crate::signal::{NormStats, SubjectStream};

/// Injection frequencies (`None` = no stream labels) crossed with initial
/// label counts, each cell run on `subjects` subjects under every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub frequencies: Vec<Option<usize>>,
    pub init_label_counts: Vec<usize>,
    pub subjects: usize,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            frequencies: vec![None, Some(100), Some(50), Some(20), Some(10)],
            init_label_counts: vec![0, 10, 20, 50],
            subjects: 20,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(OttaError::Config(format!("{field}: {why}")));
        if self.frequencies.is_empty() {
            return bad("frequencies", "must not be empty");
        }
        if self.frequencies.contains(&Some(0)) {
            return bad("frequencies", "entries must be positive or null");
        }
        if self.init_label_counts.is_empty() {
            return bad("init_label_counts", "must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must not be empty");
        }
        if self.subjects == 0 {
            return bad("subjects", "must be positive");
        }
        if has_duplicates(&self.frequencies)
            || has_duplicates(&self.init_label_counts)
            || has_duplicates(&self.seeds)
        {
            return bad("grid", "axis values must be distinct");
        }
        Ok(())
    }
}

fn has_duplicates<T: Ord>(values: &[T]) -> bool {
    let mut sorted: Vec<&T> = values.iter().collect();
    sorted.sort();
    sorted.windows(2).any(|w| w[0] == w[1])
}

pub struct SweepInputs<'a> {
    pub pretrained: &'a ModelParams,
    pub norm: &'a NormStats,
    pub streams: &'a [SubjectStream],
    /// Every setting except frequency, initial labels and seed.
    pub template: &'a AdaptConfig,
    pub registry: &'a StrategyRegistry,
    /// Return every run's prediction log alongside the cell metrics.
    pub keep_logs: bool,
}

/// Prediction log of one sweep run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub frequency: Option<usize>,
    pub init_labels: usize,
    pub seed: u64,
    pub log: PredictionLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    pub cells: Vec<CellReport>,
    /// Empty unless logs were requested; ordered by cell, seed, subject id.
    pub logs: Vec<RunLog>,
}

/// Mean metrics of one grid cell. Correlations average the runs where they
/// are defined and are `None` when no run has one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub mae_sbp: f64,
    pub mae_dbp: f64,
    pub corr_sbp: Option<f64>,
    pub corr_dbp: Option<f64>,
    /// Scored predictions summed over all runs of the cell.
    pub n_eval: usize,
    pub n_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellOutcome {
    Done(CellMetrics),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub frequency: Option<usize>,
    pub init_labels: usize,
    pub outcome: CellOutcome,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

/// Mean over subjects within each seed, then over seeds. `runs` maps a seed
/// to its per-subject metrics in a fixed order.
fn aggregate(runs: &BTreeMap<u64, Vec<RunMetrics>>) -> CellMetrics {
    let per_seed: Vec<[Option<f64>; 4]> = runs
        .values()
        .map(|ms| {
            [
                mean(ms.iter().map(|m| m.mae_sbp)),
                mean(ms.iter().map(|m| m.mae_dbp)),
                mean(ms.iter().filter_map(|m| m.corr_sbp)),
                mean(ms.iter().filter_map(|m| m.corr_dbp)),
            ]
        })
        .collect();
    let col = |k: usize| mean(per_seed.iter().filter_map(|row| row[k]));
    CellMetrics {
        mae_sbp: col(0).unwrap_or(f64::NAN),
        mae_dbp: col(1).unwrap_or(f64::NAN),
        corr_sbp: col(2),
        corr_dbp: col(3),
        n_eval: runs.values().flatten().map(|m| m.n_eval).sum(),
        n_runs: runs.values().map(Vec::len).sum(),
    }
}

/// The first `n` subjects by id, so the result does not depend on input order.
fn select_subjects(streams: &[SubjectStream], n: usize) -> Result<Vec<&SubjectStream>> {
    let mut sorted: Vec<&SubjectStream> = streams.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    if let Some(w) = sorted
        .windows(2)
        .find(|w| w[0].subject_id == w[1].subject_id)
    {
        return Err(OttaError::Contract(format!(
            "duplicate subject {}",
            w[0].subject_id
        )));
    }
    if sorted.len() < n {
        return Err(OttaError::InsufficientData(format!(
            "grid asks for {n} subjects, data has {}",
            sorted.len()
        )));
    }
    sorted.truncate(n);
    Ok(sorted)
}

/// Runs `work` items on up to `jobs` threads; results come back in item
/// order regardless of scheduling.
fn run_parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

/// Runs every (frequency, initial labels, seed, subject) combination and
/// averages per cell. A failed run marks its cell as failed; other cells
/// are unaffected.
pub fn sweep(grid: &SweepGrid, inputs: &SweepInputs<'_>, jobs: usize) -> Result<SweepOutput> {
    grid.validate()?;
    inputs
        .template
        .validate(inputs.pretrained.geometry.n_tokens)?;
    inputs.registry.get(&inputs.template.strategy)?;
    let subjects = select_subjects(inputs.streams, grid.subjects)?;

    let cells: Vec<(Option<usize>, usize)> = grid
        .frequencies
        .iter()
        .flat_map(|&f| grid.init_label_counts.iter().map(move |&n| (f, n)))
        .collect();
    let mut work = Vec::new();
    for c in 0..cells.len() {
        for &seed in &grid.seeds {
            for s in 0..subjects.len() {
                work.push((c, seed, s));
            }
        }
    }

    let results = run_parallel(&work, jobs, |&(c, seed, s)| {
        let (frequency, init_labels) = cells[c];
        let stream = subjects[s];
        let cfg = AdaptConfig {
            injection_frequency: frequency,
            init_labels,
            seed,
            ..inputs.template.clone()
        };
        label_schedule(stream.len(), frequency)
            .and_then(|sched| {
                let scheduled = stream.clone().with_schedule(&sched);
                run_subject(
                    inputs.pretrained,
                    &scheduled,
                    &cfg,
                    inputs.norm,
                    inputs.registry,
                )
            })
            .and_then(|log| {
                let m = evaluate(&log)?;
                Ok((m, inputs.keep_logs.then_some(log)))
            })
    });

    let mut per_cell: Vec<std::result::Result<BTreeMap<u64, Vec<RunMetrics>>, String>> =
        vec![Ok(BTreeMap::new()); cells.len()];
    let mut logs = Vec::new();
    for (&(c, seed, _), result) in work.iter().zip(results) {
        match (&mut per_cell[c], result) {
            (Ok(runs), Ok((m, log))) => {
                runs.entry(seed).or_default().push(m);
                if let Some(log) = log {
                    logs.push(RunLog {
                        frequency: cells[c].0,
                        init_labels: cells[c].1,
                        seed,
                        log,
                    });
                }
            }
            (Ok(_), Err(e)) => per_cell[c] = Err(e.to_string()),
            (Err(_), _) => {}
        }
    }
    let cells = cells
        .into_iter()
        .zip(per_cell)
        .map(|((frequency, init_labels), runs)| CellReport {
            frequency,
            init_labels,
            outcome: match runs {
                Ok(r) => CellOutcome::Done(aggregate(&r)),
                Err(e) => CellOutcome::Failed(e),
            },
        })
        .collect();
    Ok(SweepOutput { cells, logs })
}

/// Frozen-model predictions on every event of every stream, with all stream
/// labels hidden.
pub fn baseline_logs(
    pretrained: &ModelParams,
    norm: &NormStats,
    streams: &[SubjectStream],
) -> Result<Vec<PredictionLog>> {
    let cfg = AdaptConfig {
        strategy: "frozen".into(),
        injection_frequency: None,
        init_labels: 0,
        lr_test: 0.0,
        ..AdaptConfig::default()
    };
    let registry = StrategyRegistry::default();
    let hidden = label_schedule(0, None)?;
    streams
        .iter()
        .map(|s| {
            run_subject(
                pretrained,
                &s.clone().with_schedule(&hidden),
                &cfg,
                norm,
                &registry,
            )
        })
        .collect()
}

/// Mean baseline metrics over the first `subjects` streams by id.
pub fn baseline_no_adapt(
    pretrained: &ModelParams,
    norm: &NormStats,
    streams: &[SubjectStream],
    subjects: usize,
) -> Result<CellMetrics> {
    let chosen: Vec<SubjectStream> = select_subjects(streams, subjects)?
        .into_iter()
        .cloned()
        .collect();
    let metrics = baseline_logs(pretrained, norm, &chosen)?
        .iter()
        .map(evaluate)
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&BTreeMap::from([(0, metrics)])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{BatchComposition, BufferCapacity};
    use crate::net::Geometry;
    use crate::signal::{fit_norm, synth_subject, Domain, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Setup {
        params: ModelParams,
        norm: NormStats,
        streams: Vec<SubjectStream>,
        template: AdaptConfig,
        registry: StrategyRegistry,
    }

    impl Setup {
        fn new() -> Self {
            let synth = SynthConfig {
                segment_len: 16,
                token_len: 4,
                stream_len: 30,
                init_pool: 10,
                heart_cycles: 1.0,
                drift_delta: 10.0,
                ..SynthConfig::default()
            };
            let pairs: Vec<_> = (0..3)
                .flat_map(|i| {
                    synth_subject(&synth, Domain::Source, i)
                        .unwrap()
                        .labeled_pairs()
                })
                .collect();
            let g = Geometry {
                token_len: 4,
                n_tokens: 4,
                hidden: 4,
                depth: 1,
            };
            Self {
                params: ModelParams::init(g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
                norm: fit_norm(&pairs).unwrap(),
                streams: (0..3)
                    .map(|i| synth_subject(&synth, Domain::Target, i).unwrap())
                    .collect(),
                template: AdaptConfig {
                    composition: BatchComposition {
                        n_unlabel: 3,
                        n_label: 1,
                    },
                    capacity: BufferCapacity {
                        unlabeled: 8,
                        labeled: 4,
                    },
                    reps_per_batch: 2,
                    init_finetune_epochs: 2,
                    ..AdaptConfig::default()
                },
                registry: StrategyRegistry::default(),
            }
        }

        fn inputs<'a>(&'a self, streams: &'a [SubjectStream]) -> SweepInputs<'a> {
            SweepInputs {
                pretrained: &self.params,
                norm: &self.norm,
                streams,
                template: &self.template,
                registry: &self.registry,
                keep_logs: false,
            }
        }
    }

    fn grid() -> SweepGrid {
        SweepGrid {
            frequencies: vec![None, Some(5)],
            init_label_counts: vec![0, 5],
            subjects: 3,
            seeds: vec![1, 2],
        }
    }

    #[test]
    fn single_cell_equals_single_run() {
        let su = Setup::new();
        let g = SweepGrid {
            frequencies: vec![Some(5)],
            init_label_counts: vec![0],
            subjects: 1,
            seeds: vec![7],
        };
        let cells = sweep(&g, &su.inputs(&su.streams), 1).unwrap().cells;
        let stream = su.streams[0]
            .clone()
            .with_schedule(&label_schedule(30, Some(5)).unwrap());
        let cfg = AdaptConfig {
            injection_frequency: Some(5),
            seed: 7,
            ..su.template.clone()
        };
        let m = evaluate(&run_subject(&su.params, &stream, &cfg, &su.norm, &su.registry).unwrap())
            .unwrap();
        assert_eq!(
            cells[0].outcome,
            CellOutcome::Done(CellMetrics {
                mae_sbp: m.mae_sbp,
                mae_dbp: m.mae_dbp,
                corr_sbp: m.corr_sbp,
                corr_dbp: m.corr_dbp,
                n_eval: 24,
                n_runs: 1,
            })
        );
    }

    #[test]
    fn order_and_parallelism_do_not_matter() {
        let su = Setup::new();
        let serial = sweep(&grid(), &su.inputs(&su.streams), 1).unwrap().cells;
        let mut shuffled = su.streams.clone();
        shuffled.reverse();
        let parallel = sweep(&grid(), &su.inputs(&shuffled), 3).unwrap().cells;
        assert_eq!(serial, parallel);
        assert_eq!(serial.len(), 4);
        assert!(serial
            .iter()
            .all(|c| matches!(c.outcome, CellOutcome::Done(_))));
    }

    #[test]
    fn failed_cells_do_not_abort_others() {
        let su = Setup::new();
        let g = SweepGrid {
            init_label_counts: vec![0, 11],
            ..grid()
        };
        let cells = sweep(&g, &su.inputs(&su.streams), 2).unwrap().cells;
        for c in &cells {
            match (&c.outcome, c.init_labels) {
                (CellOutcome::Done(m), 0) => assert_eq!(m.n_runs, 6),
                (CellOutcome::Failed(msg), 11) => assert!(msg.contains("initial pool"), "{msg}"),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn logs_on_request() {
        let su = Setup::new();
        let mut inputs = su.inputs(&su.streams);
        inputs.keep_logs = true;
        let out = sweep(&grid(), &inputs, 2).unwrap();
        assert_eq!(out.logs.len(), 4 * 2 * 3);
        let first = &out.logs[0];
        assert_eq!(
            (first.frequency, first.init_labels, first.seed),
            (None, 0, 1)
        );
        assert_eq!(first.log.records.len(), 30);
        assert_eq!(out.logs[3 * 2 * 2 + 1].log.records.len(), 24);
    }

    #[test]
    fn baseline_matches_zero_rate_adaptation() {
        let su = Setup::new();
        let frozen = baseline_logs(&su.params, &su.norm, &su.streams).unwrap();
        let cfg = AdaptConfig {
            lr_test: 0.0,
            injection_frequency: None,
            ..su.template.clone()
        };
        for (stream, base) in su.streams.iter().zip(&frozen) {
            let adapted = run_subject(&su.params, stream, &cfg, &su.norm, &su.registry).unwrap();
            assert_eq!(&adapted, base);
            assert_eq!(base.records.len(), 30);
        }
        let a = baseline_no_adapt(&su.params, &su.norm, &su.streams, 3).unwrap();
        let b = baseline_no_adapt(&su.params, &su.norm, &su.streams, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_runs, 3);
    }

    #[test]
    fn grid_validation() {
        assert!(SweepGrid::default().validate().is_ok());
        let g = SweepGrid {
            seeds: vec![],
            ..SweepGrid::default()
        };
        assert!(g.validate().unwrap_err().to_string().contains("seeds"));
        let g = SweepGrid {
            frequencies: vec![Some(0)],
            ..SweepGrid::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn aggregation_is_subject_then_seed_mean() {
        let m = |mae: f64, corr: Option<f64>| RunMetrics {
            mae_sbp: mae,
            mae_dbp: mae,
            corr_sbp: corr,
            corr_dbp: None,
            n_eval: 10,
        };
        let runs = BTreeMap::from([
            (0, vec![m(1.0, Some(0.5)), m(3.0, None)]),
            (1, vec![m(5.0, Some(0.7))]),
        ]);
        let c = aggregate(&runs);
        assert_eq!(c.mae_sbp, 3.5);
        assert!((c.corr_sbp.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(c.corr_dbp, None);
        assert_eq!((c.n_eval, c.n_runs), (30, 3));
    }
}
