use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use otta_core::engine::StrategyRegistry;
use otta_core::eval::{baseline_logs, baseline_no_adapt, sweep, ReportTable, SweepInputs};
use otta_core::net::{
    load_checkpoint, pretrain, save_checkpoint, Checkpoint, Geometry, ModelParams, PretrainReport,
};
use otta_core::signal::{
    fit_norm, load_stream_csv, synth_subject, write_stream_csv, Domain, NormStats, SubjectStream,
    SynthConfig,
};

use crate::config::RunConfig;
use crate::{Cli, Command, InputError};

/// What a successful command reports. `partial` marks a sweep with failed
/// cells, whose reports were still written.
#[derive(Debug)]
pub struct Completion {
    pub summary: String,
    pub partial: bool,
}

impl Completion {
    fn done(summary: String) -> Self {
        Self {
            summary,
            partial: false,
        }
    }
}

pub fn run(cli: &Cli) -> Result<Completion> {
    let common = &cli.common;
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| InputError::new("--config is required"))?;
    let cfg = RunConfig::load(path)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let mut cfg = cfg.with_seed(seed);
    if common.jobs == 0 {
        return Err(InputError::new("--jobs: must be at least 1").into());
    }
    if common.subjects == Some(0) {
        return Err(InputError::new("--subjects: must be positive").into());
    }

    match &cli.command {
        Command::Synth { domain } => {
            if let Some(n) = common.subjects {
                match domain {
                    Domain::Source => cfg.data.source_subjects = n,
                    Domain::Target => cfg.data.target_subjects = n,
                }
            }
            cfg.validate()?;
            let configured = match domain {
                Domain::Source => &cfg.paths.source_data,
                Domain::Target => &cfg.paths.target_data,
            };
            let out = output_path(&common.out, configured, "--out or paths.*_data")?;
            cmd_synth(&cfg, *domain, &out).map(Completion::done)
        }
        Command::Pretrain { data } => {
            cfg.validate()?;
            let data = input_path(data, &cfg.paths.source_data, "--data or paths.source_data")?;
            let out = output_path(
                &common.out,
                &cfg.paths.checkpoint,
                "--out or paths.checkpoint",
            )?;
            cmd_pretrain(&cfg, &data, &out).map(Completion::done)
        }
        Command::Sweep {
            data,
            checkpoint,
            logs,
        } => {
            if let Some(n) = common.subjects {
                cfg.grid.subjects = n;
            }
            cfg.validate()?;
            let data = input_path(data, &cfg.paths.target_data, "--data or paths.target_data")?;
            let ckpt = input_path(
                checkpoint,
                &cfg.paths.checkpoint,
                "--checkpoint or paths.checkpoint",
            )?;
            let out = output_path(
                &common.out,
                &cfg.paths.report_dir,
                "--out or paths.report_dir",
            )?;
            cmd_sweep(&cfg, &ckpt, &data, &out, common.jobs, logs.as_deref())
        }
        Command::Baseline {
            data,
            checkpoint,
            logs,
        } => {
            if let Some(n) = common.subjects {
                cfg.grid.subjects = n;
            }
            cfg.validate()?;
            let data = input_path(data, &cfg.paths.target_data, "--data or paths.target_data")?;
            let ckpt = input_path(
                checkpoint,
                &cfg.paths.checkpoint,
                "--checkpoint or paths.checkpoint",
            )?;
            let out = output_path(
                &common.out,
                &cfg.paths.report_dir,
                "--out or paths.report_dir",
            )?;
            cmd_baseline(&cfg, &ckpt, &data, &out, logs.as_deref()).map(Completion::done)
        }
    }
}

fn output_path(
    flag: &Option<PathBuf>,
    configured: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| InputError::new(format!("no output path: set {what}")).into())
}

fn input_path(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = flag
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| InputError::new(format!("no input path: set {what}")))?;
    if !path.is_file() {
        return Err(
            InputError::new(format!("input file {} does not exist", path.display())).into(),
        );
    }
    Ok(path)
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

/// The generator settings for one domain. Source streams carry no separate
/// initial pool; every source event is labeled.
pub fn domain_synth(cfg: &RunConfig, domain: Domain) -> SynthConfig {
    match domain {
        Domain::Source => SynthConfig {
            stream_len: cfg.data.source_stream_len.unwrap_or(cfg.synth.stream_len),
            init_pool: 0,
            ..cfg.synth.clone()
        },
        Domain::Target => cfg.synth.clone(),
    }
}

pub fn generate(cfg: &RunConfig, domain: Domain) -> Result<Vec<SubjectStream>> {
    let synth = domain_synth(cfg, domain);
    let n = match domain {
        Domain::Source => cfg.data.source_subjects,
        Domain::Target => cfg.data.target_subjects,
    };
    (0..n as u64)
        .map(|i| synth_subject(&synth, domain, i).map_err(anyhow::Error::from))
        .collect()
}

pub fn cmd_synth(cfg: &RunConfig, domain: Domain, out: &Path) -> Result<String> {
    let streams = generate(cfg, domain)?;
    let mut w = create_file(out)?;
    write_stream_csv(&mut w, &streams)?;
    w.flush()?;
    let events: usize = streams.iter().map(|s| s.len()).sum();
    let pool: usize = streams.iter().map(|s| s.init_labeled.len()).sum();
    Ok(format!(
        "wrote {} {} subjects, {events} stream events and {pool} initial labels to {}",
        streams.len(),
        domain.as_str(),
        out.display()
    ))
}

fn read_streams(path: &Path, segment_len: usize, expected: &str) -> Result<Vec<SubjectStream>> {
    let streams =
        load_stream_csv(path).map_err(|e| InputError::new(format!("{}: {e}", path.display())))?;
    if streams.is_empty() {
        return Err(InputError::new(format!("{} holds no subjects", path.display())).into());
    }
    for s in &streams {
        let found = s
            .init_labeled
            .iter()
            .map(|(seg, _)| seg)
            .chain(s.events.iter().map(|e| &e.segment))
            .find(|seg| seg.len() != segment_len);
        if let Some(seg) = found {
            return Err(InputError::new(format!(
                "{}: subject {} has segments of length {}, expected {segment_len} ({expected})",
                path.display(),
                s.subject_id,
                seg.len()
            ))
            .into());
        }
    }
    Ok(streams)
}

/// Target streams from CSV: each subject's leading labeled rows form its
/// initial labeled pool.
pub fn read_target(path: &Path, geometry: &Geometry) -> Result<Vec<SubjectStream>> {
    let expected = format!(
        "checkpoint geometry: {} tokens of length {}",
        geometry.n_tokens, geometry.token_len
    );
    read_streams(path, geometry.segment_len(), &expected)?
        .into_iter()
        .map(|s| {
            let lead = s.events.iter().take_while(|e| e.is_labeled()).count();
            s.carve_init_pool(lead).map_err(anyhow::Error::from)
        })
        .collect()
}

/// Fits normalization on the source labels, then pretrains a model seeded
/// from the global seed.
pub fn train_source(
    cfg: &RunConfig,
    source: &[SubjectStream],
) -> Result<(Checkpoint, PretrainReport)> {
    let pairs: Vec<_> = source.iter().flat_map(|s| s.labeled_pairs()).collect();
    let norm = fit_norm(&pairs).map_err(|e| InputError::new(format!("source data: {e}")))?;
    let init = ModelParams::init_seeded(cfg.geometry(), cfg.seed)?;
    let (params, report) = pretrain(&init, source, &norm, &cfg.pretrain)?;
    let ckpt = Checkpoint {
        params,
        norm: Some(norm),
    };
    Ok((ckpt, report))
}

pub fn cmd_pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    let source = read_streams(data, cfg.geometry().segment_len(), "synth.segment_len")?;
    let (ckpt, report) =
        train_source(cfg, &source).with_context(|| format!("pretraining on {}", data.display()))?;
    save_checkpoint(out, &ckpt)?;
    let samples: usize = source.iter().map(|s| s.labeled_pairs().len()).sum();
    let last = |v: &[f64]| v.last().map_or("n/a".to_string(), |x| format!("{x:.6}"));
    Ok(format!(
        "pretrained {} epochs on {samples} samples from {} subjects; final reconstruction loss {}, prediction loss {}; wrote {}",
        cfg.pretrain.epochs,
        source.len(),
        last(&report.recon_loss),
        last(&report.pred_loss),
        out.display()
    ))
}

fn read_checkpoint_with_norm(path: &Path) -> Result<(ModelParams, NormStats)> {
    let ckpt =
        load_checkpoint(path).map_err(|e| InputError::new(format!("{}: {e}", path.display())))?;
    let norm = ckpt.norm.ok_or_else(|| {
        InputError::new(format!(
            "{}: checkpoint has no normalization statistics",
            path.display()
        ))
    })?;
    Ok((ckpt.params, norm))
}

fn write_report(table: &ReportTable, dir: &Path, stem: &str) -> Result<String> {
    let mut csv = create_file(&dir.join(format!("{stem}.csv")))?;
    table.write_csv(&mut csv)?;
    csv.flush()?;
    let text = table.to_text();
    let mut txt = create_file(&dir.join(format!("{stem}.txt")))?;
    txt.write_all(text.as_bytes())?;
    txt.flush()?;
    Ok(text)
}

fn write_log(dir: &Path, name: &str, log: &otta_core::engine::PredictionLog) -> Result<()> {
    let mut w = create_file(&dir.join(name))?;
    log.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    jobs: usize,
    logs: Option<&Path>,
) -> Result<Completion> {
    let (params, norm) = read_checkpoint_with_norm(checkpoint)?;
    let streams = read_target(data, &params.geometry)?;
    let registry = StrategyRegistry::default();
    let inputs = SweepInputs {
        pretrained: &params,
        norm: &norm,
        streams: &streams,
        template: &cfg.adapt,
        registry: &registry,
        keep_logs: logs.is_some(),
    };
    let output = sweep(&cfg.grid, &inputs, jobs).map_err(|e| match e {
        e @ (otta_core::OttaError::InsufficientData(_) | otta_core::OttaError::Config(_)) => {
            anyhow::Error::from(InputError::new(e.to_string()))
        }
        e => e.into(),
    })?;
    let baseline = baseline_no_adapt(&params, &norm, &streams, cfg.grid.subjects)?;
    let table = ReportTable {
        cells: output.cells,
        baseline,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let text = write_report(&table, out, "report")?;
    if let Some(dir) = logs {
        for run in &output.logs {
            let freq = run.frequency.map_or("none".to_string(), |f| f.to_string());
            let name = format!(
                "f{freq}_n{}_s{}_{}.jsonl",
                run.init_labels, run.seed, run.log.subject_id
            );
            write_log(dir, &name, &run.log)?;
        }
    }
    let failed = table.failed_cells().count();
    Ok(Completion {
        summary: text,
        partial: failed > 0,
    })
}

pub fn cmd_baseline(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    logs: Option<&Path>,
) -> Result<String> {
    let (params, norm) = read_checkpoint_with_norm(checkpoint)?;
    let streams = read_target(data, &params.geometry)?;
    let baseline = baseline_no_adapt(&params, &norm, &streams, cfg.grid.subjects)?;
    if let Some(dir) = logs {
        for log in baseline_logs(&params, &norm, &streams)? {
            write_log(dir, &format!("baseline_{}.jsonl", log.subject_id), &log)?;
        }
    }
    let table = ReportTable {
        cells: Vec::new(),
        baseline,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    write_report(&table, out, "baseline")
}
