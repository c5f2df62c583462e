//! CSV stream files, one row per event:
//!
//! ```text
//! subject_id,index,has_label,sbp,dbp,s0,s1,...,s{L-1}
//! ```
//!
//! `sbp`/`dbp` hold ground truth on every row where it is known, so they are
//! present even when `has_label` is 0. Empty label cells are accepted only on
//! unlabeled rows; such rows are streamed but never scored.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{BpLabel, SignalSegment, StreamEvent, SubjectStream};
use crate::error::{OttaError, Result};

pub const CSV_FIXED_COLUMNS: [&str; 5] = ["subject_id", "index", "has_label", "sbp", "dbp"];

pub fn load_stream_csv(path: impl AsRef<Path>) -> Result<Vec<SubjectStream>> {
    read_stream_csv(File::open(path)?)
}

pub fn read_stream_csv(reader: impl Read) -> Result<Vec<SubjectStream>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);

    let mut records = rdr.records();
    let header = match records.next() {
        None => return Ok(Vec::new()),
        Some(r) => r.map_err(|e| csv_err(1, e))?,
    };
    let n_cols = header.len();
    if n_cols <= CSV_FIXED_COLUMNS.len()
        || header.iter().take(5).ne(CSV_FIXED_COLUMNS.iter().copied())
    {
        return Err(OttaError::Parse {
            line: 1,
            msg: format!(
                "header must start with {} followed by signal columns",
                CSV_FIXED_COLUMNS.join(",")
            ),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, StreamEvent, u64)>> = HashMap::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(0, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let perr = |msg: String| OttaError::Parse { line, msg };
        if rec.len() != n_cols {
            return Err(perr(format!(
                "expected {n_cols} columns, found {}",
                rec.len()
            )));
        }
        let subject = rec[0].to_string();
        if subject.is_empty() {
            return Err(perr("empty subject_id".into()));
        }
        let index: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| perr(format!("invalid index `{}`", &rec[1])))?;
        let has_label = match rec[2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(perr(format!("has_label must be 0 or 1, got `{other}`"))),
        };
        let truth = match (rec[3].trim(), rec[4].trim()) {
            ("", "") if !has_label => None,
            ("", _) | (_, "") => {
                return Err(perr("sbp/dbp must both be present on labeled rows".into()))
            }
            (s, d) => {
                let sbp = parse_finite(s).ok_or_else(|| perr(format!("invalid sbp `{s}`")))?;
                let dbp = parse_finite(d).ok_or_else(|| perr(format!("invalid dbp `{d}`")))?;
                Some(BpLabel::new(sbp, dbp).map_err(|e| perr(e.to_string()))?)
            }
        };
        let values = rec
            .iter()
            .skip(5)
            .enumerate()
            .map(|(j, cell)| {
                parse_finite(cell)
                    .ok_or_else(|| perr(format!("invalid signal value in s{j}: `{cell}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let event = StreamEvent {
            segment: SignalSegment {
                values,
                subject_id: subject.clone(),
                index,
            },
            label: if has_label { truth } else { None },
            truth,
        };
        if !rows.contains_key(&subject) {
            order.push(subject.clone());
        }
        rows.entry(subject).or_default().push((index, event, line));
    }

    let mut out = Vec::with_capacity(order.len());
    for subject in order {
        let mut evs = rows.remove(&subject).unwrap_or_default();
        evs.sort_by_key(|(i, _, _)| *i);
        if let Some(w) = evs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(OttaError::Parse {
                line: w[1].2,
                msg: format!("duplicate index {} for subject {subject}", w[1].0),
            });
        }
        let events = evs
            .into_iter()
            .enumerate()
            .map(|(pos, (_, mut ev, _))| {
                ev.segment.index = pos;
                ev
            })
            .collect();
        out.push(SubjectStream {
            subject_id: subject,
            init_labeled: Vec::new(),
            events,
        });
    }
    Ok(out)
}

fn parse_finite(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn csv_err(line: u64, e: csv::Error) -> OttaError {
    let line = e.position().map(|p| p.line()).unwrap_or(line);
    OttaError::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Writes streams in the CSV schema. Initial-pool samples are written first as
/// labeled rows, followed by the stream events, with one running index.
/// Floats use the shortest representation that round-trips exactly.
pub fn write_stream_csv(mut w: impl Write, streams: &[SubjectStream]) -> Result<()> {
    let len = streams
        .iter()
        .flat_map(|s| {
            s.init_labeled
                .iter()
                .map(|(seg, _)| seg.len())
                .chain(s.events.iter().map(|e| e.segment.len()))
        })
        .next()
        .unwrap_or(0);
    let mut header = CSV_FIXED_COLUMNS.join(",");
    for j in 0..len {
        header.push_str(&format!(",s{j}"));
    }
    writeln!(w, "{header}")?;

    let mut line = String::new();
    let mut row = |w: &mut dyn Write,
                   subject: &str,
                   index: usize,
                   has_label: bool,
                   truth: Option<BpLabel>,
                   values: &[f64]|
     -> Result<()> {
        if values.len() != len {
            return Err(OttaError::Contract(format!(
                "subject {subject} row {index} has {} values, expected {len}",
                values.len()
            )));
        }
        line.clear();
        line.push_str(subject);
        line.push_str(&format!(",{index},{}", u8::from(has_label)));
        match truth {
            Some(l) => line.push_str(&format!(",{},{}", l.sbp(), l.dbp())),
            None => line.push_str(",,"),
        }
        for v in values {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
        Ok(())
    };

    for s in streams {
        let mut index = 0;
        for (seg, label) in &s.init_labeled {
            row(
                &mut w,
                &s.subject_id,
                index,
                true,
                Some(*label),
                &seg.values,
            )?;
            index += 1;
        }
        for ev in &s.events {
            row(
                &mut w,
                &s.subject_id,
                index,
                ev.label.is_some(),
                ev.truth.or(ev.label),
                &ev.segment.values,
            )?;
            index += 1;
        }
    }
    Ok(())
}
