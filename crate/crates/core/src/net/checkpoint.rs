//! Versioned JSON checkpoints. Every tensor is stored by name with its shape;
//! floats are written in shortest round-trip form, so save/load is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Geometry, ModelParams};
use crate::error::{OttaError, Result};
use crate::signal::NormStats;

const FORMAT: &str = "otta-checkpoint";
const VERSION: u32 = 1;

/// Model weights plus the source normalization they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub norm: Option<NormStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    geometry: Geometry,
    norm: Option<NormStats>,
    tensors: Vec<TensorDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

pub fn write_checkpoint(w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::new();
    ckpt.params.for_each_tensor(|name, t| {
        tensors.push(TensorDoc {
            name: name.to_string(),
            shape: [t.nrows(), t.ncols()],
            data: t.iter().copied().collect(),
        })
    });
    let doc = Document {
        format: FORMAT.into(),
        version: VERSION,
        geometry: ckpt.params.geometry,
        norm: ckpt.norm,
        tensors,
    };
    serde_json::to_writer(w, &doc).map_err(|e| OttaError::Checkpoint(e.to_string()))
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let doc: Document =
        serde_json::from_reader(r).map_err(|e| OttaError::Checkpoint(e.to_string()))?;
    if doc.format != FORMAT {
        return Err(OttaError::Checkpoint(format!(
            "unknown format `{}`",
            doc.format
        )));
    }
    if doc.version != VERSION {
        return Err(OttaError::Checkpoint(format!(
            "unsupported version {} (expected {VERSION})",
            doc.version
        )));
    }
    doc.geometry
        .validate()
        .map_err(|e| OttaError::Checkpoint(e.to_string()))?;
    if let Some(norm) = &doc.norm {
        norm.validate()
            .map_err(|e| OttaError::Checkpoint(e.to_string()))?;
    }
    let mut params = ModelParams::init(doc.geometry, &mut ChaCha8Rng::seed_from_u64(0))?;
    let layout = params.layout();
    if layout.len() != doc.tensors.len() {
        return Err(OttaError::Checkpoint(format!(
            "expected {} tensors, found {}",
            layout.len(),
            doc.tensors.len()
        )));
    }
    for ((name, shape), t) in layout.iter().zip(&doc.tensors) {
        if &t.name != name
            || (t.shape[0], t.shape[1]) != *shape
            || t.data.len() != shape.0 * shape.1
        {
            return Err(OttaError::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{name}` {:?}",
                t.name, t.shape, shape
            )));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(OttaError::Checkpoint(format!(
                "tensor `{name}` has non-finite values"
            )));
        }
    }
    let mut tensors = doc.tensors.into_iter();
    params.for_each_tensor_mut(|_, p| {
        let t = tensors.next().expect("count checked");
        p.iter_mut().zip(t.data).for_each(|(dst, v)| *dst = v);
    });
    Ok(Checkpoint {
        params,
        norm: doc.norm,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
