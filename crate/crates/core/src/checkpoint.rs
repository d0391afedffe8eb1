//! Versioned single-file model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MOPFCKPT" | version u32 | header length u64 | header JSON
//! tensor count u32 | per tensor: name length u16, name, value count u64, f64 values
//! codebook block
//! ```
//!
//! Values are always stored as `f64`, so `f32` models round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoPFormer, Network};
use crate::quantizer::Codebook;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MOPFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub meta_dim: usize,
    pub classes: Vec<String>,
    pub seed: u64,
    pub stage: String,
    pub precision: String,
}

/// Raw checkpoint contents, independent of the model's scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Vec<f64>)>,
    pub codebook: Codebook<f64>,
}

fn corrupt(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable checkpoint: {e}"))
}

pub fn write_checkpoint<S: Scalar>(model: &MoPFormer<S>, stage: &str, w: &mut impl Write) -> Result<()> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        meta_dim: model.net.embedder.adapter.weight.ncols(),
        classes: model.classes.clone(),
        seed: model.seed,
        stage: stage.to_string(),
        precision: S::NAME.to_string(),
    };
    let io = |e: std::io::Error| Error::Checkpoint(format!("writing checkpoint: {e}"));
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let tensors = model.net.tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for t in &tensors {
        let name = t.name.as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_u64::<LittleEndian>(t.data.len() as u64).map_err(io)?;
        for v in t.data {
            w.write_f64::<LittleEndian>(v.f64()).map_err(io)?;
        }
    }
    model.codebook.write_to(w).map_err(io)?;
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(model: &MoPFormer<S>, stage: &str, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, stage, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw(r: &mut impl Read) -> Result<RawCheckpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic string)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(corrupt)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::Checkpoint(format!("checkpoint header: {e}")))?;
    let count = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>().map_err(corrupt)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(corrupt)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.read_f64::<LittleEndian>().map_err(corrupt)?);
        }
        tensors.push((name, values));
    }
    let codebook = Codebook::read_from(r)?;
    Ok(RawCheckpoint { header, tensors, codebook })
}

pub fn read_raw_file(path: &Path) -> Result<RawCheckpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_raw(&mut BufReader::new(file))
}

impl RawCheckpoint {
    /// Rebuilds a model, checking every tensor against the shapes implied by
    /// the header.
    pub fn into_model<S: Scalar>(self) -> Result<MoPFormer<S>> {
        let h = &self.header;
        h.model.validate()?;
        let classes = (!h.classes.is_empty()).then_some(h.classes.len());
        let mut net = Network::<S>::new(&h.model, h.meta_dim, classes, 0)?;
        {
            let mut slots = net.tensors_mut();
            if slots.len() != self.tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds {} tensors but its config implies {}",
                    self.tensors.len(),
                    slots.len()
                )));
            }
            for (slot, (name, values)) in slots.iter_mut().zip(&self.tensors) {
                if &slot.name != name || slot.data.len() != values.len() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` ({} values) does not match expected `{}` ({} values)",
                        values.len(),
                        slot.name,
                        slot.data.len()
                    )));
                }
                for (d, &v) in slot.data.iter_mut().zip(values) {
                    *d = S::of(v);
                }
            }
        }
        let cb = &self.codebook;
        if cb.size() != h.model.codebook_size || cb.segment_len() != h.model.segment_len {
            return Err(Error::Checkpoint(format!(
                "codebook is {}x{} but the config says {}x{}",
                cb.size(),
                cb.segment_len(),
                h.model.codebook_size,
                h.model.segment_len
            )));
        }
        let mut codebook = Codebook::from_prototypes(cb.prototypes.mapv(S::of))?;
        codebook.usage_counts = cb.usage_counts.clone();
        Ok(MoPFormer {
            config: self.header.model,
            codebook,
            net,
            classes: self.header.classes,
            seed: self.header.seed,
        })
    }

    /// Names of tensors whose bits differ between two checkpoints, including
    /// tensors present in only one of them. The codebook appears as
    /// `codebook.prototypes` and `codebook.usage_counts`.
    pub fn diff(&self, other: &RawCheckpoint) -> Vec<String> {
        let mut out = Vec::new();
        let find = |set: &[(String, Vec<f64>)], name: &str| set.iter().position(|(n, _)| n == name);
        for (name, values) in &self.tensors {
            match find(&other.tensors, name) {
                Some(j) if bits_equal(values, &other.tensors[j].1) => {}
                _ => out.push(name.clone()),
            }
        }
        for (name, _) in &other.tensors {
            if find(&self.tensors, name).is_none() {
                out.push(name.clone());
            }
        }
        let protos_a: Vec<f64> = self.codebook.prototypes.iter().copied().collect();
        let protos_b: Vec<f64> = other.codebook.prototypes.iter().copied().collect();
        if !bits_equal(&protos_a, &protos_b) {
            out.push("codebook.prototypes".into());
        }
        if self.codebook.usage_counts != other.codebook.usage_counts {
            out.push("codebook.usage_counts".into());
        }
        out
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(MoPFormer<S>, CheckpointHeader)> {
    let raw = read_raw_file(path)?;
    let header = raw.header.clone();
    Ok((raw.into_model()?, header))
}
