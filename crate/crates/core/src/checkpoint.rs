//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PFCK"  u32 version  u64 manifest_len  manifest (JSON)  payload
//! ```
//!
//! The manifest holds the optional [`ModelConfig`] and one record per tensor
//! (name, shape, private flag, payload offset in values). The payload is every
//! tensor's values as IEEE-754 doubles in manifest order. Encoding is a pure
//! function of its input, so write, read, write yields identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParameterSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EntryRecord {
    name: String,
    shape: Vec<usize>,
    private: bool,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: Option<ModelConfig>,
    entries: Vec<EntryRecord>,
}

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Option<ModelConfig>,
    pub params: ParameterSet,
}

pub fn encode(config: Option<&ModelConfig>, params: &ParameterSet) -> Vec<u8> {
    let mut offset = 0;
    let entries = params
        .entries()
        .iter()
        .map(|e| {
            let rec = EntryRecord {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                private: e.private,
                offset,
            };
            offset += e.tensor.len();
            rec
        })
        .collect();
    let manifest = Manifest {
        config: config.cloned(),
        entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in params.entries() {
        out.extend_from_slice(&e.tensor.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", *at)))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(take(bytes, &mut at, len)?)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let payload = &bytes[at..];
    let mut params = ParameterSet::new();
    let mut expected_offset = 0;
    for rec in manifest.entries {
        let n: usize = rec.shape.iter().product();
        if rec.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "entry `{}` has offset {}, expected {expected_offset}",
                rec.name, rec.offset
            )));
        }
        let start = rec.offset * 8;
        let raw = payload
            .get(start..start + n * 8)
            .ok_or_else(|| Error::Checkpoint(format!("payload too short for `{}`", rec.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(rec.shape, data)?;
        params
            .push(rec.name, tensor, rec.private)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        expected_offset += n;
    }
    if payload.len() != expected_offset * 8 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest describes {}",
            payload.len(),
            expected_offset * 8
        )));
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
    })
}

pub fn write(path: &Path, config: Option<&ModelConfig>, params: &ParameterSet) -> Result<()> {
    fs::write(path, encode(config, params)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
