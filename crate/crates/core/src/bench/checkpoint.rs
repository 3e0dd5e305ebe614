//! Checkpoint file: an 8-byte little-endian header length, a JSON header
//! (run config and `name -> (offset, shape)`), then every parameter as
//! little-endian `f64` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

use super::config::RunConfig;
use super::train::Model;

const FORMAT: &str = "agent-detr-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    /// Offset in values (not bytes) from the start of the data block.
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: RunConfig,
    params: Vec<Entry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut offset = 0;
    let params = model
        .params
        .iter()
        .map(|p| {
            let e = Entry {
                name: p.name.clone(),
                offset,
                shape: p.shape.clone(),
            };
            offset += p.values.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        params,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset * 8);
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(header);
    for p in model.params.iter() {
        for v in &p.values {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parameters and the stored run config.
pub fn from_bytes(bytes: &[u8]) -> Result<(RunConfig, ParamStore)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let len = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?;
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    let header_end = 8usize.checked_add(len).ok_or_else(|| bad("header length overflows"))?;
    let header: Header = serde_json::from_slice(bytes.get(8..header_end).ok_or_else(|| bad("truncated header"))?)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(&format!("unsupported format {} v{}", header.format, header.version)));
    }
    let data = &bytes[header_end..];
    if data.len() % 8 != 0 {
        return Err(bad("data block is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(&format!("{} runs past the data block", e.name)))?;
        store.insert(&e.name, &e.shape, slice.to_vec())?;
    }
    Ok((header.config, store))
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `config` given, the parameters are checked against
/// that config instead of the stored one.
pub fn load(path: impl AsRef<Path>, config: Option<&RunConfig>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (stored, params) = from_bytes(&bytes)?;
    Model::with_params(config.unwrap_or(&stored), params)
}
