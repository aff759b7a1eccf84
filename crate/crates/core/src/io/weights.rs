//! `SYMTC001` weight files.
//!
//! Layout: the 8-byte magic, a little-endian u64 header length, a UTF-8
//! JSON header, then the tensors as contiguous little-endian f32. The
//! header maps each tensor name to `{"shape": [...], "offset": bytes}`
//! (offset relative to the start of the payload) and holds free-form JSON
//! under `__metadata__`. In-memory values are narrowed to f32 on save and
//! widened on load.

use std::path::Path;

use serde_json::{json, Map, Value};

use super::{atomic_write, read_bytes};
use crate::error::{Error, Result};
use crate::ndgrad::{DiffArray, ParamStore};
use crate::scalar::Real;
use crate::symtc_net::{NetworkConfig, SymTc};

pub const MAGIC: &[u8; 8] = b"SYMTC001";
pub const METADATA_KEY: &str = "__metadata__";
const PREAMBLE: usize = 16;

/// Decoded weight file, tensors in payload order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub metadata: Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn fmt_err(msg: impl Into<String>, offset: usize) -> Error {
    Error::Format { msg: msg.into(), offset }
}

pub fn encode_weights<T: Real>(store: &ParamStore<T>, metadata: Value) -> Result<Vec<u8>> {
    let mut header = Map::new();
    header.insert(METADATA_KEY.into(), metadata);
    let mut payload = Vec::with_capacity(store.num_scalars() * 4);
    for (name, arr) in store.iter() {
        if name == METADATA_KEY || header.contains_key(name) {
            return Err(Error::invalid("encode_weights", format!("duplicate or reserved tensor name {name:?}")));
        }
        header.insert(name.to_string(), json!({ "shape": arr.shape(), "offset": payload.len() }));
        for v in arr.data() {
            payload.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn tensor_entry(name: &str, v: &Value, at: usize) -> Result<(Vec<usize>, usize)> {
    let bad = || fmt_err(format!("tensor {name:?} needs integer \"shape\" and \"offset\""), at);
    let obj = v.as_object().ok_or_else(bad)?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(bad)?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(bad))
        .collect::<Result<Vec<_>>>()?;
    let offset = obj.get("offset").and_then(Value::as_u64).ok_or_else(bad)? as usize;
    Ok((shape, offset))
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightFile> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(fmt_err("missing SYMTC001 magic", 0));
    }
    if bytes.len() < PREAMBLE {
        return Err(fmt_err("truncated header length", 8));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = PREAMBLE
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt_err(format!("header length {hlen} exceeds file size {}", bytes.len()), 8))?;
    let header: Value = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
        .map_err(|e| fmt_err(format!("header JSON: {e}"), PREAMBLE))?;
    let Value::Object(mut header) = header else {
        return Err(fmt_err("header is not a JSON object", PREAMBLE));
    };
    let metadata = header.remove(METADATA_KEY).unwrap_or(Value::Null);
    let mut entries = header
        .iter()
        .map(|(name, v)| tensor_entry(name, v, PREAMBLE).map(|(s, o)| (name.clone(), s, o)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.2);
    let payload = &bytes[payload_start..];
    let mut expected = 0usize;
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, shape, offset) in entries {
        if offset != expected {
            return Err(fmt_err(
                format!("tensor {name:?} starts at payload byte {offset}, expected {expected}"),
                payload_start + offset.min(payload.len()),
            ));
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let end = n.and_then(|n| n.checked_mul(4)).and_then(|b| b.checked_add(offset));
        let end = match end {
            Some(e) if e <= payload.len() => e,
            _ => {
                return Err(fmt_err(
                    format!("truncated payload: tensor {name:?} {shape:?} runs past byte {}", bytes.len()),
                    payload_start + offset,
                ))
            }
        };
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, shape, data));
        expected = end;
    }
    if expected != payload.len() {
        return Err(fmt_err(
            format!("{} unreferenced payload bytes", payload.len() - expected),
            payload_start + expected,
        ));
    }
    Ok(WeightFile { metadata, tensors })
}

impl WeightFile {
    /// Widens every tensor into a store, in payload order.
    pub fn to_store<T: Real>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (name, shape, data) in &self.tensors {
            store.add(name.clone(), DiffArray::new(shape.clone(), data.iter().map(|&v| T::lit(v as f64)).collect())?);
        }
        Ok(store)
    }
}

pub fn save_weights<T: Real>(path: &Path, store: &ParamStore<T>, metadata: Value) -> Result<()> {
    atomic_write(path, &encode_weights(store, metadata)?)
}

pub fn load_weights(path: &Path) -> Result<WeightFile> {
    decode_weights(&read_bytes(path)?).map_err(|e| e.in_file(path))
}

/// Weights plus the network layout under `__metadata__.network`.
pub fn save_model<T: Real>(path: &Path, model: &SymTc<T>) -> Result<()> {
    let meta = json!({ "network": serde_json::to_value(&model.config).expect("config serializes") });
    save_weights(path, &model.store, meta)
}

/// Rebuilds the network from the stored layout and fills in the weights.
pub fn load_model<T: Real>(path: &Path) -> Result<SymTc<T>> {
    let file = load_weights(path)?;
    let cfg = file
        .metadata
        .get("network")
        .cloned()
        .ok_or_else(|| fmt_err("metadata has no \"network\" entry", PREAMBLE).in_file(path))?;
    let cfg: NetworkConfig = serde_json::from_value(cfg).map_err(|e| Error::Config(format!("{}: network: {e}", path.display())))?;
    let store = file.to_store()?;
    // the layout is rebuilt with throwaway values; every slot is overwritten
    SymTc::new(cfg, 0)?.with_store(store).map_err(|e| e.in_file(path))
}
