//! File formats: PGM images and masks, JSON documents (shapes, shape
//! models, configs, manifests) and binary weight files. Every write goes
//! to a temporary file in the target directory and is renamed into place.

pub mod config;
pub mod manifest;
pub mod pgm;
pub mod weights;


use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use config::{run_config_schema, AugmentConfig, OptimizerConfig, RunConfig, Seeds};
pub use manifest::{check_unique_splits, DatasetManifest, SampleRecord};
pub use pgm::{read_image, read_mask, write_image, write_mask, BitDepth};
pub use weights::{load_model, load_weights, save_model, save_weights, WeightFile};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn save_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn load_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}
