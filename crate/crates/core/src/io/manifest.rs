use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pgm::{read_image, read_mask};
use super::{load_json, save_json};
use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::shape_synth::Shape;

/// One image/mask pair. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<PathBuf>,
    /// Id of the reference sample a synthesized image was warped from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// Index of the virtual shape in its batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_index: Option<usize>,
    /// Seed the virtual shape was drawn with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub class_count: usize,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: impl Into<String>, class_count: usize) -> Self {
        Self {
            split: split.into(),
            class_count,
            samples: Vec::new(),
            root: PathBuf::new(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Unique ids, valid references and every referenced file present.
    pub fn check(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Manifest(format!("split {:?}: class_count {} < 2", self.split, self.class_count)));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("split {:?}: duplicate sample id {:?}", self.split, s.id)));
            }
        }
        for s in &self.samples {
            for p in [Some(&s.image), Some(&s.mask), s.shape.as_ref()].into_iter().flatten() {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "split {:?}: sample {:?} references missing file {}",
                        self.split,
                        s.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parses and checks a manifest; nothing is loaded until this passes.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Self = load_json(path)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check().map_err(|e| e.in_file(path))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    /// Every image and mask, in record order.
    pub fn load_samples(&self) -> Result<Vec<(GrayImage, LabelMask)>> {
        self.samples
            .par_iter()
            .map(|s| {
                let image = read_image(&self.resolve(&s.image))?;
                let mask = read_mask(&self.resolve(&s.mask), self.class_count)?;
                if (image.height, image.width) != (mask.height, mask.width) {
                    return Err(Error::Manifest(format!(
                        "sample {:?}: image {}×{} but mask {}×{}",
                        s.id, image.height, image.width, mask.height, mask.width
                    )));
                }
                Ok((image, mask))
            })
            .collect()
    }

    /// Shapes of the records that have one.
    pub fn load_shapes(&self) -> Result<Vec<(String, Shape)>> {
        self.samples
            .iter()
            .filter_map(|s| s.shape.as_ref().map(|p| (s, p)))
            .map(|(s, p)| Ok((s.id.clone(), load_json(&self.resolve(p))?)))
            .collect()
    }
}

pub fn check_unique_splits(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut seen = HashSet::new();
    for m in manifests {
        if !seen.insert(m.split.as_str()) {
            return Err(Error::Manifest(format!("split name {:?} used twice", m.split)));
        }
    }
    Ok(())
}
