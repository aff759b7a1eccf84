use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::energy::{fit_transform, EnergyConfig, FitReport};
use super::raster::rasterize_shape;
use super::transform::TransformNet;
use super::{Point, Shape};
use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::ndgrad::kernels::bilinear_sample;
use crate::scalar::Real;

/// `Ĩ(p) = I(T(p))` over an (H×W) output grid, bilinear with clamp-to-edge.
pub fn warp_image<T: Real>(reference: &GrayImage, net: &TransformNet<T>, height: usize, width: usize) -> Result<GrayImage> {
    let pts: Vec<Point> = (0..height)
        .flat_map(|r| (0..width).map(move |c| [c as f64, r as f64]))
        .collect();
    let data = net
        .apply(&pts)
        .into_iter()
        .map(|[x, y]| bilinear_sample(&reference.data, reference.height, reference.width, x, y).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(height, width, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub energy: EnergyConfig,
    /// Samples whose transform folds at more mesh nodes than this allows
    /// are rejected.
    #[serde(default = "default_min_det")]
    pub min_det_fraction: f64,
}

fn default_min_det() -> f64 {
    0.99
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            energy: EnergyConfig::default(),
            min_det_fraction: default_min_det(),
        }
    }
}

/// A synthesized image with the virtual shape's mask as ground truth.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: GrayImage,
    pub mask: LabelMask,
    pub shape: Shape,
    pub fit: FitReport<f64>,
}

/// Fits `T` from the virtual shape onto the reference shape, warps the
/// reference image through it and rasterizes the virtual shape.
pub fn synth_sample(reference_image: &GrayImage, reference_shape: &Shape, virtual_shape: &Shape, cfg: &SynthConfig) -> Result<SynthSample> {
    let (h, w) = (reference_image.height, reference_image.width);
    let fit = fit_transform::<f64>(virtual_shape, reference_shape, h, w, &cfg.energy)?;
    if fit.det_fraction < cfg.min_det_fraction {
        return Err(Error::NotDiffeomorphic {
            fraction: fit.det_fraction,
            required: cfg.min_det_fraction,
        });
    }
    let image = warp_image(reference_image, &fit.net, h, w)?;
    let mask = rasterize_shape(virtual_shape, h, w)?;
    Ok(SynthSample {
        image,
        mask,
        shape: virtual_shape.clone(),
        fit,
    })
}

/// One cell of a references × virtual-shapes product.
#[derive(Clone, Debug)]
pub struct SynthRecord {
    pub reference: usize,
    pub virtual_index: usize,
    pub result: std::result::Result<SynthSample, String>,
}

/// Every reference paired with every virtual shape, in parallel; failures
/// are kept per record rather than aborting the batch.
pub fn synth_dataset(references: &[(GrayImage, Shape)], virtuals: &[Shape], cfg: &SynthConfig) -> Vec<SynthRecord> {
    let pairs: Vec<(usize, usize)> = (0..references.len())
        .flat_map(|r| (0..virtuals.len()).map(move |v| (r, v)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(r, v)| SynthRecord {
            reference: r,
            virtual_index: v,
            result: synth_sample(&references[r].0, &references[r].1, &virtuals[v], cfg).map_err(|e| e.to_string()),
        })
        .collect()
}
