//! End-to-end pieces shared by the command line and the acceptance tests:
//! the training loop, path ablations, gradient-check suites and a small
//! synthetic dataset.

pub mod ablate;
pub mod gradcheck;
pub mod train;


pub use ablate::{ablate, ablation_text, ablation_tsv, path_settings, AblationRow, AblationSetting, AblationTraining};
pub use train::{augment_sample, train_model, EpochLog};

use crate::error::Result;
use crate::image::{GrayImage, LabelMask};
use crate::shape_synth::{build_ssm, phantom_shape, render_phantom, Alignment, PhantomConfig, Shape};
use crate::symtc_net::TrainSample;

/// `count` phantoms whose outlines are drawn (within ±2σ per mode) from a
/// shape model fitted to `model_shapes` procedural phantom shapes, so each
/// sample has its own anatomy.
pub fn ssm_phantom_dataset(cfg: &PhantomConfig, count: usize, model_shapes: usize, seed: u64) -> Result<Vec<(GrayImage, LabelMask, Shape)>> {
    let shapes = (0..model_shapes as u64)
        .map(|i| phantom_shape(cfg, seed.wrapping_mul(1000).wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let ssm = build_ssm(&shapes, 0.95, Alignment::Translation)?;
    (0..count as u64)
        .map(|i| {
            let (shape, _) = ssm.sample_seeded(seed.wrapping_add(i), 2.0)?;
            let (img, mask) = render_phantom(&shape, cfg, seed.wrapping_add(100 + i))?;
            Ok((img, mask, shape))
        })
        .collect()
}

/// The desk-scale training set: background, one vertebra and one disc.
pub fn toy_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<TrainSample>> {
    let cfg = PhantomConfig {
        size,
        vertebrae: 1,
        discs: 1,
        ..PhantomConfig::default()
    };
    Ok(ssm_phantom_dataset(&cfg, count, 20, seed)?
        .into_iter()
        .map(|(i, m, _)| (i, m))
        .collect())
}
