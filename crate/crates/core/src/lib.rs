//! Relative-position attention, hybrid CNN/Transformer segmentation and
//! shape-model data synthesis on a small reverse-mode autodiff engine.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the scalar for the common cases.

pub mod error;
pub mod image;
pub mod io;
pub mod loss_metrics;
pub mod ndgrad;
pub mod pipeline;
pub mod rpe_attention;
pub mod scalar;
pub mod shape_synth;
pub mod symtc_net;

pub use error::{Error, Result};
pub use image::{GrayImage, LabelMask};
pub use scalar::Real;

/// Double-precision array, the default for analysis and gradient checks.
pub type Array64 = ndgrad::DiffArray<f64>;
/// Single-precision array.
pub type Array32 = ndgrad::DiffArray<f32>;
/// Double-precision network.
pub type SymTc64 = symtc_net::SymTc<f64>;
/// Single-precision network.
pub type SymTc32 = symtc_net::SymTc<f32>;
