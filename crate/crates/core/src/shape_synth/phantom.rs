//! Procedural sagittal spine phantoms: stacked vertebra and disc outlines
//! with a lordotic curve, and a matching MR-like rendering.

use serde::{Deserialize, Serialize};

use super::raster::rasterize_shape;
use super::{Point, Shape};
use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::ndgrad::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_vertebrae")]
    pub vertebrae: usize,
    /// Disc `i` sits below vertebra `i`; at most one per vertebra.
    #[serde(default = "default_discs")]
    pub discs: usize,
    #[serde(default = "default_points")]
    pub points_per_object: usize,
    /// Relative spread of sizes, curvature and placement.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Std of additive intensity noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_size() -> usize {
    64
}
fn default_vertebrae() -> usize {
    6
}
fn default_discs() -> usize {
    5
}
fn default_points() -> usize {
    16
}
fn default_jitter() -> f64 {
    0.05
}
fn default_noise() -> f64 {
    0.02
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: default_size(),
            vertebrae: default_vertebrae(),
            discs: default_discs(),
            points_per_object: default_points(),
            jitter: default_jitter(),
            noise: default_noise(),
        }
    }
}

impl PhantomConfig {
    /// Labels, background included.
    pub fn class_count(&self) -> usize {
        self.vertebrae + self.discs + 1
    }

    fn validate(&self) -> Result<()> {
        if self.vertebrae == 0 || self.discs > self.vertebrae || self.points_per_object < 3 || self.size < 16 {
            return Err(Error::Config(format!(
                "phantom with {} vertebrae, {} discs, {} points, size {}",
                self.vertebrae, self.discs, self.points_per_object, self.size
            )));
        }
        Ok(())
    }
}

/// Rounded box (superellipse, exponent 4) rotated by `tilt`.
fn rounded_box(center: Point, w: f64, h: f64, tilt: f64, n: usize) -> Vec<Point> {
    let (s, c) = tilt.sin_cos();
    (0..n)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let (st, ct) = th.sin_cos();
            let x = 0.5 * w * ct.signum() * ct.abs().sqrt();
            let y = 0.5 * h * st.signum() * st.abs().sqrt();
            [center[0] + c * x - s * y, center[1] + s * x + c * y]
        })
        .collect()
}

/// Vertebrae first (top to bottom), then discs; labels follow that order.
pub fn phantom_shape(cfg: &PhantomConfig, seed: u64) -> Result<Shape> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let size = cfg.size as f64;
    let j = cfg.jitter;
    let mut z = || rng.truncated_normal(2.0);
    let gap = 0.01 * size;
    let (nv, nd) = (cfg.vertebrae as f64, cfg.discs as f64);
    let hv = (0.8 * size - gap * (nv + nd - 1.0)) / (nv + 0.45 * nd);
    let hd = 0.45 * hv;
    let wv = (0.32 * size).min(1.6 * hv);
    let amp = 0.06 * size * (1.0 + j * 4.0 * z());
    let x0 = 0.5 * size + j * 0.3 * size * z();
    let mut y = 0.1 * size + j * 0.3 * size * z();
    let span = 0.8 * size;
    let top = y;
    let mut vert = Vec::new();
    let mut discs = Vec::new();
    for i in 0..cfg.vertebrae {
        for (is_disc, base_h, base_w) in [(false, hv, wv), (true, hd, 0.9 * wv)] {
            if is_disc && i >= cfg.discs {
                continue;
            }
            let h = base_h * (1.0 + j * z());
            let w = base_w * (1.0 + j * z());
            let t = (y + h / 2.0 - top) / span;
            let cx = x0 + amp * (std::f64::consts::PI * t).sin();
            let slope = amp * std::f64::consts::PI / span * (std::f64::consts::PI * t).cos();
            let tilt = -slope.atan() + j * 0.5 * z();
            let poly = rounded_box([cx, y + h / 2.0], w, h, tilt, cfg.points_per_object);
            if is_disc {
                discs.push(poly);
            } else {
                vert.push(poly);
            }
            y += h + gap;
        }
    }
    vert.extend(discs);
    Ok(Shape::from_polygons(vert))
}

/// MR-like image of `shape`: dark background with a vertical gradient,
/// textured mid-gray vertebrae, bright discs, a 3×3 blur and noise.
pub fn render_phantom(shape: &Shape, cfg: &PhantomConfig, seed: u64) -> Result<(GrayImage, LabelMask)> {
    let n = cfg.size;
    let mask = rasterize_shape(shape, n, n)?;
    let mut rng = SeededRng::new(seed);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let mut raw = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let l = mask.get(r, c) as usize;
            let (x, y) = (c as f64, r as f64);
            raw[r * n + c] = if l == 0 {
                0.12 + 0.08 * y / n as f64
            } else if l <= cfg.vertebrae {
                0.5 + 0.04 * (0.7 * x + phase).sin() * (0.5 * y).cos()
            } else {
                0.82
            };
        }
    }
    let mut data = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut s = 0.0;
            let mut k = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < n && (cc as usize) < n {
                        s += raw[rr as usize * n + cc as usize];
                        k += 1.0;
                    }
                }
            }
            data[r * n + c] = (s / k + cfg.noise * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok((GrayImage::new(n, n, data)?, mask))
}

/// `count` independent phantoms, each from its own derived seed.
pub fn phantom_dataset(cfg: &PhantomConfig, count: usize, seed: u64) -> Result<Vec<(GrayImage, LabelMask, Shape)>> {
    let mut rng = SeededRng::new(seed);
    (0..count)
        .map(|_| {
            let shape = phantom_shape(cfg, rng.int_in(0, i64::MAX) as u64)?;
            let (img, mask) = render_phantom(&shape, cfg, rng.int_in(0, i64::MAX) as u64)?;
            Ok((img, mask, shape))
        })
        .collect()
}
