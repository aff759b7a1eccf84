use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::ndgrad::kernels::{bilinear_sample, nearest_sample};
use crate::ndgrad::SeededRng;

/// Successive random-grid elastic deformations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ElasticConfig {
    /// Node displacement std as a fraction of the grid cell size.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Nodes per axis of each pass, applied in order.
    #[serde(default = "default_grids")]
    pub grids: Vec<usize>,
}

fn default_sigma() -> f64 {
    0.25
}
fn default_grids() -> Vec<usize> {
    vec![9, 17]
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            sigma: default_sigma(),
            grids: default_grids(),
        }
    }
}

impl ElasticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("elastic sigma {} must be finite and >= 0", self.sigma)));
        }
        if let Some(n) = self.grids.iter().find(|&&n| n < 2) {
            return Err(Error::Config(format!("elastic grid of {n} nodes (need >= 2)")));
        }
        Ok(())
    }
}

/// Per-node displacements of an n×n grid spanning an H×W image.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementGrid {
    pub nodes: usize,
    /// Cell size in pixels along (rows, cols).
    pub cell: (f64, f64),
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

impl DisplacementGrid {
    pub fn sample(height: usize, width: usize, sigma: f64, nodes: usize, rng: &mut SeededRng) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid("elastic_deform", format!("sigma {sigma} must be finite and >= 0")));
        }
        if nodes < 2 || nodes > height.min(width) {
            return Err(Error::invalid(
                "elastic_deform",
                format!("grid of {nodes} nodes must be >= 2 and coarser than the {height}x{width} image"),
            ));
        }
        let cell = ((height - 1) as f64 / (nodes - 1) as f64, (width - 1) as f64 / (nodes - 1) as f64);
        let count = nodes * nodes;
        let mut dy = Vec::with_capacity(count);
        let mut dx = Vec::with_capacity(count);
        for _ in 0..count {
            dy.push(sigma * cell.0 * rng.normal());
            dx.push(sigma * cell.1 * rng.normal());
        }
        Ok(Self { nodes, cell, dy, dx })
    }

    /// Largest node displacement magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.dy.iter().zip(&self.dx).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
    }

    /// Displacement at pixel `(row, col)`, bilinear between nodes.
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        let gy = row as f64 / self.cell.0;
        let gx = col as f64 / self.cell.1;
        (
            bilinear_sample(&self.dy, self.nodes, self.nodes, gx, gy),
            bilinear_sample(&self.dx, self.nodes, self.nodes, gx, gy),
        )
    }

    /// Backward warp: output pixel `p` reads the input at `p + d(p)`.
    pub fn apply(&self, image: &GrayImage, mask: &LabelMask) -> Result<(GrayImage, LabelMask)> {
        let (h, w) = (image.height, image.width);
        if (mask.height, mask.width) != (h, w) {
            return Err(Error::shape("elastic_deform", &[h, w], &[mask.height, mask.width]));
        }
        let mut out = Vec::with_capacity(h * w);
        let mut labels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = self.at(r, c);
                let (y, x) = (r as f64 + dy, c as f64 + dx);
                out.push(bilinear_sample(&image.data, h, w, x, y).clamp(0.0, 1.0));
                labels.push(nearest_sample(&mask.data, h, w, x, y));
            }
        }
        Ok((GrayImage::new(h, w, out)?, LabelMask::new(h, w, labels)?))
    }
}

/// One elastic deformation with an n×n node grid.
pub fn elastic_deform(
    image: &GrayImage,
    mask: &LabelMask,
    sigma: f64,
    grid_nodes: usize,
    seed: u64,
) -> Result<(GrayImage, LabelMask)> {
    let mut rng = SeededRng::new(seed);
    DisplacementGrid::sample(image.height, image.width, sigma, grid_nodes, &mut rng)?.apply(image, mask)
}

/// Every pass of `cfg` in turn, each with its own stream derived from `seed`.
pub fn elastic_augment(image: &GrayImage, mask: &LabelMask, cfg: &ElasticConfig, seed: u64) -> Result<(GrayImage, LabelMask)> {
    let mut rng = SeededRng::new(seed);
    let mut cur = (image.clone(), mask.clone());
    for &n in &cfg.grids {
        let mut pass = rng.fork();
        cur = DisplacementGrid::sample(image.height, image.width, cfg.sigma, n, &mut pass)?.apply(&cur.0, &cur.1)?;
    }
    Ok(cur)
}

/// Integer translation by up to `max_shift` pixels per axis; vacated pixels
/// become 0 intensity and background.
pub fn random_translate(image: &GrayImage, mask: &LabelMask, max_shift: u32, rng: &mut SeededRng) -> (GrayImage, LabelMask) {
    let m = max_shift as i64;
    let dy = rng.int_in(-m, m);
    let dx = rng.int_in(-m, m);
    (image.shifted(dy, dx, 0.0), mask.shifted(dy, dx))
}
