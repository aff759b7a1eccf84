//! Grayscale images and per-pixel label masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::DiffArray;
use crate::scalar::Real;

/// Row-major H×W intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("GrayImage", &[height, width], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "GrayImage",
                format!("intensity {} at (row {}, col {}) outside [0, 1]", data[i], i / width.max(1), i % width.max(1)),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// `1 × H × W` array for network input.
    pub fn to_array<T: Real>(&self) -> DiffArray<T> {
        DiffArray::new(vec![1, self.height, self.width], self.data.iter().map(|&v| T::lit(v)).collect())
            .expect("image dims")
    }

    /// Content moved by `(dy, dx)` pixels; uncovered pixels take `fill`.
    pub fn shifted(&self, dy: i64, dx: i64, fill: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: shift_plane(&self.data, self.height, self.width, dy, dx, fill),
        }
    }

    /// Mean absolute intensity difference.
    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        s / self.data.len().max(1) as f64
    }
}

/// Row-major H×W class labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("LabelMask", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.data[row * self.width + col] = label;
    }

    /// Fails on the first label that is not below `class_count`.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        match self.data.iter().position(|&l| l as usize >= class_count) {
            Some(i) => Err(Error::LabelOutOfRange {
                label: self.data[i] as u16,
                row: i / self.width,
                col: i % self.width,
                class_count,
            }),
            None => Ok(()),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }

    /// Boolean mask of one class.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == class).collect()
    }

    /// `HW × C` one-hot encoding.
    pub fn one_hot<T: Real>(&self, classes: usize) -> DiffArray<T> {
        let mut out = DiffArray::zeros(&[self.data.len(), classes]);
        let d = out.data_mut();
        for (i, &l) in self.data.iter().enumerate() {
            d[i * classes + l as usize] = T::one();
        }
        out
    }

    pub fn shifted(&self, dy: i64, dx: i64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: shift_plane(&self.data, self.height, self.width, dy, dx, 0),
        }
    }
}

fn shift_plane<V: Copy>(src: &[V], h: usize, w: usize, dy: i64, dx: i64, fill: V) -> Vec<V> {
    let mut out = vec![fill; src.len()];
    for r in 0..h as i64 {
        let sr = r - dy;
        if sr < 0 || sr >= h as i64 {
            continue;
        }
        for c in 0..w as i64 {
            let sc = c - dx;
            if sc >= 0 && sc < w as i64 {
                out[(r * w as i64 + c) as usize] = src[(sr * w as i64 + sc) as usize];
            }
        }
    }
    out
}
