//! Multi-head self-attention with a compound sinusoidal relative position
//! embedding, plus the classic additive-position baseline.
//!
//! For token `i` with content row `x_i` and position `p_i` (a 2-vector in
//! `[-1, 1]²`), head queries and keys are stacked from four blocks:
//!
//! ```text
//! q_i = [ c_i ⊙ cos(p_i W1 + b1) ; c_i ⊙ sin(p_i W1 + b1) ; c_i ⊙ cos(p_i W2 + b2) ; c_i ⊙ sin(p_i W2 + b2) ]
//! k_j = [ k_j ⊙ cos(p_j W1)      ; k_j ⊙ sin(p_j W1)      ; cos(p_j W2)           ; sin(p_j W2)           ]
//! ```
//!
//! with `c_i` the content query and `k_j` the content key. By the angle
//! difference identity their dot product only depends on `p_i - p_j`:
//!
//! ```text
//! q_i · k_j = Σ c_i ⊙ k_j ⊙ cos((p_i - p_j) W1 + b1) + Σ c_i ⊙ cos((p_i - p_j) W2 + b2)
//! ```
//!
//! [`RpeParams::dot_block`] and [`RpeParams::dot_closed`] compute the two
//! sides independently. Attention weights are a row softmax of the dot
//! products scaled by `1/sqrt(d_head)`, and the layer output adds a linear
//! map of the attention-weighted relative offsets `Σ_j a_ij (p_i - p_j)` to
//! the usual linear map of the attended values.

mod classic;
mod relative;

pub use classic::{ClassicParams, DecompositionTerms};
pub use relative::{RmhaForward, RpeParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::DiffArray;
use crate::scalar::Real;

/// Tokens and their 2-D positions.
#[derive(Clone, Debug)]
pub struct TokenSet<T> {
    /// n × d_model
    pub x: DiffArray<T>,
    /// n × 2
    pub p: DiffArray<T>,
}

impl<T: Real> TokenSet<T> {
    pub fn new(x: DiffArray<T>, p: DiffArray<T>) -> Result<Self> {
        let (sx, sp) = (x.shape(), p.shape());
        if sx.len() != 2 || sx[0] == 0 || sp != [sx[0], 2] {
            return Err(Error::shape("TokenSet", sx, sp));
        }
        if !x.is_finite() || !p.is_finite() {
            return Err(Error::NonFinite { op: "TokenSet" });
        }
        Ok(Self { x, p })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.x.shape()[1]
    }

    /// Same tokens with every position moved by `delta`.
    pub fn shifted(&self, delta: [T; 2]) -> Self {
        let mut p = self.p.clone();
        for row in p.data_mut().chunks_mut(2) {
            row[0] = row[0] + delta[0];
            row[1] = row[1] + delta[1];
        }
        Self { x: self.x.clone(), p }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.d_model();
        &self.x.data()[i * d..(i + 1) * d]
    }

    pub fn position(&self, i: usize) -> [T; 2] {
        [self.p.data()[2 * i], self.p.data()[2 * i + 1]]
    }
}

/// Patch-center positions of a `rows × cols` token grid, row-major,
/// normalized per axis to `[-1, 1]`; each row is `(x, y)`.
pub fn grid_positions<T: Real>(rows: usize, cols: usize) -> DiffArray<T> {
    let mut data = Vec::with_capacity(rows * cols * 2);
    for r in 0..rows {
        for c in 0..cols {
            data.push(T::lit((c as f64 + 0.5) / cols as f64 * 2.0 - 1.0));
            data.push(T::lit((r as f64 + 0.5) / rows as f64 * 2.0 - 1.0));
        }
    }
    DiffArray::new(vec![rows * cols, 2], data).expect("grid positions")
}

/// Row-stochastic attention weights, one n × n matrix per head.
#[derive(Clone, Debug)]
pub struct AttentionScores<T> {
    pub heads: Vec<DiffArray<T>>,
}

impl<T: Real> AttentionScores<T> {
    /// Largest deviation of a row sum from 1, and whether all entries lie in [0, 1].
    pub fn stochasticity_error(&self) -> (T, bool) {
        let mut worst = T::zero();
        let mut in_range = true;
        for a in &self.heads {
            let n = a.shape()[1];
            for row in a.data().chunks(n) {
                let s: T = row.iter().copied().sum();
                worst = worst.max((s - T::one()).abs());
                in_range &= row.iter().all(|&v| v >= T::zero() && v <= T::one());
            }
        }
        (worst, in_range)
    }
}

/// How content queries and keys are projected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// `x W`
    Linear,
    /// `relu(x W1 + b1) W2 + b2`, hidden width `d_head` per head.
    #[default]
    Mlp,
}

/// Where the relative-offset output term is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PositionTermMode {
    /// Per-head offsets are concatenated (n × 2H) before one linear map.
    #[default]
    PerHead,
    /// Offsets are averaged over heads (n × 2) before the linear map.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpeConfig {
    pub d_model: usize,
    pub heads: usize,
    #[serde(default)]
    pub projection: ProjectionKind,
    /// Separate W1/W2/b1/b2 per head instead of one shared set.
    #[serde(default)]
    pub per_head_frequencies: bool,
    #[serde(default)]
    pub position_term: PositionTermMode,
    #[serde(default = "default_freq_std")]
    pub frequency_init_std: f64,
}

fn default_freq_std() -> f64 {
    3.0
}

impl RpeConfig {
    pub fn new(d_model: usize, heads: usize) -> Self {
        Self {
            d_model,
            heads,
            projection: ProjectionKind::default(),
            per_head_frequencies: false,
            position_term: PositionTermMode::default(),
            frequency_init_std: default_freq_std(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of head count {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Trainable scalar count of one attention layer with this config.
    pub fn param_count(&self) -> usize {
        let (e, h, d) = (self.d_model, self.heads, self.d_head());
        let proj = match self.projection {
            ProjectionKind::Linear => e * e,
            ProjectionKind::Mlp => e * e + e + h * d * d + e,
        };
        let freq_width = if self.per_head_frequencies { e } else { d };
        let pos_in = match self.position_term {
            PositionTermMode::PerHead => 2 * h,
            PositionTermMode::Global => 2,
        };
        2 * proj + e * e + 2 * (2 * freq_width + freq_width) + (e * e + e) + (pos_in * e + e)
    }
}
