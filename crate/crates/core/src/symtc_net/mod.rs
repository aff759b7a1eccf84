//! Hybrid CNN/Transformer segmentation network.
//!
//! Each TC module runs a residual convolution path and a relative-position
//! Transformer path on the same input, concatenates their channels and
//! applies group norm and ReLU. The network stacks TC modules in a U-shaped
//! encoder/decoder:
//!
//! ```text
//! image ─ TCM-0 ─────────────────────────────── merge ─ TCM-3 ─ head ─ logits
//!            └ down ×4 ─ TCM-1 ──────── merge ─ up ×4
//!                           └ down ×4 ─ TCM-2 ─ up ×4
//! ```
//!
//! Downsampling uses stride-4 convolutions, upsampling uses transposed
//! convolutions (or nearest resize plus convolution), and a merge is
//! concat → 1×1 conv → group norm → ReLU.

mod blocks;
mod model;
mod train;

pub use blocks::{CnnPath, Conv, MergeModule, Norm, TcModule, TokenNorm, TransformerLayer, TransformerPath};
pub use model::{pixel_probabilities, Prediction, SymTc};
pub use train::{Adam, AdamConfig, StepReport, TrainSample};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::PadMode;
use crate::rpe_attention::{PositionTermMode, ProjectionKind, RpeConfig};

/// Hyperparameters of one TC module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TcModuleConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    #[serde(default = "yes")]
    pub enable_cnn: bool,
    #[serde(default = "yes")]
    pub enable_transformer: bool,
    #[serde(default)]
    pub projection: ProjectionKind,
    #[serde(default)]
    pub per_head_frequencies: bool,
    #[serde(default)]
    pub position_term: PositionTermMode,
}

fn yes() -> bool {
    true
}

impl TcModuleConfig {
    pub fn new(in_channels: usize, out_channels: usize, patch_size: usize, layers: usize, embed_dim: usize, heads: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            patch_size,
            layers,
            embed_dim,
            heads,
            enable_cnn: true,
            enable_transformer: true,
            projection: ProjectionKind::default(),
            per_head_frequencies: false,
            position_term: PositionTermMode::default(),
        }
    }

    /// Channels produced by the convolution path.
    pub fn cnn_channels(&self) -> usize {
        self.out_channels / 2
    }

    /// Channels produced by the Transformer path.
    pub fn transformer_channels(&self) -> usize {
        self.out_channels - self.cnn_channels()
    }

    pub fn attention(&self) -> RpeConfig {
        RpeConfig {
            projection: self.projection,
            per_head_frequencies: self.per_head_frequencies,
            position_term: self.position_term,
            ..RpeConfig::new(self.embed_dim, self.heads)
        }
    }

    /// Checks path switches, channel splits and that `extent` tiles into patches.
    pub fn validate(&self, extent: (usize, usize)) -> Result<()> {
        if !self.enable_cnn && !self.enable_transformer {
            return Err(Error::Config("TC module needs at least one enabled path".into()));
        }
        if self.in_channels == 0 || self.out_channels < 2 {
            return Err(Error::Config(format!(
                "TC module channels {}→{} (need ≥ 2 outputs to split across paths)",
                self.in_channels, self.out_channels
            )));
        }
        if self.patch_size == 0 || !extent.0.is_multiple_of(self.patch_size) || !extent.1.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "extent {}×{} is not divisible by patch size {}",
                extent.0, extent.1, self.patch_size
            )));
        }
        if self.enable_transformer {
            self.attention().validate()?;
        }
        Ok(())
    }
}

/// How decoder features are brought up to the next finer level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    TransposedConv,
    /// Nearest-neighbour resize followed by a 3×3 convolution.
    NearestConv,
}

/// Whole-network architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    pub class_count: usize,
    /// Feature channels per level, finest first.
    pub channels: Vec<usize>,
    /// Downsampling factor of each level relative to the input.
    pub strides: Vec<usize>,
    /// One TC module per level.
    pub encoder: Vec<TcModuleConfig>,
    /// Optional TC module after the merge at each non-bottleneck level.
    #[serde(default)]
    pub decoder: Vec<Option<TcModuleConfig>>,
    /// Optional TC module on the finest decoder features.
    #[serde(default)]
    pub refine: Option<TcModuleConfig>,
    #[serde(default)]
    pub upsample: UpsampleMode,
    #[serde(default)]
    pub pad_mode: PadMode,
}

fn one() -> usize {
    1
}

impl NetworkConfig {
    /// 64×64 desk-scale network: channels {8,16,32}, strides {1,4,16},
    /// embed 32, 4 heads, 2 layers, patches {8,4,1} plus an 8-patch refine module.
    pub fn toy(class_count: usize) -> Self {
        Self::scaled(64, class_count, [8, 16, 32], 32, 4, [8, 4, 1, 8])
    }

    /// Full-size 512×512 network: channels {32,128,512}, embed 512, 16 heads,
    /// patches {16,4,1} plus a 16-patch refine module.
    pub fn paper_scale(class_count: usize) -> Self {
        Self::scaled(512, class_count, [32, 128, 512], 512, 16, [16, 4, 1, 16])
    }

    /// 8×8 single-level network with one small TC module.
    pub fn micro(class_count: usize) -> Self {
        Self {
            height: 8,
            width: 8,
            in_channels: 1,
            class_count,
            channels: vec![4],
            strides: vec![1],
            encoder: vec![TcModuleConfig::new(1, 4, 4, 1, 4, 2)],
            decoder: vec![],
            refine: None,
            upsample: UpsampleMode::default(),
            pad_mode: PadMode::Zeros,
        }
    }

    fn scaled(size: usize, class_count: usize, ch: [usize; 3], embed: usize, heads: usize, patch: [usize; 4]) -> Self {
        let enc = |i: usize, cin: usize| TcModuleConfig::new(cin, ch[i], patch[i], 2, embed, heads);
        Self {
            height: size,
            width: size,
            in_channels: 1,
            class_count,
            channels: ch.to_vec(),
            strides: vec![1, 4, 16],
            encoder: vec![enc(0, 1), enc(1, ch[1]), enc(2, ch[2])],
            decoder: vec![None, None],
            refine: Some(TcModuleConfig::new(ch[0], ch[0], patch[3], 2, embed, heads)),
            upsample: UpsampleMode::default(),
            pad_mode: PadMode::Zeros,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial extent of level `l`.
    pub fn extent(&self, l: usize) -> (usize, usize) {
        (self.height / self.strides[l], self.width / self.strides[l])
    }

    /// Stride ratio between level `l` and level `l - 1`.
    pub fn factor(&self, l: usize) -> usize {
        self.strides[l] / self.strides[l - 1]
    }

    /// All TC modules in TCM order: encoder levels, then decoder, then refine.
    pub fn tc_modules(&self) -> Vec<&TcModuleConfig> {
        let mut v: Vec<&TcModuleConfig> = self.encoder.iter().collect();
        v.extend(self.decoder.iter().flatten());
        v.extend(self.refine.iter());
        v
    }

    /// Mutable access to the TC modules in the order of [`Self::tc_modules`].
    pub fn tc_modules_mut(&mut self) -> Vec<&mut TcModuleConfig> {
        let mut v: Vec<&mut TcModuleConfig> = self.encoder.iter_mut().collect();
        v.extend(self.decoder.iter_mut().flatten());
        v.extend(self.refine.iter_mut());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if self.class_count < 2 {
            return Err(Error::Config(format!("class_count {} < 2", self.class_count)));
        }
        if levels == 0 || self.strides.len() != levels || self.encoder.len() != levels {
            return Err(Error::Config(format!(
                "{} channel levels, {} strides and {} encoder modules must agree and be non-empty",
                levels,
                self.strides.len(),
                self.encoder.len()
            )));
        }
        if !self.decoder.is_empty() && self.decoder.len() != levels - 1 {
            return Err(Error::Config(format!(
                "decoder list has {} entries, expected {} (one per non-bottleneck level)",
                self.decoder.len(),
                levels - 1
            )));
        }
        if self.strides[0] != 1 {
            return Err(Error::Config("first level must have stride 1".into()));
        }
        for l in 1..levels {
            if self.strides[l] <= self.strides[l - 1] || !self.strides[l].is_multiple_of(self.strides[l - 1]) {
                return Err(Error::Config(format!("stride {} is not a multiple of {}", self.strides[l], self.strides[l - 1])));
            }
        }
        let top = self.strides[levels - 1];
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(top) || !self.width.is_multiple_of(top) {
            return Err(Error::Config(format!(
                "input {}×{} not divisible by max stride {}",
                self.height, self.width, top
            )));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for (l, m) in self.encoder.iter().enumerate() {
            let cin = if l == 0 { self.in_channels } else { self.channels[l] };
            check_io(m, cin, self.channels[l], &format!("encoder {l}"))?;
            m.validate(self.extent(l))?;
        }
        for (l, m) in self.decoder.iter().enumerate() {
            if let Some(m) = m {
                check_io(m, self.channels[l], self.channels[l], &format!("decoder {l}"))?;
                m.validate(self.extent(l))?;
            }
        }
        if let Some(m) = &self.refine {
            check_io(m, self.channels[0], self.channels[0], "refine")?;
            m.validate(self.extent(0))?;
        }
        Ok(())
    }
}

fn check_io(m: &TcModuleConfig, cin: usize, cout: usize, which: &str) -> Result<()> {
    if m.in_channels != cin || m.out_channels != cout {
        return Err(Error::Config(format!(
            "{which} TC module is {}→{} channels, level plan needs {cin}→{cout}",
            m.in_channels, m.out_channels
        )));
    }
    Ok(())
}

/// Group count for group norm over `channels`: the largest divisor not above 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Trainable scalars of each part of a TC module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct TcParamCounts {
    pub cnn: usize,
    pub transformer: usize,
    pub norm: usize,
}

impl TcParamCounts {
    pub fn total(&self) -> usize {
        self.cnn + self.transformer + self.norm
    }
}

fn conv_count(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cin * cout * k * k + if bias { cout } else { 0 }
}

/// Parameters of a convolution path `cin → c` regardless of the enable switch.
pub fn cnn_path_param_count(cin: usize, c: usize) -> usize {
    let shortcut = if cin == c { 0 } else { conv_count(cin, c, 1, false) };
    conv_count(cin, c, 5, true) + conv_count(c, c, 1, true) + conv_count(c, c, 3, true) + 3 * 2 * c + shortcut
}

/// Parameters of a Transformer path regardless of the enable switch.
pub fn transformer_path_param_count(cfg: &TcModuleConfig) -> usize {
    let (e, p) = (cfg.embed_dim, cfg.patch_size);
    let layer = 2 * (2 * e) + cfg.attention().param_count() + (e * 4 * e + 4 * e) + (4 * e * e + e);
    conv_count(cfg.in_channels, e, p, true) + cfg.layers * layer + conv_count(e, cfg.transformer_channels(), p, true)
}

/// Split parameter count of one TC module.
pub fn tc_param_counts(cfg: &TcModuleConfig) -> TcParamCounts {
    TcParamCounts {
        cnn: if cfg.enable_cnn {
            cnn_path_param_count(cfg.in_channels, cfg.cnn_channels())
        } else {
            0
        },
        transformer: if cfg.enable_transformer {
            transformer_path_param_count(cfg)
        } else {
            0
        },
        norm: 2 * cfg.out_channels,
    }
}

/// Exact trainable-scalar count of a network.
pub fn param_count(cfg: &NetworkConfig) -> Result<usize> {
    cfg.validate()?;
    let mut n: usize = cfg.tc_modules().iter().map(|m| tc_param_counts(m).total()).sum();
    let ch = &cfg.channels;
    for l in 1..cfg.levels() {
        let f = cfg.factor(l);
        // downsampling block
        n += conv_count(ch[l - 1], ch[l], f, true) + 2 * ch[l];
        // upsampling block
        n += match cfg.upsample {
            UpsampleMode::TransposedConv => conv_count(ch[l], ch[l - 1], f, true),
            UpsampleMode::NearestConv => conv_count(ch[l], ch[l - 1], 3, true),
        } + 2 * ch[l - 1];
        // merge module
        n += conv_count(2 * ch[l - 1], ch[l - 1], 1, true) + 2 * ch[l - 1];
    }
    n += conv_count(ch[0], cfg.class_count, 1, true);
    Ok(n)
}
