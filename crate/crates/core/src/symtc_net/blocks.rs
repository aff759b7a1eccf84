use super::{norm_groups, TcModuleConfig};
use crate::error::{Error, Result};
use crate::ndgrad::{init, Bound, Conv2dParams, DiffArray, PadMode, ParamId, ParamStore, SeededRng, Tape, Var};
use crate::rpe_attention::{grid_positions, RpeParams};
use crate::scalar::Real;

const NORM_EPS: f64 = 1e-5;

/// Plain or transposed 2-D convolution with an optional bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geometry: Conv2dParams,
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geometry: Conv2dParams,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init::fan_in(&[cout, cin, k, k], cin * k * k, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), DiffArray::zeros(&[cout])));
        Self {
            w,
            b,
            geometry,
            transposed: false,
        }
    }

    /// Transposed convolution with kernel = stride = `k`.
    pub fn transposed<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut SeededRng) -> Self {
        let w = store.add(format!("{name}.w"), init::fan_in(&[cin, cout, k, k], cout * k * k, rng));
        let b = Some(store.add(format!("{name}.b"), DiffArray::zeros(&[cout])));
        Self {
            w,
            b,
            geometry: Conv2dParams::patch(k),
            transposed: true,
        }
    }

    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let bias = self.b.map(|id| b.var(id));
        if self.transposed {
            t.conv_transpose2d(x, b.var(self.w), bias, self.geometry)
        } else {
            t.conv2d(x, b.var(self.w), bias, self.geometry)
        }
    }
}

/// Group norm over a (c×h×w) map with per-channel scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), DiffArray::ones(&[channels, 1, 1])),
            beta: store.add(format!("{name}.beta"), DiffArray::zeros(&[channels, 1, 1])),
            groups: norm_groups(channels),
        }
    }

    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let n = t.group_norm(x, self.groups, T::lit(NORM_EPS))?;
        let n = t.mul(n, b.var(self.gamma))?;
        t.add(n, b.var(self.beta))
    }

    /// Norm then ReLU.
    pub fn forward_relu<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let n = self.forward(t, b, x)?;
        t.relu(n)
    }
}

/// Layer norm over token rows with per-feature scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct TokenNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl TokenNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), DiffArray::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), DiffArray::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let n = t.layer_norm(x, T::lit(NORM_EPS))?;
        let n = t.mul(n, b.var(self.gamma))?;
        t.add(n, b.var(self.beta))
    }
}

/// Residual block: 5×5 → norm/ReLU → 1×1 → norm/ReLU → 3×3, plus an
/// identity or 1×1-projected shortcut, then a final norm/ReLU.
#[derive(Clone, Debug)]
pub struct CnnPath {
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv5: Conv,
    pub norm1: Norm,
    pub conv1: Conv,
    pub norm2: Norm,
    pub conv3: Conv,
    pub norm3: Norm,
    pub shortcut: Option<Conv>,
}

impl CnnPath {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, pad: PadMode, rng: &mut SeededRng) -> Self {
        let conv5 = Conv::new(store, &format!("{prefix}.conv5"), cin, cout, 5, Conv2dParams::same(5, pad), true, rng);
        let norm1 = Norm::new(store, &format!("{prefix}.norm1"), cout);
        let conv1 = Conv::new(store, &format!("{prefix}.conv1"), cout, cout, 1, Conv2dParams::same(1, pad), true, rng);
        let norm2 = Norm::new(store, &format!("{prefix}.norm2"), cout);
        let conv3 = Conv::new(store, &format!("{prefix}.conv3"), cout, cout, 3, Conv2dParams::same(3, pad), true, rng);
        let norm3 = Norm::new(store, &format!("{prefix}.norm3"), cout);
        let shortcut = (cin != cout)
            .then(|| Conv::new(store, &format!("{prefix}.shortcut"), cin, cout, 1, Conv2dParams::same(1, pad), false, rng));
        Self {
            in_channels: cin,
            out_channels: cout,
            conv5,
            norm1,
            conv1,
            norm2,
            conv3,
            norm3,
            shortcut,
        }
    }

    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        check_channels(t, x, self.in_channels, "cnn_path")?;
        let h = self.conv5.forward(t, b, x)?;
        let h = self.norm1.forward_relu(t, b, h)?;
        let h = self.conv1.forward(t, b, h)?;
        let h = self.norm2.forward_relu(t, b, h)?;
        let h = self.conv3.forward(t, b, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(t, b, x)?,
            None => x,
        };
        let h = t.add(h, skip)?;
        self.norm3.forward_relu(t, b, h)
    }
}

/// Pre-norm Transformer block: `x + RMHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: TokenNorm,
    pub attention: RpeParams,
    pub ln2: TokenNorm,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

impl TransformerLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &TcModuleConfig, rng: &mut SeededRng) -> Result<Self> {
        let e = cfg.embed_dim;
        let ln1 = TokenNorm::new(store, &format!("{prefix}.ln1"), e);
        let attention = RpeParams::new(store, &format!("{prefix}.attn"), cfg.attention(), rng)?;
        let ln2 = TokenNorm::new(store, &format!("{prefix}.ln2"), e);
        let ff1_w = store.add(format!("{prefix}.ff1.w"), init::fan_in(&[e, 4 * e], e, rng));
        let ff1_b = store.add(format!("{prefix}.ff1.b"), DiffArray::zeros(&[4 * e]));
        let ff2_w = store.add(format!("{prefix}.ff2.w"), init::fan_in(&[4 * e, e], 4 * e, rng));
        let ff2_b = store.add(format!("{prefix}.ff2.b"), DiffArray::zeros(&[e]));
        Ok(Self {
            ln1,
            attention,
            ln2,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
        })
    }

    /// Tokens `x` (n × E) at positions `p` (n × 2).
    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var, p: Var) -> Result<Var> {
        let h = self.ln1.forward(t, b, x)?;
        let a = self.attention.forward(t, b, h, p)?.out;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, b, x)?;
        let h = t.matmul(h, b.var(self.ff1_w))?;
        let h = t.add(h, b.var(self.ff1_b))?;
        let h = t.relu(h)?;
        let h = t.matmul(h, b.var(self.ff2_w))?;
        let h = t.add(h, b.var(self.ff2_b))?;
        t.add(x, h)
    }
}

/// Patch embedding → Transformer layers over patch tokens → transposed-conv un-patch.
#[derive(Clone, Debug)]
pub struct TransformerPath {
    pub in_channels: usize,
    pub out_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub embed: Conv,
    pub layers: Vec<TransformerLayer>,
    pub unpatch: Conv,
}

impl TransformerPath {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &TcModuleConfig, rng: &mut SeededRng) -> Result<Self> {
        let (p, e) = (cfg.patch_size, cfg.embed_dim);
        let embed = Conv::new(store, &format!("{prefix}.embed"), cfg.in_channels, e, p, Conv2dParams::patch(p), true, rng);
        let layers = (0..cfg.layers)
            .map(|i| TransformerLayer::new(store, &format!("{prefix}.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let unpatch = Conv::transposed(store, &format!("{prefix}.unpatch"), e, cfg.transformer_channels(), p, rng);
        Ok(Self {
            in_channels: cfg.in_channels,
            out_channels: cfg.transformer_channels(),
            patch_size: p,
            embed_dim: e,
            embed,
            layers,
            unpatch,
        })
    }

    /// Number of tokens the attention layers see for an `h × w` input.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        (h / self.patch_size) * (w / self.patch_size)
    }

    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let s = check_channels(t, x, self.in_channels, "transformer_path")?;
        let (h, w, p) = (s[1], s[2], self.patch_size);
        if h % p != 0 || w % p != 0 {
            return Err(Error::invalid(
                "transformer_path",
                format!("extent {h}×{w} not divisible by patch size {p}"),
            ));
        }
        let (gh, gw) = (h / p, w / p);
        let e = self.embed_dim;
        let grid = self.embed.forward(t, b, x)?;
        let flat = t.reshape(grid, &[e, gh * gw])?;
        let mut tokens = t.transpose(flat)?;
        let pos = t.constant(grid_positions(gh, gw));
        for layer in &self.layers {
            tokens = layer.forward(t, b, tokens, pos)?;
        }
        let flat = t.transpose(tokens)?;
        let grid = t.reshape(flat, &[e, gh, gw])?;
        self.unpatch.forward(t, b, grid)
    }
}

/// Parallel CNN and Transformer paths, concatenated, then norm and ReLU.
///
/// A disabled path contributes zero-filled channels, so the module's
/// output width and everything downstream is independent of the switches.
#[derive(Clone, Debug)]
pub struct TcModule {
    pub config: TcModuleConfig,
    pub cnn: Option<CnnPath>,
    pub transformer: Option<TransformerPath>,
    pub norm: Norm,
}

impl TcModule {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &TcModuleConfig,
        pad: PadMode,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !cfg.enable_cnn && !cfg.enable_transformer {
            return Err(Error::Config("TC module needs at least one enabled path".into()));
        }
        let cnn = cfg
            .enable_cnn
            .then(|| CnnPath::new(store, &format!("{prefix}.cnn"), cfg.in_channels, cfg.cnn_channels(), pad, rng));
        let transformer = if cfg.enable_transformer {
            Some(TransformerPath::new(store, &format!("{prefix}.transformer"), cfg, rng)?)
        } else {
            None
        };
        let norm = Norm::new(store, &format!("{prefix}.norm"), cfg.out_channels);
        Ok(Self {
            config: cfg.clone(),
            cnn,
            transformer,
            norm,
        })
    }

    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let s = check_channels(t, x, self.config.in_channels, "tc_module")?;
        let (h, w) = (s[1], s[2]);
        let cnn = match &self.cnn {
            Some(path) => path.forward(t, b, x)?,
            None => t.constant(DiffArray::zeros(&[self.config.cnn_channels(), h, w])),
        };
        let tr = match &self.transformer {
            Some(path) => path.forward(t, b, x)?,
            None => t.constant(DiffArray::zeros(&[self.config.transformer_channels(), h, w])),
        };
        let cat = t.concat(&[cnn, tr], 0)?;
        self.norm.forward_relu(t, b, cat)
    }
}

/// Fuses encoder features `a` with upsampled decoder features `b`:
/// concat → 1×1 conv → norm → ReLU.
#[derive(Clone, Debug)]
pub struct MergeModule {
    pub channels_a: usize,
    pub channels_b: usize,
    pub conv: Conv,
    pub norm: Norm,
}

impl MergeModule {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, ca: usize, cb: usize, cout: usize, rng: &mut SeededRng) -> Self {
        let conv = Conv::new(store, &format!("{prefix}.conv"), ca + cb, cout, 1, Conv2dParams::default(), true, rng);
        let norm = Norm::new(store, &format!("{prefix}.norm"), cout);
        Self {
            channels_a: ca,
            channels_b: cb,
            conv,
            norm,
        }
    }

    /// The 1×1 convolution of the concatenation, before norm and ReLU.
    pub fn fuse<T: Real>(&self, t: &Tape<T>, b: &Bound, a: Var, bv: Var) -> Result<Var> {
        let (sa, sb) = (t.shape(a), t.shape(bv));
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] || sa[0] != self.channels_a || sb[0] != self.channels_b {
            return Err(Error::shape("merge_module", &sa, &sb));
        }
        let cat = t.concat(&[a, bv], 0)?;
        self.conv.forward(t, b, cat)
    }

    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, a: Var, bv: Var) -> Result<Var> {
        let m = self.fuse(t, b, a, bv)?;
        self.norm.forward_relu(t, b, m)
    }
}

fn check_channels<T: Real>(t: &Tape<T>, x: Var, channels: usize, op: &'static str) -> Result<Vec<usize>> {
    let s = t.shape(x);
    if s.len() != 3 || s[0] != channels {
        return Err(Error::shape(op, &s, &[channels]));
    }
    Ok(s)
}
