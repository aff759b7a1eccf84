use super::blocks::{Conv, MergeModule, Norm, TcModule};
use super::{NetworkConfig, UpsampleMode};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::ndgrad::{Bound, Conv2dParams, DiffArray, ParamStore, ResizeMode, SeededRng, Tape, Var};
use crate::scalar::Real;

#[derive(Clone, Debug)]
struct Down {
    conv: Conv,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct Up {
    conv: Conv,
    norm: Norm,
    factor: usize,
    mode: UpsampleMode,
}

/// Network layout plus its parameter values.
#[derive(Clone, Debug)]
pub struct SymTc<T> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    encoder: Vec<TcModule>,
    down: Vec<Down>,
    up: Vec<Up>,
    merge: Vec<MergeModule>,
    decoder: Vec<Option<TcModule>>,
    refine: Option<TcModule>,
    head: Conv,
}

/// Logits (C × H × W) and per-pixel class probabilities (HW × C).
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub logits: DiffArray<T>,
    pub probs: DiffArray<T>,
}

impl<T: Real> Prediction<T> {
    /// Arg-max label per pixel.
    pub fn labels(&self) -> Vec<u8> {
        let c = self.probs.shape()[1];
        self.probs
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for k in 1..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Softmax over the class axis of (C × H × W) logits, returned as HW × C.
pub fn pixel_probabilities<T: Real>(t: &Tape<T>, logits: Var) -> Result<Var> {
    let s = t.shape(logits);
    if s.len() != 3 {
        return Err(Error::shape("pixel_probabilities", &s, &[0, 0, 0]));
    }
    let flat = t.reshape(logits, &[s[0], s[1] * s[2]])?;
    let rows = t.transpose(flat)?;
    t.softmax(rows)
}

impl<T: Real> SymTc<T> {
    /// Builds the network with freshly initialized parameters.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let pad = config.pad_mode;
        let ch = config.channels.clone();
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for (l, m) in config.encoder.iter().enumerate() {
            if l > 0 {
                let f = config.factor(l);
                down.push(Down {
                    conv: Conv::new(&mut store, &format!("down{l}"), ch[l - 1], ch[l], f, Conv2dParams::patch(f), true, &mut rng),
                    norm: Norm::new(&mut store, &format!("down{l}.norm"), ch[l]),
                });
            }
            encoder.push(TcModule::new(&mut store, &format!("tcm{l}"), m, pad, &mut rng)?);
        }
        let mut up = Vec::new();
        let mut merge = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..config.levels() - 1).rev() {
            let f = config.factor(l + 1);
            let conv = match config.upsample {
                UpsampleMode::TransposedConv => Conv::transposed(&mut store, &format!("up{l}"), ch[l + 1], ch[l], f, &mut rng),
                UpsampleMode::NearestConv => Conv::new(
                    &mut store,
                    &format!("up{l}"),
                    ch[l + 1],
                    ch[l],
                    3,
                    Conv2dParams::same(3, pad),
                    true,
                    &mut rng,
                ),
            };
            up.push(Up {
                conv,
                norm: Norm::new(&mut store, &format!("up{l}.norm"), ch[l]),
                factor: f,
                mode: config.upsample,
            });
            merge.push(MergeModule::new(&mut store, &format!("merge{l}"), ch[l], ch[l], ch[l], &mut rng));
            decoder.push(match config.decoder.get(l).and_then(|m| m.as_ref()) {
                Some(m) => Some(TcModule::new(&mut store, &format!("dec{l}"), m, pad, &mut rng)?),
                None => None,
            });
        }
        let refine = match &config.refine {
            Some(m) => Some(TcModule::new(&mut store, "refine", m, pad, &mut rng)?),
            None => None,
        };
        let head = Conv::new(&mut store, "head", ch[0], config.class_count, 1, Conv2dParams::default(), true, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            down,
            up,
            merge,
            decoder,
            refine,
            head,
        })
    }

    /// Same layout with new parameter values (names and shapes must match).
    pub fn with_store(mut self, store: ParamStore<T>) -> Result<Self> {
        if store.len() != self.store.len() {
            return Err(Error::Config(format!(
                "parameter set has {} arrays, network needs {}",
                store.len(),
                self.store.len()
            )));
        }
        for (id, (name, v)) in self.store.ids().zip(store.iter()) {
            if self.store.name(id) != name || self.store.get(id).shape() != v.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match network slot {} {:?}",
                    v.shape(),
                    self.store.name(id),
                    self.store.get(id).shape()
                )));
            }
        }
        self.store = store;
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn encoder_modules(&self) -> &[TcModule] {
        &self.encoder
    }

    pub fn refine_module(&self) -> Option<&TcModule> {
        self.refine.as_ref()
    }

    /// Logits (C × H × W) for an input (in_channels × H × W).
    pub fn forward(&self, t: &Tape<T>, b: &Bound, image: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = t.shape(image);
        let want = [cfg.in_channels, cfg.height, cfg.width];
        if s != want {
            return Err(Error::shape("symtc_forward", &s, &want));
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = image;
        for (l, tcm) in self.encoder.iter().enumerate() {
            if l > 0 {
                let d = &self.down[l - 1];
                h = d.conv.forward(t, b, h)?;
                h = d.norm.forward_relu(t, b, h)?;
            }
            h = tcm.forward(t, b, h)?;
            skips.push(h);
        }
        let mut d = skips.pop().expect("at least one level");
        for (i, skip) in skips.into_iter().rev().enumerate() {
            let up = &self.up[i];
            let mut u = d;
            if up.mode == UpsampleMode::NearestConv {
                let s = t.shape(u);
                u = t.resize(u, (s[1] * up.factor, s[2] * up.factor), ResizeMode::Nearest)?;
            }
            u = up.conv.forward(t, b, u)?;
            u = up.norm.forward_relu(t, b, u)?;
            d = self.merge[i].forward(t, b, skip, u)?;
            if let Some(m) = &self.decoder[i] {
                d = m.forward(t, b, d)?;
            }
        }
        if let Some(m) = &self.refine {
            d = m.forward(t, b, d)?;
        }
        self.head.forward(t, b, d)
    }

    fn check_image(&self, image: &GrayImage) -> Result<()> {
        let cfg = &self.config;
        if (image.height, image.width) != (cfg.height, cfg.width) || cfg.in_channels != 1 {
            return Err(Error::shape(
                "symtc_forward",
                &[image.height, image.width],
                &[cfg.in_channels, cfg.height, cfg.width],
            ));
        }
        Ok(())
    }

    /// Inference on a frozen tape.
    pub fn predict(&self, image: &GrayImage) -> Result<Prediction<T>> {
        self.check_image(image)?;
        self.predict_array(&image.to_array())
    }

    pub fn predict_array(&self, input: &DiffArray<T>) -> Result<Prediction<T>> {
        let t = Tape::new();
        let b = self.store.bind_frozen(&t);
        let x = t.constant(input.clone());
        let logits = self.forward(&t, &b, x)?;
        let probs = pixel_probabilities(&t, logits)?;
        let out = Prediction {
            logits: t.value(logits).clone(),
            probs: t.value(probs).clone(),
        };
        Ok(out)
    }
}
