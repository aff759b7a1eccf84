use super::{AttentionScores, PositionTermMode, ProjectionKind, RpeConfig, TokenSet};
use crate::error::Result;
use crate::ndgrad::{init, Bound, DiffArray, ParamId, ParamStore, SeededRng, Tape, Var};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug)]
pub enum Projection {
    Linear {
        w: ParamId,
    },
    Mlp {
        w1: ParamId,
        b1: ParamId,
        /// heads × d_head × d_head, block-diagonal second layer
        w2: ParamId,
        b2: ParamId,
    },
}

/// Trainable arrays of one relative-position attention layer.
#[derive(Clone, Debug)]
pub struct RpeParams {
    pub config: RpeConfig,
    pub query: Projection,
    pub key: Projection,
    /// d_model × d_model
    pub w_v: ParamId,
    /// 2 × d_head (shared) or 2 × d_model (per head)
    pub w1: ParamId,
    pub w2: ParamId,
    pub b1: ParamId,
    pub b2: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub pos_w: ParamId,
    pub pos_b: ParamId,
}

/// Tape handles produced by [`RpeParams::forward`].
pub struct RmhaForward {
    /// n × d_model
    pub out: Var,
    /// one n × n attention matrix per head
    pub attention: Vec<Var>,
}

impl RpeParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: RpeConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (e, h, d) = (config.d_model, config.heads, config.d_head());
        let mut projection = |name: &str, store: &mut ParamStore<T>| match config.projection {
            ProjectionKind::Linear => Projection::Linear {
                w: store.add(format!("{prefix}.{name}.w"), init::fan_in(&[e, e], e, rng)),
            },
            ProjectionKind::Mlp => Projection::Mlp {
                w1: store.add(format!("{prefix}.{name}.w1"), init::fan_in(&[e, e], e, rng)),
                b1: store.add(format!("{prefix}.{name}.b1"), DiffArray::zeros(&[e])),
                w2: store.add(format!("{prefix}.{name}.w2"), init::fan_in(&[h, d, d], d, rng)),
                b2: store.add(format!("{prefix}.{name}.b2"), DiffArray::zeros(&[e])),
            },
        };
        let query = projection("q", store);
        let key = projection("k", store);
        let w_v = store.add(format!("{prefix}.v.w"), init::fan_in(&[e, e], e, rng));
        let fw = if config.per_head_frequencies { e } else { d };
        let std = config.frequency_init_std;
        let w1 = store.add(format!("{prefix}.pos.w1"), init::normal(&[2, fw], std, rng));
        let w2 = store.add(format!("{prefix}.pos.w2"), init::normal(&[2, fw], std, rng));
        let b1 = store.add(format!("{prefix}.pos.b1"), DiffArray::zeros(&[fw]));
        let b2 = store.add(format!("{prefix}.pos.b2"), DiffArray::zeros(&[fw]));
        let out_w = store.add(format!("{prefix}.out.w"), init::fan_in(&[e, e], e, rng));
        let out_b = store.add(format!("{prefix}.out.b"), DiffArray::zeros(&[e]));
        let pos_in = match config.position_term {
            PositionTermMode::PerHead => 2 * h,
            PositionTermMode::Global => 2,
        };
        let pos_w = store.add(format!("{prefix}.out_pos.w"), DiffArray::zeros(&[pos_in, e]));
        let pos_b = store.add(format!("{prefix}.out_pos.b"), DiffArray::zeros(&[e]));
        Ok(Self {
            config,
            query,
            key,
            w_v,
            w1,
            w2,
            b1,
            b2,
            out_w,
            out_b,
            pos_w,
            pos_b,
        })
    }

    fn freq_offset(&self, head: usize) -> usize {
        if self.config.per_head_frequencies {
            head * self.config.d_head()
        } else {
            0
        }
    }

    // ── pointwise forms ──────────────────────────────────────────────

    /// Content projection of one token row for one head.
    pub fn content<T: Real>(&self, store: &ParamStore<T>, proj: &Projection, x: &[T], head: usize) -> Vec<T> {
        let (e, d) = (self.config.d_model, self.config.d_head());
        let col = head * d;
        let affine = |w: &DiffArray<T>, b: Option<&DiffArray<T>>| -> Vec<T> {
            (0..d)
                .map(|c| {
                    let s = (0..e).fold(T::zero(), |s, r| s + x[r] * w.data()[r * e + col + c]);
                    b.map_or(s, |b| s + b.data()[col + c])
                })
                .collect()
        };
        match *proj {
            Projection::Linear { w } => affine(store.get(w), None),
            Projection::Mlp { w1, b1, w2, b2 } => {
                let hidden: Vec<T> = affine(store.get(w1), Some(store.get(b1)))
                    .into_iter()
                    .map(|v| v.max(T::zero()))
                    .collect();
                let (w2, b2) = (store.get(w2), store.get(b2));
                (0..d)
                    .map(|c| {
                        let s = (0..d).fold(T::zero(), |s, r| s + hidden[r] * w2.data()[(head * d + r) * d + c]);
                        s + b2.data()[col + c]
                    })
                    .collect()
            }
        }
    }

    /// `p W` for a frequency matrix, restricted to one head's columns.
    fn phase<T: Real>(&self, store: &ParamStore<T>, w: ParamId, p: [T; 2], head: usize) -> Vec<T> {
        let w = store.get(w);
        let width = w.shape()[1];
        let off = self.freq_offset(head);
        (0..self.config.d_head())
            .map(|c| p[0] * w.data()[off + c] + p[1] * w.data()[width + off + c])
            .collect()
    }

    fn bias<T: Real>(&self, store: &ParamStore<T>, b: ParamId, head: usize) -> Vec<T> {
        let off = self.freq_offset(head);
        store.get(b).data()[off..off + self.config.d_head()].to_vec()
    }

    /// Stacked query `[c⊙cos(pW1+b1), c⊙sin(pW1+b1), c⊙cos(pW2+b2), c⊙sin(pW2+b2)]`.
    pub fn query_vector<T: Real>(&self, store: &ParamStore<T>, x: &[T], p: [T; 2], head: usize) -> Vec<T> {
        let c = self.content(store, &self.query, x, head);
        let b1 = self.bias(store, self.b1, head);
        let b2 = self.bias(store, self.b2, head);
        let t1: Vec<T> = self.phase(store, self.w1, p, head).iter().zip(&b1).map(|(&a, &b)| a + b).collect();
        let t2: Vec<T> = self.phase(store, self.w2, p, head).iter().zip(&b2).map(|(&a, &b)| a + b).collect();
        let mut q = Vec::with_capacity(4 * c.len());
        q.extend(c.iter().zip(&t1).map(|(&v, &t)| v * t.cos()));
        q.extend(c.iter().zip(&t1).map(|(&v, &t)| v * t.sin()));
        q.extend(c.iter().zip(&t2).map(|(&v, &t)| v * t.cos()));
        q.extend(c.iter().zip(&t2).map(|(&v, &t)| v * t.sin()));
        q
    }

    /// Stacked key `[k⊙cos(pW1), k⊙sin(pW1), cos(pW2), sin(pW2)]`.
    pub fn key_vector<T: Real>(&self, store: &ParamStore<T>, x: &[T], p: [T; 2], head: usize) -> Vec<T> {
        let k = self.content(store, &self.key, x, head);
        let t1 = self.phase(store, self.w1, p, head);
        let t2 = self.phase(store, self.w2, p, head);
        let mut out = Vec::with_capacity(4 * k.len());
        out.extend(k.iter().zip(&t1).map(|(&v, &t)| v * t.cos()));
        out.extend(k.iter().zip(&t1).map(|(&v, &t)| v * t.sin()));
        out.extend(t2.iter().map(|t| t.cos()));
        out.extend(t2.iter().map(|t| t.sin()));
        out
    }

    /// Unscaled logit as the dot product of stacked query and key.
    pub fn dot_block<T: Real>(q: &[T], k: &[T]) -> T {
        q.iter().zip(k).map(|(&a, &b)| a * b).sum()
    }

    /// Unscaled logit from the relative offset `dp = p_i - p_j` directly.
    pub fn dot_closed<T: Real>(&self, store: &ParamStore<T>, x_i: &[T], x_j: &[T], dp: [T; 2], head: usize) -> T {
        let c = self.content(store, &self.query, x_i, head);
        let k = self.content(store, &self.key, x_j, head);
        let b1 = self.bias(store, self.b1, head);
        let b2 = self.bias(store, self.b2, head);
        let r1 = self.phase(store, self.w1, dp, head);
        let r2 = self.phase(store, self.w2, dp, head);
        (0..c.len())
            .map(|m| c[m] * k[m] * (r1[m] + b1[m]).cos() + c[m] * (r2[m] + b2[m]).cos())
            .sum()
    }

    // ── tape forward ─────────────────────────────────────────────────

    fn project<T: Real>(&self, t: &Tape<T>, b: &Bound, proj: &Projection, x: Var) -> Result<Vec<Var>> {
        let (h, d) = (self.config.heads, self.config.d_head());
        match *proj {
            Projection::Linear { w } => {
                let full = t.matmul(x, b.var(w))?;
                (0..h).map(|i| t.narrow(full, 1, i * d, d)).collect()
            }
            Projection::Mlp { w1, b1, w2, b2 } => {
                let hid = t.matmul(x, b.var(w1))?;
                let hid = t.add(hid, b.var(b1))?;
                let hid = t.relu(hid)?;
                (0..h)
                    .map(|i| {
                        let hi = t.narrow(hid, 1, i * d, d)?;
                        let wi = t.narrow(b.var(w2), 0, i, 1)?;
                        let wi = t.reshape(wi, &[d, d])?;
                        let bi = t.narrow(b.var(b2), 0, i * d, d)?;
                        let o = t.matmul(hi, wi)?;
                        t.add(o, bi)
                    })
                    .collect()
            }
        }
    }

    fn head_slice<T: Real>(&self, t: &Tape<T>, v: Var, head: usize) -> Result<Var> {
        if self.config.per_head_frequencies {
            let d = self.config.d_head();
            let axis = t.shape(v).len() - 1;
            t.narrow(v, axis, head * d, d)
        } else {
            Ok(v)
        }
    }

    /// Layer forward on `x` (n × d_model) with positions `p` (n × 2).
    pub fn forward<T: Real>(&self, t: &Tape<T>, b: &Bound, x: Var, p: Var) -> Result<RmhaForward> {
        let (h, d) = (self.config.heads, self.config.d_head());
        let cq = self.project(t, b, &self.query, x)?;
        let ck = self.project(t, b, &self.key, x)?;
        let v = t.matmul(x, b.var(self.w_v))?;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut head_out = Vec::with_capacity(h);
        let mut offsets = Vec::with_capacity(h);
        let mut attention = Vec::with_capacity(h);
        for i in 0..h {
            let w1 = self.head_slice(t, b.var(self.w1), i)?;
            let w2 = self.head_slice(t, b.var(self.w2), i)?;
            let b1 = self.head_slice(t, b.var(self.b1), i)?;
            let b2 = self.head_slice(t, b.var(self.b2), i)?;
            let phi1 = t.matmul(p, w1)?;
            let phi2 = t.matmul(p, w2)?;
            let th1 = t.add(phi1, b1)?;
            let th2 = t.add(phi2, b2)?;
            let q = {
                let (c1, s1, c2, s2) = (t.cos(th1)?, t.sin(th1)?, t.cos(th2)?, t.sin(th2)?);
                let blocks = [t.mul(cq[i], c1)?, t.mul(cq[i], s1)?, t.mul(cq[i], c2)?, t.mul(cq[i], s2)?];
                t.concat(&blocks, 1)?
            };
            let k = {
                let (c1, s1) = (t.cos(phi1)?, t.sin(phi1)?);
                let blocks = [t.mul(ck[i], c1)?, t.mul(ck[i], s1)?, t.cos(phi2)?, t.sin(phi2)?];
                t.concat(&blocks, 1)?
            };
            let kt = t.transpose(k)?;
            let logits = t.matmul(q, kt)?;
            let logits = t.scale(logits, scale)?;
            let a = t.softmax(logits)?;
            let vi = t.narrow(v, 1, i * d, d)?;
            head_out.push(t.matmul(a, vi)?);
            // Σ_j a_ij (p_i - p_j) = p_i - (A P)_i for row-stochastic A
            let ap = t.matmul(a, p)?;
            offsets.push(t.sub(p, ap)?);
            attention.push(a);
        }
        let cat = t.concat(&head_out, 1)?;
        let content = t.matmul(cat, b.var(self.out_w))?;
        let content = t.add(content, b.var(self.out_b))?;
        let pos_in = match self.config.position_term {
            PositionTermMode::PerHead => t.concat(&offsets, 1)?,
            PositionTermMode::Global => {
                let mut acc = offsets[0];
                for &o in &offsets[1..] {
                    acc = t.add(acc, o)?;
                }
                t.scale(acc, T::one() / T::lit(h as f64))?
            }
        };
        let pos = t.matmul(pos_in, b.var(self.pos_w))?;
        let pos = t.add(pos, b.var(self.pos_b))?;
        let out = t.add(content, pos)?;
        Ok(RmhaForward { out, attention })
    }

    /// Attention weights per head for a token set.
    pub fn scores<T: Real>(&self, store: &ParamStore<T>, tokens: &TokenSet<T>) -> Result<AttentionScores<T>> {
        let t = Tape::new();
        let b = store.bind_frozen(&t);
        let (x, p) = (t.constant(tokens.x.clone()), t.constant(tokens.p.clone()));
        let f = self.forward(&t, &b, x, p)?;
        Ok(AttentionScores {
            heads: f.attention.iter().map(|&a| t.value(a).clone()).collect(),
        })
    }

    /// Layer output (n × d_model) for a token set.
    pub fn output<T: Real>(&self, store: &ParamStore<T>, tokens: &TokenSet<T>) -> Result<DiffArray<T>> {
        let t = Tape::new();
        let b = store.bind_frozen(&t);
        let (x, p) = (t.constant(tokens.x.clone()), t.constant(tokens.p.clone()));
        let f = self.forward(&t, &b, x, p)?;
        let out = t.value(f.out).clone();
        Ok(out)
    }
}
