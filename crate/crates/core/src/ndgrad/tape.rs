//! Wengert-style tape: ops append records during the forward pass,
//! `backward` replays them in reverse.

use std::cell::{Ref, RefCell};

use super::array::DiffArray;
use super::kernels::{self, BilinearTap, Conv2dParams, ResizeMode};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    /// Elementwise map with its derivative saved at forward time.
    Unary {
        a: usize,
        deriv: Vec<T>,
    },
    /// Same-shape elementwise map of two inputs with saved partials.
    Pair {
        a: usize,
        b: usize,
        da: Vec<T>,
        db: Vec<T>,
    },
    Scale {
        a: usize,
        s: T,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        a: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    SumAxis {
        a: usize,
    },
    SumAll {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        p: Conv2dParams,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        p: Conv2dParams,
    },
    Resample {
        a: usize,
        map: Vec<(usize, usize, T)>,
        planes: usize,
        in_plane: usize,
        out_plane: usize,
    },
    GroupNorm {
        a: usize,
        groups: usize,
        inv_std: Vec<T>,
    },
    LayerNorm {
        a: usize,
        inv_std: Vec<T>,
    },
    GridSample {
        input: usize,
        grid: usize,
        taps: Vec<BilinearTap<T>>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Pair { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Unary { a, .. }
            | Op::Scale { a, .. }
            | Op::Reshape { a }
            | Op::Transpose { a, .. }
            | Op::Narrow { a, .. }
            | Op::SumAxis { a }
            | Op::SumAll { a }
            | Op::Softmax { a }
            | Op::Resample { a, .. }
            | Op::GroupNorm { a, .. }
            | Op::LayerNorm { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::GridSample { input, grid, .. } => vec![*input, *grid],
        }
    }
}

struct Node<T> {
    value: DiffArray<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record. One tape per forward/backward pass; not shared
/// between threads while recording.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf that reaches it.
pub struct Gradients<T> {
    grads: Vec<Option<DiffArray<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&DiffArray<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` does not reach the root.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> DiffArray<T> {
        self.get(v).cloned().unwrap_or_else(|| DiffArray::zeros(like))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: gradients flow to it.
    pub fn leaf(&self, value: DiffArray<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: DiffArray<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, DiffArray<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    fn push_unchecked(&self, value: DiffArray<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: DiffArray<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary(&self, name: &'static str, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let out_shape = kernels::broadcast_shape(va.shape(), vb.shape())
                .ok_or_else(|| Error::shape(name, va.shape(), vb.shape()))?;
            let (da, db) = (va.data(), vb.data());
            let f = |x: T, y: T| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            let data = if va.shape() == vb.shape() {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let ia = kernels::broadcast_index(va.shape(), &out_shape);
                let ib = kernels::broadcast_index(vb.shape(), &out_shape);
                ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
            };
            DiffArray::new(out_shape, data)?
        };
        self.push(name, value, Op::Binary { kind, a: a.0, b: b.0 })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", BinaryKind::Div, a, b)
    }

    /// Elementwise map `x ↦ (f(x), f'(x))`.
    pub fn map(&self, name: &'static str, a: Var, f: impl Fn(T) -> (T, T)) -> Result<Var> {
        let (value, deriv) = {
            let va = self.value(a);
            let (vals, ders): (Vec<T>, Vec<T>) = va.data().iter().map(|&x| f(x)).unzip();
            (DiffArray::new(va.shape().to_vec(), vals)?, ders)
        };
        self.push(name, value, Op::Unary { a: a.0, deriv })
    }

    /// Same-shape elementwise map `(x, y) ↦ (f, ∂f/∂x, ∂f/∂y)`.
    pub fn map2(&self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> (T, T, T)) -> Result<Var> {
        let (value, da, db) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if va.shape() != vb.shape() {
                return Err(Error::shape(name, va.shape(), vb.shape()));
            }
            let n = va.len();
            let (mut vals, mut da, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for (&x, &y) in va.data().iter().zip(vb.data()) {
                let (v, dx, dy) = f(x, y);
                vals.push(v);
                da.push(dx);
                db.push(dy);
            }
            (DiffArray::new(va.shape().to_vec(), vals)?, da, db)
        };
        self.push(name, value, Op::Pair { a: a.0, b: b.0, da, db })
    }

    pub fn scale(&self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale { a: a.0, s })
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Result<Var> {
        self.map("add_scalar", a, |x| (x + c, T::one()))
    }

    pub fn sin(&self, a: Var) -> Result<Var> {
        self.map("sin", a, |x| (x.sin(), x.cos()))
    }

    pub fn cos(&self, a: Var) -> Result<Var> {
        self.map("cos", a, |x| (x.cos(), -x.sin()))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.map("exp", a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.map("log", a, |x| (x.ln(), x.recip()))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x > T::zero() { (x, T::one()) } else { (T::zero(), T::zero()) })
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.map("sqrt", a, |x| {
            let s = x.sqrt();
            (s, T::lit(0.5) / s)
        })
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.map("square", a, |x| (x * x, x + x))
    }

    pub fn powf(&self, a: Var, p: T) -> Result<Var> {
        self.map("powf", a, |x| (x.powf(p), p * x.powf(p - T::one())))
    }

    /// `max(x, lo)`; the derivative is zero where clamping is active.
    pub fn clamp_min(&self, a: Var, lo: T) -> Result<Var> {
        self.map("clamp_min", a, |x| if x > lo { (x, T::one()) } else { (lo, T::zero()) })
    }

    // ── linear algebra and shape ─────────────────────────────────────

    /// (m×k) · (k×n)
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (va.shape(), vb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let c = kernels::matmul(va.data(), vb.data(), m, k, n);
            (DiffArray::new(vec![m, n], c)?, m, k, n)
        };
        self.push("matmul", value, Op::MatMul { a: a.0, b: b.0, m, k, n })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a: a.0 })
    }

    /// Transpose of a 2-D array.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (value, rows, cols) = {
            let va = self.value(a);
            if va.ndim() != 2 {
                return Err(Error::invalid("transpose", format!("expected 2-D, got {:?}", va.shape())));
            }
            let (r, c) = (va.shape()[0], va.shape()[1]);
            (DiffArray::new(vec![c, r], kernels::transpose2(va.data(), r, c))?, r, c)
        };
        self.push("transpose", value, Op::Transpose { a: a.0, rows, cols })
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no operands"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut out_shape = first.clone();
            out_shape[axis] = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(Error::shape("concat", &first, s));
                }
                out_shape[axis] += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.0].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            DiffArray::new(out_shape, data)?
        };
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let s = va.shape();
            if axis >= s.len() || start + len > s[axis] {
                return Err(Error::invalid(
                    "narrow",
                    format!("[{start}, {}) out of range on axis {axis} of {s:?}", start + len),
                ));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * s[axis] + start) * inner;
                data.extend_from_slice(&va.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            DiffArray::new(shape, data)?
        };
        self.push("narrow", value, Op::Narrow { a: a.0, axis, start })
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let s = va.shape();
            if axis >= s.len() {
                return Err(Error::invalid("sum_axis", format!("axis {axis} out of range for {s:?}")));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..s[axis] {
                    let src = &va.data()[(o * s[axis] + k) * inner..(o * s[axis] + k + 1) * inner];
                    for (d, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d = *d + x;
                    }
                }
            }
            let mut shape = s.to_vec();
            shape[axis] = 1;
            DiffArray::new(shape, data)?
        };
        self.push("sum_axis", value, Op::SumAxis { a: a.0 })
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.value(a).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum of every element, as a 0-d array.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let value = DiffArray::scalar(self.value(a).data().iter().copied().sum());
        self.push("sum", value, Op::SumAll { a: a.0 })
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let l = *va.shape().last().ok_or_else(|| Error::invalid("softmax", "0-d input"))?;
            let mut data = va.data().to_vec();
            for row in data.chunks_mut(l.max(1)) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z = z + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / z;
                }
            }
            DiffArray::new(va.shape().to_vec(), data)?
        };
        self.push("softmax", value, Op::Softmax { a: a.0 })
    }

    // ── convolution ──────────────────────────────────────────────────

    /// 2-D convolution of a (c×h×w) input with (o×c×kh×kw) weights.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (sx, sw) = (vx.shape(), vw.shape());
            if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
                return Err(Error::shape("conv2d", sx, sw));
            }
            let (c, h, wd) = (sx[0], sx[1], sx[2]);
            let (o, kh, kw) = (sw[0], sw[2], sw[3]);
            let (oh, ow) = p
                .out_extent(h, wd, kh, kw)
                .ok_or_else(|| Error::shape("conv2d", sx, sw))?;
            let cols = kernels::im2col(vx.data(), (c, h, wd), (kh, kw), &p, (oh, ow));
            let mut y = kernels::matmul(vw.data(), &cols, o, c * kh * kw, oh * ow);
            if let Some(b) = b {
                let vb = &nodes[b.0].value;
                if vb.shape() != [o] {
                    return Err(Error::shape("conv2d bias", vb.shape(), &[o]));
                }
                add_channel_bias(&mut y, vb.data(), oh * ow);
            }
            DiffArray::new(vec![o, oh, ow], y)?
        };
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                p,
            },
        )
    }

    /// Transposed 2-D convolution of a (cin×h×w) input with (cin×cout×kh×kw) weights.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (sx, sw) = (vx.shape(), vw.shape());
            if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[0] {
                return Err(Error::shape("conv_transpose2d", sx, sw));
            }
            let (cin, h, wd) = (sx[0], sx[1], sx[2]);
            let (cout, kh, kw) = (sw[1], sw[2], sw[3]);
            let (oh, ow) = p
                .transposed_extent(h, wd, kh, kw)
                .ok_or_else(|| Error::shape("conv_transpose2d", sx, sw))?;
            let ck = cout * kh * kw;
            let cols = kernels::matmul_at(vw.data(), vx.data(), ck, cin, h * wd);
            let mut y = kernels::col2im(&cols, (cout, oh, ow), (kh, kw), &p, (h, wd));
            if let Some(b) = b {
                let vb = &nodes[b.0].value;
                if vb.shape() != [cout] {
                    return Err(Error::shape("conv_transpose2d bias", vb.shape(), &[cout]));
                }
                add_channel_bias(&mut y, vb.data(), oh * ow);
            }
            DiffArray::new(vec![cout, oh, ow], y)?
        };
        self.push(
            "conv_transpose2d",
            value,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                p,
            },
        )
    }

    // ── resampling ───────────────────────────────────────────────────

    /// Resize the trailing two axes of a (…×h×w) array.
    pub fn resize(&self, a: Var, out: (usize, usize), mode: ResizeMode) -> Result<Var> {
        let (value, map, planes, in_plane, out_plane) = {
            let va = self.value(a);
            let s = va.shape();
            if s.len() < 2 || out.0 == 0 || out.1 == 0 {
                return Err(Error::invalid("resize", format!("cannot resize {s:?} to {out:?}")));
            }
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes: usize = s[..s.len() - 2].iter().product();
            let map = kernels::resize_map::<T>((h, w), out, mode);
            let (in_plane, out_plane) = (h * w, out.0 * out.1);
            let mut data = vec![T::zero(); planes * out_plane];
            for pl in 0..planes {
                for &(o, i, wt) in &map {
                    let d = &mut data[pl * out_plane + o];
                    *d = *d + wt * va.data()[pl * in_plane + i];
                }
            }
            let mut shape = s.to_vec();
            let r = shape.len();
            shape[r - 2] = out.0;
            shape[r - 1] = out.1;
            (DiffArray::new(shape, data)?, map, planes, in_plane, out_plane)
        };
        self.push(
            "resize",
            value,
            Op::Resample {
                a: a.0,
                map,
                planes,
                in_plane,
                out_plane,
            },
        )
    }

    /// Bilinear backward warp: output `[c, y, x] = input[c](grid[y, x])`,
    /// with grid holding index-space `(x, y)` pairs, clamp-to-edge outside.
    pub fn grid_sample(&self, input: Var, grid: Var) -> Result<Var> {
        let (value, taps) = {
            let nodes = self.nodes.borrow();
            let (vi, vg) = (&nodes[input.0].value, &nodes[grid.0].value);
            let (si, sg) = (vi.shape(), vg.shape());
            if si.len() != 3 || sg.len() != 3 || sg[2] != 2 {
                return Err(Error::shape("grid_sample", si, sg));
            }
            let (c, h, w) = (si[0], si[1], si[2]);
            let (oh, ow) = (sg[0], sg[1]);
            let taps: Vec<BilinearTap<T>> = vg
                .data()
                .chunks(2)
                .map(|xy| kernels::bilinear_tap(xy[0], xy[1], h, w))
                .collect();
            let mut data = vec![T::zero(); c * oh * ow];
            for ch in 0..c {
                let plane = &vi.data()[ch * h * w..(ch + 1) * h * w];
                for (p, tap) in taps.iter().enumerate() {
                    let mut v = T::zero();
                    for k in 0..4 {
                        v = v + tap.wt[k] * plane[tap.idx[k]];
                    }
                    data[ch * oh * ow + p] = v;
                }
            }
            (DiffArray::new(vec![c, oh, ow], data)?, taps)
        };
        self.push(
            "grid_sample",
            value,
            Op::GridSample {
                input: input.0,
                grid: grid.0,
                taps,
            },
        )
    }

    // ── normalization ────────────────────────────────────────────────

    /// Group normalization of a (c×…) array without affine terms.
    pub fn group_norm(&self, a: Var, groups: usize, eps: T) -> Result<Var> {
        let (value, inv_std) = {
            let va = self.value(a);
            let s = va.shape();
            if s.is_empty() || groups == 0 || !s[0].is_multiple_of(groups) {
                return Err(Error::invalid(
                    "group_norm",
                    format!("{groups} groups do not divide channels of {s:?}"),
                ));
            }
            let gsize = va.len() / groups;
            let mut data = va.data().to_vec();
            let mut inv = Vec::with_capacity(groups);
            for chunk in data.chunks_mut(gsize) {
                inv.push(normalize_in_place(chunk, eps));
            }
            (DiffArray::new(s.to_vec(), data)?, inv)
        };
        self.push("group_norm", value, Op::GroupNorm { a: a.0, groups, inv_std })
    }

    /// Normalization over the last axis without affine terms.
    pub fn layer_norm(&self, a: Var, eps: T) -> Result<Var> {
        let (value, inv_std) = {
            let va = self.value(a);
            let l = *va.shape().last().ok_or_else(|| Error::invalid("layer_norm", "0-d input"))?;
            let mut data = va.data().to_vec();
            let inv = data.chunks_mut(l.max(1)).map(|row| normalize_in_place(row, eps)).collect();
            (DiffArray::new(va.shape().to_vec(), data)?, inv)
        };
        self.push("layer_norm", value, Op::LayerNorm { a: a.0, inv_std })
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let rv = &nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            for i in node.op.inputs() {
                if i >= id {
                    return Err(Error::Cycle { node: id, input: i });
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let contributions = backprop_node(&nodes, id, &g);
            for (input, contrib) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a = *a + c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(nodes[i].op, Op::Leaf))
                    .map(|g| DiffArray::new(nodes[i].value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], plane: usize) {
    for (ch, &bv) in bias.iter().enumerate() {
        for v in &mut y[ch * plane..(ch + 1) * plane] {
            *v = *v + bv;
        }
    }
}

/// Normalize `xs` to zero mean and unit variance; returns 1/σ.
fn normalize_in_place<T: Real>(xs: &mut [T], eps: T) -> T {
    let n = T::lit(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv = (var + eps).sqrt().recip();
    for x in xs.iter_mut() {
        *x = (*x - mean) * inv;
    }
    inv
}

/// Backward of the normalization: `y` is the normalized output.
fn normalize_backward<T: Real>(g: &[T], y: &[T], inv: T) -> Vec<T> {
    let n = T::lit(g.len() as f64);
    let sg: T = g.iter().copied().sum();
    let sgy: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
    g.iter()
        .zip(y)
        .map(|(&gi, &yi)| inv / n * (n * gi - sg - yi * sgy))
        .collect()
}

fn backprop_node<T: Real>(nodes: &[Node<T>], id: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Binary { kind, a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let out = node.value.shape();
            let ia = kernels::broadcast_index(va.shape(), out);
            let ib = kernels::broadcast_index(vb.shape(), out);
            let mut ga = vec![T::zero(); va.len()];
            let mut gb = vec![T::zero(); vb.len()];
            let (da, db) = (va.data(), vb.data());
            for (k, &gk) in g.iter().enumerate() {
                let (i, j) = (ia[k], ib[k]);
                match kind {
                    BinaryKind::Add => {
                        ga[i] = ga[i] + gk;
                        gb[j] = gb[j] + gk;
                    }
                    BinaryKind::Sub => {
                        ga[i] = ga[i] + gk;
                        gb[j] = gb[j] - gk;
                    }
                    BinaryKind::Mul => {
                        ga[i] = ga[i] + gk * db[j];
                        gb[j] = gb[j] + gk * da[i];
                    }
                    BinaryKind::Div => {
                        ga[i] = ga[i] + gk / db[j];
                        gb[j] = gb[j] - gk * da[i] / (db[j] * db[j]);
                    }
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Unary { a, deriv } => vec![(*a, g.iter().zip(deriv).map(|(&x, &d)| x * d).collect())],
        Op::Pair { a, b, da, db } => vec![
            (*a, g.iter().zip(da).map(|(&x, &d)| x * d).collect()),
            (*b, g.iter().zip(db).map(|(&x, &d)| x * d).collect()),
        ],
        Op::Scale { a, s } => vec![(*a, g.iter().map(|&x| x * *s).collect())],
        Op::MatMul { a, b, m, k, n } => {
            let ga = kernels::matmul_bt(g, val(*b).data(), *m, *n, *k);
            let gb = kernels::matmul_at(val(*a).data(), g, *k, *m, *n);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Reshape { a } => vec![(*a, g.to_vec())],
        Op::Transpose { a, rows, cols } => vec![(*a, kernels::transpose2(g, *cols, *rows))],
        Op::Concat { parts, axis } => {
            let s = node.value.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut out: Vec<(usize, Vec<T>)> = parts.iter().map(|&p| (p, Vec::with_capacity(val(p).len()))).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (p, buf) in out.iter_mut() {
                    let chunk = val(*p).shape()[*axis] * inner;
                    buf.extend_from_slice(&g[pos..pos + chunk]);
                    pos += chunk;
                }
            }
            out
        }
        Op::Narrow { a, axis, start } => {
            let s = val(*a).shape();
            let len = node.value.shape()[*axis];
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut ga = vec![T::zero(); val(*a).len()];
            for o in 0..outer {
                let base = (o * s[*axis] + start) * inner;
                ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*a, ga)]
        }
        Op::SumAxis { a } => {
            let idx = kernels::broadcast_index(node.value.shape(), val(*a).shape());
            vec![(*a, idx.iter().map(|&i| g[i]).collect())]
        }
        Op::SumAll { a } => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::Softmax { a } => {
            let y = node.value.data();
            let l = *node.value.shape().last().unwrap_or(&1);
            let mut ga = Vec::with_capacity(y.len());
            for (gr, yr) in g.chunks(l.max(1)).zip(y.chunks(l.max(1))) {
                let dot: T = gr.iter().zip(yr).map(|(&x, &z)| x * z).sum();
                ga.extend(gr.iter().zip(yr).map(|(&x, &z)| z * (x - dot)));
            }
            vec![(*a, ga)]
        }
        Op::Conv2d { x, w, b, p } => {
            let (vx, vw) = (val(*x), val(*w));
            let (c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let (o, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
            let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
            let ck = c * kh * kw;
            let mut out = Vec::with_capacity(3);
            if nodes[*w].requires_grad {
                let cols = kernels::im2col(vx.data(), (c, h, wd), (kh, kw), p, (oh, ow));
                out.push((*w, kernels::matmul_bt(g, &cols, o, oh * ow, ck)));
            }
            if nodes[*x].requires_grad {
                let dcols = kernels::matmul_at(vw.data(), g, ck, o, oh * ow);
                out.push((*x, kernels::col2im(&dcols, (c, h, wd), (kh, kw), p, (oh, ow))));
            }
            if let Some(b) = b {
                out.push((*b, channel_sums(g, o, oh * ow)));
            }
            out
        }
        Op::ConvTranspose2d { x, w, b, p } => {
            let (vx, vw) = (val(*x), val(*w));
            let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let (cout, kh, kw) = (vw.shape()[1], vw.shape()[2], vw.shape()[3]);
            let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
            let ck = cout * kh * kw;
            let gcols = kernels::im2col(g, (cout, oh, ow), (kh, kw), p, (h, wd));
            let mut out = Vec::with_capacity(3);
            if nodes[*x].requires_grad {
                out.push((*x, kernels::matmul(vw.data(), &gcols, cin, ck, h * wd)));
            }
            if nodes[*w].requires_grad {
                out.push((*w, kernels::matmul_bt(vx.data(), &gcols, cin, h * wd, ck)));
            }
            if let Some(b) = b {
                out.push((*b, channel_sums(g, cout, oh * ow)));
            }
            out
        }
        Op::Resample {
            a,
            map,
            planes,
            in_plane,
            out_plane,
        } => {
            let mut ga = vec![T::zero(); planes * in_plane];
            for pl in 0..*planes {
                for &(o, i, wt) in map {
                    let d = &mut ga[pl * in_plane + i];
                    *d = *d + wt * g[pl * out_plane + o];
                }
            }
            vec![(*a, ga)]
        }
        Op::GroupNorm { a, groups, inv_std } => {
            let gsize = g.len() / groups;
            let y = node.value.data();
            let mut ga = Vec::with_capacity(g.len());
            for (k, (gc, yc)) in g.chunks(gsize).zip(y.chunks(gsize)).enumerate() {
                ga.extend(normalize_backward(gc, yc, inv_std[k]));
            }
            vec![(*a, ga)]
        }
        Op::LayerNorm { a, inv_std } => {
            let l = *node.value.shape().last().unwrap_or(&1);
            let y = node.value.data();
            let mut ga = Vec::with_capacity(g.len());
            for (k, (gr, yr)) in g.chunks(l).zip(y.chunks(l)).enumerate() {
                ga.extend(normalize_backward(gr, yr, inv_std[k]));
            }
            vec![(*a, ga)]
        }
        Op::GridSample { input, grid, taps } => {
            let vi = val(*input);
            let (c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
            let npts = taps.len();
            let mut gi = vec![T::zero(); vi.len()];
            let mut gg = vec![T::zero(); npts * 2];
            let one = T::one();
            for ch in 0..c {
                let plane = &vi.data()[ch * h * w..(ch + 1) * h * w];
                let gplane = &mut gi[ch * h * w..(ch + 1) * h * w];
                for (p, tap) in taps.iter().enumerate() {
                    let gp = g[ch * npts + p];
                    for k in 0..4 {
                        gplane[tap.idx[k]] = gplane[tap.idx[k]] + tap.wt[k] * gp;
                    }
                    let [v00, v01, v10, v11] = tap.idx.map(|i| plane[i]);
                    if !tap.clamped_x {
                        let d = (one - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10);
                        gg[2 * p] = gg[2 * p] + gp * d;
                    }
                    if !tap.clamped_y {
                        let d = (one - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01);
                        gg[2 * p + 1] = gg[2 * p + 1] + gp * d;
                    }
                }
            }
            vec![(*input, gi), (*grid, gg)]
        }
    }
}

fn channel_sums<T: Real>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| g[c * plane..(c + 1) * plane].iter().copied().sum())
        .collect()
}
