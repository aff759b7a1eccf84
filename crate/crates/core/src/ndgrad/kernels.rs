//! Raw slice kernels shared by tape ops and plain-value code paths.

use crate::scalar::Real;

// ── dense products ───────────────────────────────────────────────────

/// `c (m×n) = a (m×k) · b (k×n)`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm_acc(m, k, n, a, (k, 1), b, (n, 1), &mut c, (n, 1));
    c
}

/// `c (m×n) = a (m×k) · bᵀ` with `b` stored as (n×k).
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm_acc(m, k, n, a, (k, 1), b, (1, k), &mut c, (n, 1));
    c
}

/// `c (m×n) = aᵀ · b` with `a` stored as (k×m) and `b` as (k×n).
pub fn matmul_at<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm_acc(m, k, n, a, (1, m), b, (n, 1), &mut c, (n, 1));
    c
}

pub fn transpose2<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(a[i * cols + j]);
        }
    }
    out
}

// ── convolution geometry ─────────────────────────────────────────────

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zeros,
    /// Wrap-around indexing; makes stride-1 convolutions exactly shift-equivariant.
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub pad_mode: PadMode,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            pad_mode: PadMode::Zeros,
        }
    }
}

impl Conv2dParams {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize, pad_mode: PadMode) -> Self {
        Self {
            padding: (kernel / 2, kernel / 2),
            pad_mode,
            ..Self::default()
        }
    }

    /// Non-overlapping patches: kernel = stride = `size`.
    pub fn patch(size: usize) -> Self {
        Self {
            stride: (size, size),
            ..Self::default()
        }
    }

    pub fn out_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let span_h = self.dilation.0 * (kh - 1) + 1;
        let span_w = self.dilation.1 * (kw - 1) + 1;
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < span_h || pw < span_w || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((ph - span_h) / self.stride.0 + 1, (pw - span_w) / self.stride.1 + 1))
    }

    /// Output extent of the transposed convolution with the same geometry.
    pub fn transposed_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let oh = ((h - 1) * self.stride.0 + self.dilation.0 * (kh - 1) + 1).checked_sub(2 * self.padding.0)?;
        let ow = ((w - 1) * self.stride.1 + self.dilation.1 * (kw - 1) + 1).checked_sub(2 * self.padding.1)?;
        Some((oh, ow))
    }

    #[inline]
    fn source(&self, o: usize, k: usize, stride: usize, pad: usize, dil: usize, n: usize) -> Option<usize> {
        let pos = (o * stride + k * dil) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < n {
            Some(pos as usize)
        } else {
            match self.pad_mode {
                PadMode::Zeros => None,
                PadMode::Circular => Some(pos.rem_euclid(n as isize) as usize),
            }
        }
    }
}

/// Unfold `x` (c×h×w) into columns of shape (c·kh·kw) × (oh·ow).
pub fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    p: &Conv2dParams,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let cols = oh * ow;
    let mut out = vec![T::zero(); c * kh * kw * cols];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let Some(iy) = p.source(oy, ki, p.stride.0, p.padding.0, p.dilation.0, h) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = p.source(ox, kj, p.stride.1, p.padding.1, p.dilation.1, w) {
                            dst[oy * ow + ox] = x[(ci * h + iy) * w + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into a (c×h×w) image.
pub fn col2im<T: Real>(
    cols_data: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    p: &Conv2dParams,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let cols = oh * ow;
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let Some(iy) = p.source(oy, ki, p.stride.0, p.padding.0, p.dilation.0, h) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = p.source(ox, kj, p.stride.1, p.padding.1, p.dilation.1, w) {
                            let d = &mut out[(ci * h + iy) * w + ix];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

// ── resampling ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// Sparse linear map from an (h×w) plane to an (oh×ow) plane:
/// entries `(out_index, in_index, weight)`.
pub fn resize_map<T: Real>(
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    mode: ResizeMode,
) -> Vec<(usize, usize, T)> {
    let mut map = Vec::new();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let o = oy * ow + ox;
            match mode {
                ResizeMode::Nearest => {
                    let iy = ((oy as f64 * sy).floor() as usize).min(h - 1);
                    let ix = ((ox as f64 * sx).floor() as usize).min(w - 1);
                    map.push((o, iy * w + ix, T::one()));
                }
                ResizeMode::Bilinear => {
                    // half-pixel centers, clamped at the border
                    let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let x0 = fx.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let ty = fy - y0 as f64;
                    let tx = fx - x0 as f64;
                    for (iy, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                        for (ix, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                            if wy * wx != 0.0 {
                                map.push((o, iy * w + ix, T::lit(wy * wx)));
                            }
                        }
                    }
                }
            }
        }
    }
    map
}

/// Bilinear corner indices and weights for a sample at index-space
/// coordinates `(x, y)` clamped to the edge of an (h×w) plane.
///
/// Also returns whether each axis was clamped (its derivative is zero there).
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap<T> {
    pub idx: [usize; 4],
    pub wt: [T; 4],
    pub fx: T,
    pub fy: T,
    pub clamped_x: bool,
    pub clamped_y: bool,
}

#[inline]
pub fn bilinear_tap<T: Real>(x: T, y: T, h: usize, w: usize) -> BilinearTap<T> {
    let wmax = T::lit((w - 1) as f64);
    let hmax = T::lit((h - 1) as f64);
    let cx = x.max(T::zero()).min(wmax);
    let cy = y.max(T::zero()).min(hmax);
    let x0 = cx.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = cy.floor().to_usize().unwrap_or(0).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - T::lit(x0 as f64);
    let fy = cy - T::lit(y0 as f64);
    let one = T::one();
    BilinearTap {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wt: [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx],
        fx,
        fy,
        clamped_x: x != cx,
        clamped_y: y != cy,
    }
}

/// Bilinear sample of a single (h×w) plane with clamp-to-edge.
#[inline]
pub fn bilinear_sample<T: Real>(plane: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let tap = bilinear_tap(x, y, h, w);
    let mut v = T::zero();
    for k in 0..4 {
        if tap.wt[k] != T::zero() {
            v = v + tap.wt[k] * plane[tap.idx[k]];
        }
    }
    v
}

/// Nearest-neighbor sample with clamp-to-edge.
#[inline]
pub fn nearest_sample<V: Copy, T: Real>(plane: &[V], h: usize, w: usize, x: T, y: T) -> V {
    let cx = x.round().max(T::zero()).min(T::lit((w - 1) as f64));
    let cy = y.round().max(T::zero()).min(T::lit((h - 1) as f64));
    plane[cy.to_usize().unwrap_or(0) * w + cx.to_usize().unwrap_or(0)]
}

// ── broadcasting ─────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index into an operand of
/// shape `src` broadcast to `out`.
pub fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let offset = rank - src.len();
    let src_strides = super::array::strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        eff[offset + i] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += eff[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}
