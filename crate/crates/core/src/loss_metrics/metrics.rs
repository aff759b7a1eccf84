use crate::error::{Error, Result};
use crate::image::LabelMask;

/// Dice similarity coefficient of one class as a percentage.
/// Both masks lacking the class counts as perfect agreement (100).
pub fn dsc(pred: &LabelMask, truth: &LabelMask, class: usize, class_count: usize) -> Result<f64> {
    if class >= class_count {
        return Err(Error::invalid("dsc", format!("class {class} outside 0..{class_count}")));
    }
    same_shape(pred, truth, "dsc")?;
    let c = class as u8;
    let (mut p, mut q, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        let (x, y) = (a == c, b == c);
        p += x as usize;
        q += y as usize;
        both += (x && y) as usize;
    }
    if p + q == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + q) as f64)
}

fn same_shape(a: &LabelMask, b: &LabelMask, op: &'static str) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(op, &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

/// Class pixels with at least one 4-neighbour outside the class or outside the image.
pub fn boundary(mask: &LabelMask, class: u8) -> Vec<bool> {
    let (h, w) = (mask.height, mask.width);
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) != class {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            out[r * w + c] = edge
                || mask.get(r - 1, c) != class
                || mask.get(r + 1, c) != class
                || mask.get(r, c - 1) != class
                || mask.get(r, c + 1) != class;
        }
    }
    out
}

/// Stand-in for "no site" that keeps the parabola arithmetic finite.
const FAR: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            v[k] = q;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
        }
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel
/// of `sites` (infinite if there are none).
pub fn distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let (mut col, mut out) = (vec![0f64; h], vec![0f64; h]);
    for c in 0..w {
        for r in 0..h {
            col[r] = g[r * w + c];
        }
        edt_1d(&col, &mut out, &mut v, &mut z);
        for r in 0..h {
            g[r * w + c] = out[r];
        }
    }
    let mut row_out = vec![0f64; w];
    for r in 0..h {
        edt_1d(&g[r * w..(r + 1) * w], &mut row_out, &mut v, &mut z);
        g[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    g.iter().map(|&d| if d >= FAR / 2.0 { f64::INFINITY } else { d.sqrt() }).collect()
}

/// Distances from each boundary pixel of `from` to the nearest boundary pixel of `to`.
pub fn directed_distances(from: &[bool], to: &[bool], h: usize, w: usize) -> Vec<f64> {
    let dt = distance_transform(to, h, w);
    from.iter().zip(&dt).filter(|(f, _)| **f).map(|(_, &d)| d).collect()
}

/// Percentile with linear interpolation between order statistics at rank `(n − 1)·q/100`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let rank = (n - 1) as f64 * q / 100.0;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

fn boundary_pair(pred: &LabelMask, truth: &LabelMask, class: usize, op: &'static str) -> Result<(Vec<bool>, Vec<bool>)> {
    same_shape(pred, truth, op)?;
    let c = class as u8;
    if class > u8::MAX as usize || !pred.data.contains(&c) {
        return Err(Error::ClassAbsent { class, which: "predicted" });
    }
    if !truth.data.contains(&c) {
        return Err(Error::ClassAbsent { class, which: "ground-truth" });
    }
    Ok((boundary(pred, c), boundary(truth, c)))
}

/// Symmetric 95th-percentile Hausdorff distance between class boundaries,
/// in pixels or scaled by `spacing`.
pub fn hd95(pred: &LabelMask, truth: &LabelMask, class: usize, spacing: Option<f64>) -> Result<f64> {
    let (bp, bt) = boundary_pair(pred, truth, class, "hd95")?;
    let (h, w) = (pred.height, pred.width);
    let a = percentile(&mut directed_distances(&bp, &bt, h, w), 95.0);
    let b = percentile(&mut directed_distances(&bt, &bp, h, w), 95.0);
    Ok(a.max(b) * spacing.unwrap_or(1.0))
}

/// Exact symmetric Hausdorff distance between class boundaries.
pub fn hausdorff(pred: &LabelMask, truth: &LabelMask, class: usize) -> Result<f64> {
    let (bp, bt) = boundary_pair(pred, truth, class, "hausdorff")?;
    let (h, w) = (pred.height, pred.width);
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(max(directed_distances(&bp, &bt, h, w)).max(max(directed_distances(&bt, &bp, h, w))))
}
