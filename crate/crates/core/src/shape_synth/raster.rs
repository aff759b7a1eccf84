use super::{Point, Shape};
use crate::error::{Error, Result};
use crate::image::LabelMask;

/// Even-odd test of `p` against a closed polygon. Edges are half-open in y,
/// so a point on a shared horizontal boundary belongs to exactly one side.
pub fn point_in_polygon(poly: &[Point], p: Point) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Scanline even-odd fill of every object at pixel centers. Object `k`
/// writes label `k + 1`; later objects overwrite earlier ones.
pub fn rasterize_shape(shape: &Shape, height: usize, width: usize) -> Result<LabelMask> {
    if shape.objects.len() > u8::MAX as usize {
        return Err(Error::invalid("rasterize_shape", format!("{} objects exceed the u8 label range", shape.objects.len())));
    }
    let mut mask = LabelMask::zeros(height, width);
    let mut xs = Vec::new();
    for (k, obj) in shape.objects.iter().enumerate() {
        let poly = &obj.points;
        if poly.len() < 3 {
            return Err(Error::Topology(format!("object {} has {} points", obj.name, poly.len())));
        }
        let label = (k + 1) as u8;
        let (ymin, ymax) = poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
        let r0 = ymin.ceil().max(0.0) as usize;
        let r1 = (ymax.floor().min(height as f64 - 1.0)).max(-1.0);
        if r1 < 0.0 {
            continue;
        }
        for r in r0..=r1 as usize {
            let y = r as f64;
            xs.clear();
            let mut j = poly.len() - 1;
            for i in 0..poly.len() {
                let (a, b) = (poly[i], poly[j]);
                if (a[1] > y) != (b[1] > y) {
                    xs.push((b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]);
                }
                j = i;
            }
            xs.sort_by(f64::total_cmp);
            // pixel x is inside iff an odd number of crossings lie strictly right of it
            for span in xs.chunks_exact(2) {
                let c0 = span[0].ceil().max(0.0);
                let c1 = span[1].ceil().min(width as f64);
                let mut c = c0;
                while c < c1 {
                    mask.set(r, c as usize, label);
                    c += 1.0;
                }
            }
        }
    }
    Ok(mask)
}
