//! Shape models and image synthesis.
//!
//! A [`Shape`] is a list of closed landmark polygons, one per anatomical
//! object. Shapes feed a PCA shape model ([`SsmModel`]); a sampled virtual
//! shape is turned into a labelled image by fitting a hyperelastic
//! coordinate transform ([`fit_transform`]) that carries the virtual
//! landmarks onto a reference shape and pulling the reference image through
//! it ([`warp_image`]).

mod elastic;
mod energy;
mod phantom;
mod raster;
mod ssm;
mod synth;
mod transform;

pub use elastic::{elastic_augment, elastic_deform, random_translate, DisplacementGrid, ElasticConfig};
pub use energy::{
    fit_transform, landmark_mismatch, ogden_invariant_term, strain_energy, strain_energy_of_displacement, EnergyConfig,
    FitReport, Material, Mesh, OgdenTerm, StrainEnergy,
};
pub use phantom::{phantom_dataset, phantom_shape, render_phantom, PhantomConfig};
pub use raster::{point_in_polygon, rasterize_shape};
pub use ssm::{build_ssm, Alignment, SsmModel};
pub use synth::{synth_dataset, synth_sample, warp_image, SynthConfig, SynthRecord, SynthSample};
pub use transform::{Frame, TransformNet, TransformNetConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss_metrics::class_names;

/// 2D point `[x, y]` in pixel coordinates; `x` runs along columns.
pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeObject {
    pub name: String,
    /// Closed polygon; the last point connects back to the first.
    pub points: Vec<Point>,
}

/// Ordered objects; object `k` carries label `k + 1` when rasterized.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub objects: Vec<ShapeObject>,
}

impl Shape {
    /// Names objects by position: L1–L5, S1, D1–D5 for eleven objects,
    /// `C1, C2, …` otherwise.
    pub fn from_polygons(polygons: Vec<Vec<Point>>) -> Self {
        let names = class_names(polygons.len() + 1);
        Self {
            objects: names
                .into_iter()
                .zip(polygons)
                .map(|(name, points)| ShapeObject { name, points })
                .collect(),
        }
    }

    pub fn point_counts(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.points.len()).collect()
    }

    pub fn num_points(&self) -> usize {
        self.objects.iter().map(|o| o.points.len()).sum()
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.objects.iter().flat_map(|o| o.points.iter())
    }

    /// `[x0, y0, x1, y1, …]` over all objects in order.
    pub fn to_vector(&self) -> Vec<f64> {
        self.points().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Same topology as `self`, coordinates from `v`.
    pub fn with_vector(&self, v: &[f64]) -> Result<Self> {
        if v.len() != 2 * self.num_points() {
            return Err(Error::shape("Shape::with_vector", &[2 * self.num_points()], &[v.len()]));
        }
        let mut it = v.chunks_exact(2);
        Ok(Self {
            objects: self
                .objects
                .iter()
                .map(|o| ShapeObject {
                    name: o.name.clone(),
                    points: o.points.iter().map(|_| {
                        let c = it.next().expect("length checked");
                        [c[0], c[1]]
                    }).collect(),
                })
                .collect(),
        })
    }

    pub fn centroid(&self) -> Point {
        let n = self.num_points().max(1) as f64;
        let (sx, sy) = self.points().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
        [sx / n, sy / n]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut s = self.clone();
        for o in &mut s.objects {
            for p in &mut o.points {
                p[0] += dx;
                p[1] += dy;
            }
        }
        s
    }

    /// Errors unless `other` has the same object names and point counts.
    pub fn check_topology(&self, other: &Shape) -> Result<()> {
        if self.objects.len() != other.objects.len() {
            return Err(Error::Topology(format!(
                "object count {} differs from {}",
                other.objects.len(),
                self.objects.len()
            )));
        }
        for (a, b) in self.objects.iter().zip(&other.objects) {
            if a.name != b.name {
                return Err(Error::Topology(format!("object {:?} where {:?} was expected", b.name, a.name)));
            }
            if a.points.len() != b.points.len() {
                return Err(Error::Topology(format!(
                    "object {} has {} points, expected {}",
                    b.name,
                    b.points.len(),
                    a.points.len()
                )));
            }
        }
        Ok(())
    }

    /// Errors on the first object that is degenerate or self-intersecting.
    pub fn check_simple(&self) -> Result<()> {
        for o in &self.objects {
            if o.points.len() < 3 {
                return Err(Error::Topology(format!("object {} has {} points", o.name, o.points.len())));
            }
            if let Some((i, j)) = self_intersection(&o.points) {
                return Err(Error::Topology(format!("object {} self-intersects at edges {i} and {j}", o.name)));
            }
        }
        Ok(())
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// First pair of crossing edges. Adjacent edges only count when they fold
/// back onto each other.
fn self_intersection(p: &[Point]) -> Option<(usize, usize)> {
    let n = p.len();
    let edge = |i: usize| (p[i], p[(i + 1) % n]);
    for i in 0..n {
        let (a, b) = edge(i);
        for j in i + 1..n {
            let (c, d) = edge(j);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // shared vertex: b == c (or d == a); a fold puts the far end on the other edge
                let (shared, far_a, far_b) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                let collinear = orient(shared, far_a, far_b) == 0.0;
                let folds = collinear && ((far_a[0] - shared[0]) * (far_b[0] - shared[0]) + (far_a[1] - shared[1]) * (far_b[1] - shared[1])) > 0.0;
                if folds {
                    return Some((i, j));
                }
            } else if segments_intersect(a, b, c, d) {
                return Some((i, j));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests;
