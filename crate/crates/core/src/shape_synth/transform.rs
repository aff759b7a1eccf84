use serde::{Deserialize, Serialize};

use super::Point;
use crate::error::{Error, Result};
use crate::ndgrad::kernels::matmul;
use crate::ndgrad::{init, Bound, DiffArray, ParamId, ParamStore, SeededRng, Tape, Var};
use crate::scalar::Real;

/// Sine-activation coordinate network layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformNetConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Frequency multiplier of the first layer.
    #[serde(default = "default_first_omega")]
    pub first_omega: f64,
    #[serde(default = "default_hidden_omega")]
    pub hidden_omega: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}
fn default_first_omega() -> f64 {
    30.0
}
fn default_hidden_omega() -> f64 {
    1.0
}

impl Default for TransformNetConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            first_omega: default_first_omega(),
            hidden_omega: default_hidden_omega(),
        }
    }
}

/// Map between pixel coordinates and the network's unit square.
///
/// `u = (p - center) / scale`; with `scale = max(H, W) / 2` an image maps
/// into `[-1, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub center: Point,
    pub scale: f64,
}

impl Frame {
    pub fn for_image(height: usize, width: usize) -> Self {
        Self {
            center: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
            scale: height.max(width) as f64 / 2.0,
        }
    }

    pub fn to_unit(&self, p: Point) -> Point {
        [(p[0] - self.center[0]) / self.scale, (p[1] - self.center[1]) / self.scale]
    }
}

/// `T(p) = p + scale · MLP((p - center) / scale)` with sine hidden layers
/// and a zero-initialized output layer, so `T` starts as the identity.
#[derive(Clone, Debug)]
pub struct TransformNet<T> {
    pub config: TransformNetConfig,
    pub frame: Frame,
    pub store: ParamStore<T>,
    layers: Vec<(ParamId, ParamId, f64)>,
    out: (ParamId, ParamId),
}

/// Spatial derivative `∂T/∂p` as `[[∂Tx/∂x, ∂Tx/∂y], [∂Ty/∂x, ∂Ty/∂y]]`.
pub type Jacobian = [[f64; 2]; 2];

impl<T: Real> TransformNet<T> {
    pub fn new(config: TransformNetConfig, frame: Frame, seed: u64) -> Result<Self> {
        if config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(Error::Config(format!("transform net hidden sizes {:?}", config.hidden)));
        }
        if !(frame.scale > 0.0) {
            return Err(Error::Config(format!("frame scale {}", frame.scale)));
        }
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan = 2;
        for (k, &width) in config.hidden.iter().enumerate() {
            let (omega, wb) = if k == 0 {
                (config.first_omega, 1.0 / fan as f64)
            } else {
                (config.hidden_omega, (6.0 / fan as f64).sqrt() / config.hidden_omega)
            };
            let w = store.add(format!("l{k}.w"), init::uniform(&[fan, width], wb, &mut rng));
            let b = store.add(format!("l{k}.b"), init::uniform(&[1, width], 1.0 / (fan as f64).sqrt(), &mut rng));
            layers.push((w, b, omega));
            fan = width;
        }
        let ow = store.add("out.w", DiffArray::zeros(&[fan, 2]));
        let ob = store.add("out.b", DiffArray::zeros(&[1, 2]));
        Ok(Self {
            config,
            frame,
            store,
            layers,
            out: (ow, ob),
        })
    }

    /// Output-layer bias id; `scale · bias` is a constant offset of `T`.
    pub fn output_bias(&self) -> ParamId {
        self.out.1
    }

    pub fn unit_points(&self, points: &[Point]) -> DiffArray<T> {
        DiffArray::from_fn(&[points.len(), 2], |i| T::lit(self.frame.to_unit(points[i / 2])[i % 2]))
    }

    /// Displacement `T(p) - p` in pixels for unit-square inputs `u` (N×2).
    pub fn displacement_tape(&self, t: &Tape<T>, b: &Bound, u: Var) -> Result<Var> {
        let mut h = u;
        for &(w, bias, omega) in &self.layers {
            let z = t.add(t.matmul(h, b.var(w))?, b.var(bias))?;
            h = t.sin(t.scale(z, T::lit(omega))?)?;
        }
        let o = t.add(t.matmul(h, b.var(self.out.0))?, b.var(self.out.1))?;
        t.scale(o, T::lit(self.frame.scale))
    }

    fn weights(&self, id: ParamId) -> Vec<f64> {
        self.store.get(id).data().iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Displacements and, when asked, their unit-square tangents.
    fn eval(&self, points: &[Point], tangents: bool) -> (Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) {
        let n = points.len();
        let mut h: Vec<f64> = points.iter().flat_map(|&p| self.frame.to_unit(p)).collect();
        let mut tu: Vec<f64> = (0..n).flat_map(|_| [1.0, 0.0]).collect();
        let mut tv: Vec<f64> = (0..n).flat_map(|_| [0.0, 1.0]).collect();
        let mut fan = 2;
        for &(w, bias, omega) in &self.layers {
            let (wv, bv) = (self.weights(w), self.weights(bias));
            let width = bv.len();
            let mut z = matmul(&h, &wv, n, fan, width);
            for row in z.chunks_exact_mut(width) {
                row.iter_mut().zip(&bv).for_each(|(x, b)| *x = omega * (*x + b));
            }
            if tangents {
                let zu = matmul(&tu, &wv, n, fan, width);
                let zv = matmul(&tv, &wv, n, fan, width);
                tu = z.iter().zip(&zu).map(|(zi, d)| omega * zi.cos() * d).collect();
                tv = z.iter().zip(&zv).map(|(zi, d)| omega * zi.cos() * d).collect();
            }
            h = z.iter().map(|v| v.sin()).collect();
            fan = width;
        }
        let (wv, bv) = (self.weights(self.out.0), self.weights(self.out.1));
        let s = self.frame.scale;
        let mut d = matmul(&h, &wv, n, fan, 2);
        for row in d.chunks_exact_mut(2) {
            row[0] = s * (row[0] + bv[0]);
            row[1] = s * (row[1] + bv[1]);
        }
        let tang = tangents.then(|| (matmul(&tu, &wv, n, fan, 2), matmul(&tv, &wv, n, fan, 2)));
        (d, tang)
    }

    /// `T(p)` for each point.
    pub fn apply(&self, points: &[Point]) -> Vec<Point> {
        let (d, _) = self.eval(points, false);
        points.iter().zip(d.chunks_exact(2)).map(|(p, d)| [p[0] + d[0], p[1] + d[1]]).collect()
    }

    /// `∂T/∂p` at each point by forward-mode tangents.
    pub fn jacobians(&self, points: &[Point]) -> Vec<Jacobian> {
        let (_, tang) = self.eval(points, true);
        let (du, dv) = tang.expect("tangents requested");
        // d = s·MLP((p - c)/s), so ∂d/∂p = ∂MLP/∂u
        du.chunks_exact(2)
            .zip(dv.chunks_exact(2))
            .map(|(a, b)| [[1.0 + a[0], b[0]], [a[1], 1.0 + b[1]]])
            .collect()
    }

    /// Fraction of `points` where `det ∂T/∂p > 0`.
    pub fn positive_jacobian_fraction(&self, points: &[Point]) -> f64 {
        if points.is_empty() {
            return 1.0;
        }
        let ok = self
            .jacobians(points)
            .iter()
            .filter(|j| j[0][0] * j[1][1] - j[0][1] * j[1][0] > 0.0)
            .count();
        ok as f64 / points.len() as f64
    }
}
