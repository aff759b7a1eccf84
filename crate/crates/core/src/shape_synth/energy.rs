use serde::{Deserialize, Serialize};

use super::transform::{Frame, TransformNet, TransformNetConfig};
use super::{Point, Shape};
use crate::error::{Error, Result};
use crate::ndgrad::{Bound, DiffArray, Tape, Var};
use crate::scalar::Real;
use crate::symtc_net::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OgdenTerm {
    pub mu: f64,
    pub alpha: f64,
}

/// Compressible Ogden solid:
/// `Ψ = Σ_p (μ_p/α_p)(λ₁^α_p + λ₂^α_p − 2) + κ(J − 1)²`, optionally with
/// `−(Σ_p μ_p) ln J` so that the undeformed state carries no stress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    #[serde(default = "default_terms")]
    pub terms: Vec<OgdenTerm>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_true")]
    pub stress_free: bool,
    /// Below this `J` the `ln J` term continues as its second-order Taylor
    /// expansion, which keeps inverted elements finite and penalized.
    #[serde(default = "default_log_floor")]
    pub log_floor: f64,
}

fn default_terms() -> Vec<OgdenTerm> {
    vec![OgdenTerm { mu: 1.0, alpha: 2.0 }]
}
fn default_kappa() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}
fn default_log_floor() -> f64 {
    0.05
}

impl Default for Material {
    fn default() -> Self {
        Self {
            terms: default_terms(),
            kappa: default_kappa(),
            stress_free: true,
            log_floor: default_log_floor(),
        }
    }
}

impl Material {
    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Config("material needs at least one Ogden term".into()));
        }
        for t in &self.terms {
            if !(t.mu > 0.0) || t.alpha == 0.0 || !t.alpha.is_finite() {
                return Err(Error::Config(format!("Ogden term mu = {}, alpha = {} (need mu > 0, alpha != 0)", t.mu, t.alpha)));
            }
        }
        if !(self.kappa >= 0.0) || !(self.log_floor > 0.0) {
            return Err(Error::Config(format!("kappa {} / log floor {}", self.kappa, self.log_floor)));
        }
        Ok(())
    }
}

/// Regular grid of bilinear quads over `[x0, x0 + extent] × [y0, y0 + extent]`
/// (pixels). Areas are measured in the frame's unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub nx: usize,
    pub ny: usize,
    pub origin: Point,
    pub extent: Point,
    pub frame: Frame,
}

impl Mesh {
    /// Covers the pixel centers of an H×W image, grown by `margin` pixels.
    pub fn covering(height: usize, width: usize, elements: usize, margin: f64) -> Self {
        Self {
            nx: elements,
            ny: elements,
            origin: [-margin, -margin],
            extent: [(width - 1) as f64 + 2.0 * margin, (height - 1) as f64 + 2.0 * margin],
            frame: Frame::for_image(height, width),
        }
    }

    /// Node positions, row-major over (ny+1)×(nx+1).
    pub fn nodes(&self) -> Vec<Point> {
        let (hx, hy) = self.spacing();
        (0..=self.ny)
            .flat_map(|j| (0..=self.nx).map(move |i| (i, j)))
            .map(|(i, j)| [self.origin[0] + i as f64 * hx, self.origin[1] + j as f64 * hy])
            .collect()
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.extent[0] / self.nx as f64, self.extent[1] / self.ny as f64)
    }

    /// |V| in unit-square measure.
    pub fn area(&self) -> f64 {
        self.extent[0] * self.extent[1] / (self.frame.scale * self.frame.scale)
    }
}

/// `f = a^q + b^q` over the eigenvalues `a, b` of `C = FᵀF`
/// (`a + b = I₁`, `ab = J²`, `q = α/2`), and `∂f/∂I₁`, `∂f/∂J`.
///
/// The partials go through divided differences of `x^r`, which stay finite
/// when the eigenvalues coincide.
pub fn ogden_invariant_term<T: Real>(i1: T, j: T, alpha: T) -> (T, T, T) {
    let two = T::lit(2.0);
    let q = alpha / two;
    let k = j * j;
    let d = (i1 * i1 - T::lit(4.0) * k).max(T::zero()).sqrt();
    let a = (i1 + d) / two;
    let tiny = T::lit(1e-300).max(T::min_positive_value());
    let b = if a > T::zero() { (k / a).max(tiny) } else { tiny };
    let a = a.max(b);
    let f = a.powf(q) + b.powf(q);
    let df_di1 = q * divided_power(a, b, q);
    let df_dk = -q * divided_power(a, b, q - T::one());
    (f, df_di1, df_dk * two * j)
}

/// `(a^r − b^r) / (a − b)` for `a ≥ b > 0`, including the limit `a = b`.
fn divided_power<T: Real>(a: T, b: T, r: T) -> T {
    if r == T::zero() {
        return T::zero();
    }
    if r == T::one() {
        return T::one();
    }
    if a == b {
        return r * a.powf(r - T::one());
    }
    let t = (a - b) / b;
    b.powf(r) * (r * t.ln_1p()).exp_m1() / (a - b)
}

/// Strain energy and quadrature diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct StrainEnergy {
    pub energy: Var,
    pub min_j: f64,
    /// Quadrature points with `J ≤ 0`.
    pub inverted: usize,
    pub points: usize,
}

const GAUSS: f64 = 0.577_350_269_189_625_8;

/// `∫_V Ψ dV` for nodal displacements (pixels) of shape `[(ny+1)(nx+1), 2]`
/// or `[ny+1, nx+1, 2]`, by 2×2 Gauss quadrature over bilinear quads.
pub fn strain_energy_of_displacement<T: Real>(t: &Tape<T>, disp: Var, mesh: &Mesh, material: &Material) -> Result<StrainEnergy> {
    material.validate()?;
    let (nx, ny) = (mesh.nx, mesh.ny);
    if nx < 2 || ny < 2 {
        return Err(Error::Config(format!("mesh {nx}x{ny} smaller than 2x2")));
    }
    let d = t.reshape(disp, &[ny + 1, nx + 1, 2])?;
    let rows0 = t.narrow(d, 0, 0, ny)?;
    let rows1 = t.narrow(d, 0, 1, ny)?;
    let c00 = t.narrow(rows0, 1, 0, nx)?;
    let c10 = t.narrow(rows0, 1, 1, nx)?;
    let c01 = t.narrow(rows1, 1, 0, nx)?;
    let c11 = t.narrow(rows1, 1, 1, nx)?;
    let ex0 = t.sub(c10, c00)?;
    let ex1 = t.sub(c11, c01)?;
    let ey0 = t.sub(c01, c00)?;
    let ey1 = t.sub(c11, c10)?;
    let (hx, hy) = mesh.spacing();
    let lerp = |e0: Var, e1: Var, s: f64, h: f64| -> Result<Var> {
        t.add(t.scale(e0, T::lit((1.0 - s) / (2.0 * h)))?, t.scale(e1, T::lit((1.0 + s) / (2.0 * h)))?)
    };
    let mut gx = Vec::with_capacity(4);
    let mut gy = Vec::with_capacity(4);
    for &(xi, eta) in &[(-GAUSS, -GAUSS), (GAUSS, -GAUSS), (-GAUSS, GAUSS), (GAUSS, GAUSS)] {
        gx.push(lerp(ex0, ex1, eta, hx)?);
        gy.push(lerp(ey0, ey1, xi, hy)?);
    }
    let gx = t.concat(&gx, 0)?;
    let gy = t.concat(&gy, 0)?;
    let f11 = t.add_scalar(t.narrow(gx, 2, 0, 1)?, T::one())?;
    let f21 = t.narrow(gx, 2, 1, 1)?;
    let f12 = t.narrow(gy, 2, 0, 1)?;
    let f22 = t.add_scalar(t.narrow(gy, 2, 1, 1)?, T::one())?;
    let j = t.sub(t.mul(f11, f22)?, t.mul(f12, f21)?)?;
    let i1 = t.add(
        t.add(t.square(f11)?, t.square(f12)?)?,
        t.add(t.square(f21)?, t.square(f22)?)?,
    )?;

    let mut psi = t.scale(t.square(t.add_scalar(j, -T::one())?)?, T::lit(material.kappa))?;
    for term in &material.terms {
        let alpha = T::lit(term.alpha);
        let f = t.map2("ogden", i1, j, move |a, b| ogden_invariant_term(a, b, alpha))?;
        let c = term.mu / term.alpha;
        psi = t.add(psi, t.add_scalar(t.scale(f, T::lit(c))?, T::lit(-2.0 * c))?)?;
    }
    if material.stress_free {
        let j0 = T::lit(material.log_floor);
        let ln_j0 = j0.ln();
        let log_j = t.map("log_j", j, move |x| {
            if x >= j0 {
                (x.ln(), T::one() / x)
            } else {
                let e = (x - j0) / j0;
                (ln_j0 + e - e * e / T::lit(2.0), (T::one() - e) / j0)
            }
        })?;
        let mu: f64 = material.terms.iter().map(|p| p.mu).sum();
        psi = t.sub(psi, t.scale(log_j, T::lit(mu))?)?;
    }
    let s = mesh.frame.scale;
    let weight = (hx / s) * (hy / s) / 4.0;
    let energy = t.scale(t.sum(psi)?, T::lit(weight))?;
    let jv = t.value(j);
    let min_j = jv.data().iter().map(|v| v.to_f64_lossy()).fold(f64::INFINITY, f64::min);
    let inverted = jv.data().iter().filter(|v| **v <= T::zero()).count();
    Ok(StrainEnergy {
        energy,
        min_j,
        inverted,
        points: jv.len(),
    })
}

/// Strain energy of the displacement field that `net` induces on `mesh`.
pub fn strain_energy<T: Real>(t: &Tape<T>, net: &TransformNet<T>, b: &Bound, mesh: &Mesh, material: &Material) -> Result<StrainEnergy> {
    let u = t.constant(net.unit_points(&mesh.nodes()));
    let disp = net.displacement_tape(t, b, u)?;
    strain_energy_of_displacement(t, disp, mesh, material)
}

/// `λ · avg_i ‖T(S̃ᵢ) − Sᵢ‖⁴` in pixel units.
pub fn landmark_mismatch<T: Real>(
    t: &Tape<T>,
    net: &TransformNet<T>,
    b: &Bound,
    virtual_shape: &Shape,
    reference: &Shape,
    lambda: f64,
) -> Result<Var> {
    virtual_shape.check_topology(reference)?;
    let src: Vec<Point> = virtual_shape.points().copied().collect();
    if src.is_empty() {
        return Ok(t.constant(DiffArray::scalar(T::zero())));
    }
    let offset: Vec<T> = virtual_shape
        .points()
        .zip(reference.points())
        .flat_map(|(v, r)| [T::lit(r[0] - v[0]), T::lit(r[1] - v[1])])
        .collect();
    let target = t.constant(DiffArray::new(vec![src.len(), 2], offset)?);
    let u = t.constant(net.unit_points(&src));
    let d = net.displacement_tape(t, b, u)?;
    let r = t.sub(d, target)?;
    let sq = t.sum_axis(t.square(r)?, 1)?;
    t.scale(t.mean(t.square(sq)?)?, T::lit(lambda))
}

/// Settings of the landmark-driven transform fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    /// Elements per mesh axis.
    #[serde(default = "default_mesh")]
    pub mesh_elements: usize,
    /// Extra mesh border around the image, in pixels.
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub material: Material,
    #[serde(default)]
    pub net: TransformNetConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop once `|Π_k − Π_{k−window}| / |Π_{k−window}|` drops below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mesh() -> usize {
    32
}
fn default_lambda() -> f64 {
    16.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_max_iters() -> usize {
    2000
}
fn default_tol() -> f64 {
    1e-6
}
fn default_window() -> usize {
    50
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            mesh_elements: default_mesh(),
            margin: 0.0,
            lambda: default_lambda(),
            material: Material::default(),
            net: TransformNetConfig::default(),
            lr: default_lr(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            window: default_window(),
            seed: 0,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        if self.mesh_elements < 2 {
            return Err(Error::Config(format!("mesh of {} elements per axis, need >= 2", self.mesh_elements)));
        }
        if !(self.lambda >= 0.0) || !(self.lr > 0.0) || !(self.margin >= 0.0) || self.window == 0 {
            return Err(Error::Config(format!(
                "lambda {} / lr {} / margin {} / window {}",
                self.lambda, self.lr, self.margin, self.window
            )));
        }
        Ok(())
    }
}

/// A fitted transform and its optimization record.
#[derive(Clone, Debug)]
pub struct FitReport<T> {
    pub net: TransformNet<T>,
    pub mesh: Mesh,
    /// Π before each update.
    pub history: Vec<f64>,
    pub strain: f64,
    pub mismatch: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Mean and max landmark distance `‖T(S̃ᵢ) − Sᵢ‖` in pixels.
    pub mean_residual: f64,
    pub max_residual: f64,
    /// Fraction of mesh nodes with `det ∂T/∂p > 0`.
    pub det_fraction: f64,
    pub min_j: f64,
}

/// Minimizes strain energy plus landmark mismatch over the weights of a
/// fresh [`TransformNet`] mapping the virtual shape's (H×W) image domain
/// onto the reference.
pub fn fit_transform<T: Real>(
    virtual_shape: &Shape,
    reference: &Shape,
    height: usize,
    width: usize,
    cfg: &EnergyConfig,
) -> Result<FitReport<T>> {
    cfg.validate()?;
    virtual_shape.check_topology(reference)?;
    let mesh = Mesh::covering(height, width, cfg.mesh_elements, cfg.margin);
    let mut net = TransformNet::<T>::new(cfg.net.clone(), mesh.frame, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: None,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.max_iters);
    let (mut strain, mut mismatch, mut min_j) = (f64::NAN, f64::NAN, f64::NAN);
    let mut converged = false;
    for it in 0..cfg.max_iters {
        let diverged = |s: f64, m: f64| Error::EnergyDiverged {
            iteration: it,
            strain: s,
            mismatch: m,
        };
        let t = Tape::new();
        let b = net.store.bind(&t);
        let se = strain_energy(&t, &net, &b, &mesh, &cfg.material).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(f64::NAN, f64::NAN),
            e => e,
        })?;
        strain = t.item(se.energy)?.to_f64_lossy();
        min_j = se.min_j;
        let mm = landmark_mismatch(&t, &net, &b, virtual_shape, reference, cfg.lambda).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(strain, f64::NAN),
            e => e,
        })?;
        mismatch = t.item(mm)?.to_f64_lossy();
        let pi = t.add(se.energy, mm).map_err(|_| diverged(strain, mismatch))?;
        let value = strain + mismatch;
        if !value.is_finite() {
            return Err(diverged(strain, mismatch));
        }
        history.push(value);
        if it >= cfg.window {
            let prev = history[it - cfg.window];
            if (value - prev).abs() <= cfg.tol * prev.abs().max(1e-12) {
                converged = true;
                break;
            }
        }
        let grads = t.backward(pi)?;
        let g = net.store.gradients(&grads, &b);
        let mut params: Vec<&mut DiffArray<T>> = net.store.values_mut().collect();
        adam.update(&mut params, &g);
    }
    let src: Vec<Point> = virtual_shape.points().copied().collect();
    let moved = net.apply(&src);
    let dist: Vec<f64> = moved
        .iter()
        .zip(reference.points())
        .map(|(m, r)| (m[0] - r[0]).hypot(m[1] - r[1]))
        .collect();
    let mean_residual = if dist.is_empty() { 0.0 } else { dist.iter().sum::<f64>() / dist.len() as f64 };
    let max_residual = dist.iter().copied().fold(0.0, f64::max);
    let det_fraction = net.positive_jacobian_fraction(&mesh.nodes());
    Ok(FitReport {
        net,
        mesh,
        iterations: history.len(),
        history,
        strain,
        mismatch,
        converged,
        mean_residual,
        max_residual,
        det_fraction,
        min_j,
    })
}
