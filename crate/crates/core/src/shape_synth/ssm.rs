use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{Point, Shape};
use crate::error::{Error, Result};
use crate::ndgrad::SeededRng;

/// How training shapes are registered before PCA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Centroid removal only; scale and orientation are kept.
    #[default]
    Translation,
    /// Generalized Procrustes: centroid, rotation and scale.
    Similarity,
}

/// Mean shape plus orthonormal PCA modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmModel {
    /// Topology template; coordinates are those of the mean shape.
    pub template: Shape,
    /// Mean shape vector (2K), placed at `centroid`.
    pub mean: Vec<f64>,
    /// Unit modes, each of length 2K, by decreasing variance.
    pub modes: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub alignment: Alignment,
    /// Mean centroid of the training shapes.
    pub centroid: Point,
    /// Mean centroid size of the training shapes (similarity alignment only).
    pub scale: f64,
    /// Fraction of total variance covered by the kept modes.
    pub retained_fraction: f64,
    pub training_count: usize,
}

fn centered(v: &[f64]) -> (Vec<f64>, Point) {
    let n = (v.len() / 2).max(1) as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in v.chunks_exact(2) {
        cx += p[0];
        cy += p[1];
    }
    let c = [cx / n, cy / n];
    (v.chunks_exact(2).flat_map(|p| [p[0] - c[0], p[1] - c[1]]).collect(), c)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rotation and scale taking centered `x` closest to centered `target`.
fn similarity_fit(x: &[f64], target: &[f64]) -> Vec<f64> {
    let (mut a, mut b) = (0.0, 0.0);
    for (p, q) in x.chunks_exact(2).zip(target.chunks_exact(2)) {
        a += p[0] * q[0] + p[1] * q[1];
        b += p[0] * q[1] - p[1] * q[0];
    }
    let xx = x.iter().map(|v| v * v).sum::<f64>();
    if xx == 0.0 {
        return x.to_vec();
    }
    let (s, c) = (b / xx, a / xx);
    x.chunks_exact(2).flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect()
}

fn procrustes(shapes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut reference: Vec<f64> = shapes[0].clone();
    let r = norm(&reference);
    if r > 0.0 {
        reference.iter_mut().for_each(|v| *v /= r);
    }
    let mut aligned = shapes.to_vec();
    for _ in 0..100 {
        aligned = shapes.iter().map(|s| similarity_fit(s, &reference)).collect();
        let mut mean = vec![0.0; reference.len()];
        for a in &aligned {
            mean.iter_mut().zip(a).for_each(|(m, x)| *m += x / shapes.len() as f64);
        }
        let mean = similarity_fit(&mean, &reference);
        let n = norm(&mean);
        if n == 0.0 {
            break;
        }
        let mean: Vec<f64> = mean.iter().map(|v| v / n).collect();
        let change = mean.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        reference = mean;
        if change < 1e-13 {
            break;
        }
    }
    aligned
}

/// PCA shape model of `shapes`, keeping the leading modes that cover
/// `retained_variance` of the total.
pub fn build_ssm(shapes: &[Shape], retained_variance: f64, alignment: Alignment) -> Result<SsmModel> {
    if shapes.len() < 2 {
        return Err(Error::invalid("build_ssm", format!("need at least 2 shapes, got {}", shapes.len())));
    }
    if !(0.0..=1.0).contains(&retained_variance) {
        return Err(Error::invalid("build_ssm", format!("retained variance {retained_variance} outside [0, 1]")));
    }
    for s in &shapes[1..] {
        shapes[0].check_topology(s)?;
    }
    let n = shapes.len();
    let d = 2 * shapes[0].num_points();
    let (centered_shapes, centroids): (Vec<Vec<f64>>, Vec<Point>) = shapes.iter().map(|s| centered(&s.to_vector())).unzip();
    let centroid = [
        centroids.iter().map(|c| c[0]).sum::<f64>() / n as f64,
        centroids.iter().map(|c| c[1]).sum::<f64>() / n as f64,
    ];
    let scale = centered_shapes.iter().map(|s| norm(s)).sum::<f64>() / n as f64;
    let rows = match alignment {
        Alignment::Translation => centered_shapes,
        Alignment::Similarity => procrustes(&centered_shapes)
            .into_iter()
            .map(|s| s.into_iter().map(|v| v * scale).collect())
            .collect(),
    };
    let mut mean_c = vec![0.0; d];
    for r in &rows {
        mean_c.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean_c.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean_c[j]);

    // Eigenpairs of the smaller of XᵀX and XXᵀ; both share the nonzero spectrum.
    let denom = (n - 1) as f64;
    let (values, vectors) = if d <= n {
        let e = SymmetricEigen::new(x.transpose() * &x / denom);
        (e.eigenvalues, e.eigenvectors)
    } else {
        let e = SymmetricEigen::new(&x * x.transpose() / denom);
        let mut modes = x.transpose() * &e.eigenvectors;
        for (k, mut col) in modes.column_iter_mut().enumerate() {
            let lam = e.eigenvalues[k];
            if lam > 0.0 {
                col /= (denom * lam).sqrt();
            }
        }
        (e.eigenvalues, modes)
    };
    let positive: f64 = values.iter().filter(|v| **v > 0.0).sum();
    // rounding leaves eigenvalues near ε·|shape|² even for identical inputs
    let tol = 1e-12 * positive.max(mean_c.iter().map(|v| v * v).sum::<f64>());
    let total: f64 = values.iter().filter(|v| **v > tol).sum();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut modes = Vec::new();
    let mut variances = Vec::new();
    let mut covered = 0.0;
    for &k in &order {
        let lam = values[k];
        if lam <= tol || covered >= retained_variance * total * (1.0 - 1e-12) {
            break;
        }
        let mut m: Vec<f64> = vectors.column(k).iter().copied().collect();
        let len = norm(&m);
        m.iter_mut().for_each(|v| *v /= len);
        modes.push(m);
        variances.push(lam);
        covered += lam;
    }
    let mean: Vec<f64> = mean_c
        .chunks_exact(2)
        .flat_map(|p| [p[0] + centroid[0], p[1] + centroid[1]])
        .collect();
    Ok(SsmModel {
        template: shapes[0].with_vector(&mean)?,
        mean,
        modes,
        variances,
        alignment,
        centroid,
        scale,
        retained_fraction: if total > 0.0 { covered / total } else { 1.0 },
        training_count: n,
    })
}

impl SsmModel {
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn mean_shape(&self) -> Shape {
        self.template.clone()
    }

    /// `mean + Σ c_k · mode_k`; missing trailing coefficients are zero.
    pub fn sample(&self, coefficients: &[f64]) -> Result<Shape> {
        if coefficients.len() > self.modes.len() {
            return Err(Error::invalid(
                "sample_ssm",
                format!("{} coefficients for {} modes", coefficients.len(), self.modes.len()),
            ));
        }
        let mut v = self.mean.clone();
        for (c, m) in coefficients.iter().zip(&self.modes) {
            v.iter_mut().zip(m).for_each(|(x, mk)| *x += c * mk);
        }
        self.template.with_vector(&v)
    }

    /// Draws `c_k ~ N(0, σ_k²)` truncated to `±clamp·σ_k`.
    pub fn sample_seeded(&self, seed: u64, clamp: f64) -> Result<(Shape, Vec<f64>)> {
        let mut rng = SeededRng::new(seed);
        let c: Vec<f64> = self.variances.iter().map(|v| v.sqrt() * rng.truncated_normal(clamp)).collect();
        Ok((self.sample(&c)?, c))
    }

    /// Mode coefficients of `shape` after registering it to the mean.
    pub fn project(&self, shape: &Shape) -> Result<Vec<f64>> {
        self.template.check_topology(shape)?;
        let (c, _) = centered(&shape.to_vector());
        let (mean_c, _) = centered(&self.mean);
        let aligned = match self.alignment {
            Alignment::Translation => c,
            Alignment::Similarity => similarity_fit(&c, &mean_c),
        };
        Ok(self
            .modes
            .iter()
            .map(|m| m.iter().zip(aligned.iter().zip(&mean_c)).map(|(mk, (a, b))| mk * (a - b)).sum())
            .collect())
    }
}
