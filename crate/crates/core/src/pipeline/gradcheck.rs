//! Finite-difference suites over every differentiable component, as run by
//! the `gradcheck` command.

use serde::Serialize;

use crate::error::Result;
use crate::image::{GrayImage, LabelMask};
use crate::loss_metrics::{combined_loss, LossConfig};
use crate::ndgrad::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::ndgrad::{Bound, Conv2dParams, DiffArray, PadMode, ParamStore, ResizeMode, SeededRng, Tape, Var};
use crate::rpe_attention::{ProjectionKind, RpeConfig, RpeParams};
use crate::shape_synth::{strain_energy, Frame, Material, Mesh, TransformNet, TransformNetConfig};
use crate::symtc_net::{pixel_probabilities, NetworkConfig, SymTc};

/// Worst relative error of one check against its tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub suite: &'static str,
    pub case: String,
    pub worst_rel: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst_rel <= self.tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteSummary {
    pub suite: &'static str,
    pub cases: usize,
    pub worst_rel: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const SUITES: [&str; 5] = ["kernels", "rmha", "loss", "micro_symtc", "strain"];

fn rand_array(shape: &[usize], rng: &mut SeededRng) -> DiffArray<f64> {
    DiffArray::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

/// `sum(y ⊙ r)` with a fixed random `r`.
fn probe(t: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = t.constant(rand_array(&t.shape(y), &mut SeededRng::new(seed)));
    let m = t.mul(y, r)?;
    t.sum(m)
}

fn case(suite: &'static str, name: impl Into<String>, tolerance: f64, rep: GradCheckReport) -> CaseResult {
    CaseResult {
        suite,
        case: name.into(),
        worst_rel: rep.worst_rel,
        tolerance,
        checked: rep.checked,
    }
}

type Build = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

fn kernel_cases() -> Vec<(String, Vec<DiffArray<f64>>, Build)> {
    let mut rng = SeededRng::new(101);
    let mut v: Vec<(String, Vec<DiffArray<f64>>, Build)> = Vec::new();
    let a = rand_array(&[3, 4], &mut rng);
    let b = rand_array(&[1, 4], &mut rng);
    let c = rand_array(&[3, 1], &mut rng).map(|x| x.abs() + 0.5);
    v.push((
        "add/sub/mul/div (broadcast)".into(),
        vec![a, b, c],
        Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[2])?;
            let m = t.mul(d, v[1])?;
            let q = t.div(m, v[2])?;
            probe(t, q, 1)
        }),
    ));
    // keep unary inputs away from the relu/clamp kinks
    let x = rand_array(&[5, 3], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let xc = x.map(|v| if (v + 0.5).abs() < 0.05 { v + 0.2 } else { v });
    type Unary = fn(&Tape<f64>, Var) -> Result<Var>;
    let unary: [(&str, Unary); 6] = [
        ("sin", |t, v| t.sin(v)),
        ("cos", |t, v| t.cos(v)),
        ("exp", |t, v| t.exp(v)),
        ("relu", |t, v| t.relu(v)),
        ("square", |t, v| t.square(v)),
        ("clamp_min", |t, v| t.clamp_min(v, -0.5)),
    ];
    for (name, op) in unary {
        v.push((
            name.into(),
            vec![xc.clone()],
            Box::new(move |t, v| {
                let y = op(t, v[0])?;
                probe(t, y, 2)
            }),
        ));
    }
    let pos = rand_array(&[5, 3], &mut rng).map(|v| v.abs() + 0.3);
    v.push((
        "log/sqrt/powf".into(),
        vec![pos],
        Box::new(|t, v| {
            let l = t.log(v[0])?;
            let s = t.sqrt(v[0])?;
            let p = t.powf(v[0], 2.5)?;
            let a = t.add(l, s)?;
            let b = t.add(a, p)?;
            probe(t, b, 3)
        }),
    ));
    let (a, b) = (rand_array(&[4, 2], &mut rng), rand_array(&[4, 2], &mut rng));
    v.push((
        "map2/scale/add_scalar".into(),
        vec![a, b],
        Box::new(|t, v| {
            let y = t.map2("xy_sin", v[0], v[1], |x, y| (x * y.sin(), y.sin(), x * y.cos()))?;
            let y = t.scale(y, -1.7)?;
            let y = t.add_scalar(y, 0.3)?;
            probe(t, y, 4)
        }),
    ));
    let (a, b) = (rand_array(&[3, 5], &mut rng), rand_array(&[5, 2], &mut rng));
    v.push((
        "matmul/transpose/reshape".into(),
        vec![a, b],
        Box::new(|t, v| {
            let c = t.matmul(v[0], v[1])?;
            let ct = t.transpose(c)?;
            let r = t.reshape(ct, &[6])?;
            probe(t, r, 5)
        }),
    ));
    let (a, b) = (rand_array(&[2, 3, 2], &mut rng), rand_array(&[2, 1, 2], &mut rng));
    v.push((
        "concat/narrow/sum/mean".into(),
        vec![a, b],
        Box::new(|t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let n = t.narrow(c, 1, 1, 3)?;
            let s = t.sum_axis(n, 2)?;
            let m = t.mean_axis(c, 0)?;
            let p = probe(t, s, 6)?;
            let q = probe(t, m, 7)?;
            let all = t.mean(c)?;
            let pq = t.add(p, q)?;
            t.add(pq, all)
        }),
    ));
    let x = rand_array(&[4, 5], &mut rng).map(|v| 3.0 * v);
    v.push((
        "softmax".into(),
        vec![x],
        Box::new(|t, v| {
            let y = t.softmax(v[0])?;
            probe(t, y, 8)
        }),
    ));
    let convs = [
        ("conv2d same/zeros", Conv2dParams::same(3, PadMode::Zeros), 3),
        ("conv2d same/circular", Conv2dParams::same(3, PadMode::Circular), 3),
        (
            "conv2d strided/dilated",
            Conv2dParams {
                stride: (2, 1),
                padding: (1, 2),
                dilation: (1, 2),
                pad_mode: PadMode::Zeros,
            },
            3,
        ),
        ("conv2d patch", Conv2dParams::patch(2), 2),
    ];
    for (name, p, k) in convs {
        let inputs = vec![rand_array(&[2, 6, 6], &mut rng), rand_array(&[3, 2, k, k], &mut rng), rand_array(&[3], &mut rng)];
        v.push((
            name.into(),
            inputs,
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), p)?;
                probe(t, y, 9)
            }),
        ));
    }
    let tconvs = [
        ("conv_transpose2d patch", Conv2dParams::patch(2), 2),
        (
            "conv_transpose2d padded",
            Conv2dParams {
                stride: (2, 2),
                padding: (1, 1),
                ..Conv2dParams::default()
            },
            3,
        ),
    ];
    for (name, p, k) in tconvs {
        let inputs = vec![rand_array(&[3, 3, 4], &mut rng), rand_array(&[3, 2, k, k], &mut rng), rand_array(&[2], &mut rng)];
        v.push((
            name.into(),
            inputs,
            Box::new(move |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), p)?;
                probe(t, y, 10)
            }),
        ));
    }
    for (name, mode) in [("resize nearest", ResizeMode::Nearest), ("resize bilinear", ResizeMode::Bilinear)] {
        v.push((
            name.into(),
            vec![rand_array(&[2, 4, 5], &mut rng)],
            Box::new(move |t, v| {
                let up = t.resize(v[0], (7, 9), mode)?;
                let down = t.resize(up, (3, 3), mode)?;
                let a = probe(t, up, 11)?;
                let b = probe(t, down, 12)?;
                t.add(a, b)
            }),
        ));
    }
    v.push((
        "group_norm/layer_norm".into(),
        vec![rand_array(&[4, 3, 3], &mut rng), rand_array(&[5, 6], &mut rng)],
        Box::new(|t, v| {
            let g = t.group_norm(v[0], 2, 1e-5)?;
            let l = t.layer_norm(v[1], 1e-5)?;
            let a = probe(t, g, 13)?;
            let b = probe(t, l, 14)?;
            t.add(a, b)
        }),
    ));
    let img = rand_array(&[2, 5, 6], &mut rng);
    let mut grid = DiffArray::from_fn(&[3, 4, 2], |i| {
        if i % 2 == 0 {
            rng.uniform_in(0.2, 4.8)
        } else {
            rng.uniform_in(0.2, 3.8)
        }
    });
    grid.data_mut()[0] = -1.3;
    grid.data_mut()[3] = 7.5;
    v.push((
        "grid_sample".into(),
        vec![img, grid],
        Box::new(|t, v| {
            let y = t.grid_sample(v[0], v[1])?;
            probe(t, y, 15)
        }),
    ));
    v
}

/// Every tape kernel on small random inputs; tolerance 1e-6.
pub fn kernel_suite() -> Result<Vec<CaseResult>> {
    kernel_cases()
        .into_iter()
        .map(|(name, inputs, f)| Ok(case("kernels", name, 1e-6, check_gradients(&inputs, &GradCheckOptions::default(), f)?)))
        .collect()
}

fn randomized_store(store: &mut ParamStore<f64>, rng: &mut SeededRng) {
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.uniform_in(-1.0, 1.0));
    }
}

fn kink_safe() -> GradCheckOptions {
    GradCheckOptions {
        retry_steps: vec![1e-6, 1e-7],
        retry_above: 1e-4,
        ..GradCheckOptions::default()
    }
}

/// Relative-position attention, all parameters plus tokens and positions; tolerance 1e-4.
pub fn rmha_suite() -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for projection in [ProjectionKind::Linear, ProjectionKind::Mlp] {
        let cfg = RpeConfig {
            projection,
            ..RpeConfig::new(4, 2)
        };
        let mut rng = SeededRng::new(201);
        let mut store = ParamStore::new();
        let params = RpeParams::new(&mut store, "attn", cfg, &mut rng)?;
        randomized_store(&mut store, &mut rng);
        let mut inputs: Vec<DiffArray<f64>> = store.iter().map(|(_, v)| v.clone()).collect();
        let np = inputs.len();
        inputs.push(rand_array(&[4, 4], &mut rng));
        inputs.push(rand_array(&[4, 2], &mut rng));
        let rep = check_gradients(&inputs, &kink_safe(), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let f = params.forward(t, &b, v[np], v[np + 1])?;
            probe(t, f.out, 16)
        })?;
        out.push(case("rmha", format!("{projection:?} projection"), 1e-4, rep));
    }
    Ok(out)
}

fn striped_mask(h: usize, w: usize, classes: usize) -> LabelMask {
    LabelMask::new(h, w, (0..h * w).map(|i| ((i / w) * classes / h) as u8).collect()).expect("dims")
}

/// Combined Dice + area-weighted CE through a softmax; tolerance 1e-5.
pub fn loss_suite() -> Result<Vec<CaseResult>> {
    let mut rng = SeededRng::new(301);
    let mut out = Vec::new();
    for classes in [2, 3] {
        let m = striped_mask(8, 8, classes);
        let logits = DiffArray::from_fn(&[64, classes], |_| rng.uniform_in(-2.0, 2.0));
        let cfg = LossConfig::new(classes);
        let rep = check_gradients(&[logits], &GradCheckOptions::default(), |t, v| {
            let p = t.softmax(v[0])?;
            Ok(combined_loss(t, p, &m, &cfg)?.total)
        })?;
        out.push(case("loss", format!("{classes} classes"), 1e-5, rep));
    }
    Ok(out)
}

/// Every parameter of the micro network under the combined loss; tolerance 1e-4.
pub fn micro_suite() -> Result<Vec<CaseResult>> {
    let net = SymTc::<f64>::new(NetworkConfig::micro(2), 11)?;
    let mut rng = SeededRng::new(401);
    let img = GrayImage::new(8, 8, (0..64).map(|_| rng.uniform()).collect())?;
    let mask = striped_mask(8, 8, 2);
    let loss = LossConfig::new(2);
    let inputs: Vec<DiffArray<f64>> = net.store.iter().map(|(_, v)| v.clone()).collect();
    let rep = check_gradients(&inputs, &kink_safe(), |t, vars| {
        let b = Bound::from_vars(vars.to_vec());
        let x = t.constant(img.to_array());
        let logits = net.forward(t, &b, x)?;
        let probs = pixel_probabilities(t, logits)?;
        Ok(combined_loss(t, probs, &mask, &loss)?.total)
    })?;
    Ok(vec![case("micro_symtc", "micro config, 2 classes", 1e-4, rep)])
}

/// Strain energy with respect to the transform net's parameters at
/// initialization; tolerance 1e-4.
pub fn strain_suite() -> Result<Vec<CaseResult>> {
    let cfg = TransformNetConfig {
        hidden: vec![12, 12],
        ..TransformNetConfig::default()
    };
    let net = TransformNet::<f64>::new(cfg, Frame::for_image(32, 32), 2)?;
    let mesh = Mesh::covering(32, 32, 6, 1.0);
    let inputs: Vec<DiffArray<f64>> = net.store.iter().map(|(_, v)| v.clone()).collect();
    let opts = GradCheckOptions {
        h: 1e-6,
        ..GradCheckOptions::default()
    };
    let plain = Material {
        stress_free: false,
        ..Material::default()
    };
    let mut out = Vec::new();
    for (name, mat) in [("stress-free Ogden", Material::default()), ("plain Ogden", plain)] {
        let rep = check_gradients(&inputs, &opts, |t, vars| {
            let b = Bound::from_vars(vars.to_vec());
            Ok(strain_energy(t, &net, &b, &mesh, &mat)?.energy)
        })?;
        out.push(case("strain", name, 1e-4, rep));
    }
    Ok(out)
}

pub fn run_suite(name: &str) -> Result<Vec<CaseResult>> {
    match name {
        "kernels" => kernel_suite(),
        "rmha" => rmha_suite(),
        "loss" => loss_suite(),
        "micro_symtc" => micro_suite(),
        "strain" => strain_suite(),
        _ => Err(crate::Error::invalid("gradcheck", format!("unknown suite {name:?}; known: {}", SUITES.join(", ")))),
    }
}

pub fn summarize(suite: &'static str, cases: &[CaseResult]) -> SuiteSummary {
    SuiteSummary {
        suite,
        cases: cases.len(),
        worst_rel: cases.iter().map(|c| c.worst_rel).fold(0.0, f64::max),
        tolerance: cases.first().map(|c| c.tolerance).unwrap_or(0.0),
        passed: cases.iter().all(CaseResult::passed),
    }
}
