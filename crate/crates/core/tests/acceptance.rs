//! Acceptance checks. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use symtc::image::{GrayImage, LabelMask};
use symtc::io::{load_model, save_model, AugmentConfig, RunConfig};
use symtc::loss_metrics::{area_weights, combined_loss, dsc, evaluate, hd95, robustness_sweep, Axis, LossConfig, Segmenter};
use symtc::ndgrad::{DiffArray, PadMode, ParamStore, SeededRng, Tape};
use symtc::pipeline::gradcheck::{run_suite, summarize, SUITES};
use symtc::pipeline::{ablate, toy_dataset, train_model};
use symtc::rpe_attention::{ClassicParams, RpeConfig, RpeParams, TokenSet};
use symtc::shape_synth::{
    build_ssm, elastic_augment, fit_transform, phantom_shape, render_phantom, synth_sample, Alignment, ElasticConfig, EnergyConfig, PhantomConfig,
    Shape, SynthConfig,
};
use symtc::symtc_net::{NetworkConfig, SymTc};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randomized_layer(cfg: RpeConfig, rng: &mut SeededRng) -> (ParamStore<f64>, RpeParams) {
    let mut store = ParamStore::new();
    let params = RpeParams::new(&mut store, "attn", cfg, rng).unwrap();
    for v in store.values_mut() {
        v.data_mut().iter_mut().for_each(|x| *x = rng.uniform_in(-1.0, 1.0));
    }
    (store, params)
}

fn uniform_vec(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
}

fn c01_dual_form_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let (e, h) = [(8, 2), (12, 3), (16, 4), (4, 1)][draw % 4];
        let (store, p) = randomized_layer(RpeConfig::new(e, h), &mut rng);
        let (xi, xj) = (uniform_vec(e, &mut rng), uniform_vec(e, &mut rng));
        let pi = [rng.uniform_in(-4.0, 4.0), rng.uniform_in(-4.0, 4.0)];
        let pj = [rng.uniform_in(-4.0, 4.0), rng.uniform_in(-4.0, 4.0)];
        for head in 0..h {
            let block = RpeParams::dot_block(&p.query_vector(&store, &xi, pi, head), &p.key_vector(&store, &xj, pj, head));
            let closed = p.dot_closed(&store, &xi, &xj, [pi[0] - pj[0], pi[1] - pj[1]], head);
            worst = worst.max((block - closed).abs() / block.abs().max(closed.abs()).max(1e-12));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-10 && secs < 1.0, format!("worst relative gap {worst:.2e} over 100 draws in {secs:.3} s"))
}

fn c02_translation_invariance() -> Outcome {
    let mut rng = SeededRng::new(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (store, p) = randomized_layer(RpeConfig::new(8, 2), &mut rng);
        let n = rng.int_in(1, 10) as usize;
        let tk = TokenSet::new(
            DiffArray::from_fn(&[n, 8], |_| rng.uniform_in(-1.0, 1.0)),
            DiffArray::from_fn(&[n, 2], |_| rng.uniform_in(-8.0, 8.0)),
        )
        .unwrap();
        let moved = tk.shifted([rng.uniform_in(-20.0, 20.0), rng.uniform_in(-20.0, 20.0)]);
        let (a, b) = (p.scores(&store, &tk).unwrap(), p.scores(&store, &moved).unwrap());
        for (x, y) in a.heads.iter().zip(&b.heads) {
            worst = worst.max(x.max_abs_diff(y));
        }
        worst = worst.max(p.output(&store, &tk).unwrap().max_abs_diff(&p.output(&store, &moved).unwrap()));
    }
    check(worst <= 1e-9, format!("max |Δ| of scores and outputs {worst:.2e} over 50 token sets"))
}

fn c03_gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for name in SUITES {
        let s = summarize(name, &run_suite(name).map_err(|e| e.to_string())?);
        ok &= s.passed;
        parts.push(format!("{} {:.1e}/{:.0e}", s.suite, s.worst_rel, s.tolerance));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 600.0, format!("{} in {secs:.1} s", parts.join(", ")))
}

fn c04_decomposition() -> Outcome {
    let mut rng = SeededRng::new(404);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, e) = (rng.int_in(1, 6) as usize, 6);
        let mut store = ParamStore::<f64>::new();
        let c = ClassicParams::new(&mut store, "mhsa", e, 2, &mut rng).unwrap();
        let x = DiffArray::from_fn(&[n, e], |_| rng.uniform_in(-1.0, 1.0));
        let pos = DiffArray::from_fn(&[n, e], |_| rng.uniform_in(-1.0, 1.0));
        let d = c.decomposition(&store, &x, &pos).unwrap();
        let (wq, wk) = (store.get(c.w_q), store.get(c.w_k));
        // (x_i + p_i) W_Q · (x_j + p_j) W_K, expanded by index loops
        for i in 0..n {
            for j in 0..n {
                let mut direct = 0.0;
                for m in 0..e {
                    let q: f64 = (0..e).map(|k| (x.at(&[i, k]) + pos.at(&[i, k])) * wq.at(&[k, m])).sum();
                    let kk: f64 = (0..e).map(|k| (x.at(&[j, k]) + pos.at(&[j, k])) * wk.at(&[k, m])).sum();
                    direct += q * kk;
                }
                let sum = d.content_content.at(&[i, j]) + d.content_position.at(&[i, j]) + d.position_position.at(&[i, j]);
                worst = worst.max((sum - direct).abs());
            }
        }
    }
    check(worst <= 1e-10, format!("max |terms − direct| {worst:.2e} over 50 cases"))
}

/// Pixels of `class` with a 4-neighbour of another label or outside the image.
fn boundary_points(m: &LabelMask, class: u8) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for r in 0..m.height {
        for c in 0..m.width {
            if m.get(r, c) != class {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == m.height || c + 1 == m.width;
            let differs = !edge && [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)].iter().any(|&(y, x)| m.get(y, x) != class);
            if edge || differs {
                pts.push((r as f64, c as f64));
            }
        }
    }
    pts
}

fn directed_p95(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|a| to.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
        .collect();
    d.sort_by(f64::total_cmp);
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    let f = rank - lo as f64;
    d[lo] * (1.0 - f) + d[hi] * f
}

fn c05_metric_oracles() -> Outcome {
    let mut rng = SeededRng::new(505);
    let (mut dsc_exact, mut hd_worst) = (true, 0.0f64);
    let mut n = 0;
    while n < 200 {
        let (h, w) = (rng.int_in(2, 9) as usize, rng.int_in(2, 9) as usize);
        let density = rng.uniform_in(0.1, 0.7);
        let mut draw = || LabelMask::new(h, w, (0..h * w).map(|_| (rng.uniform() < density) as u8).collect()).unwrap();
        let (p, t) = (draw(), draw());
        let (np, nt) = (p.count(1), t.count(1));
        if np == 0 || nt == 0 {
            continue;
        }
        n += 1;
        let inter = p.data.iter().zip(&t.data).filter(|(a, b)| **a == 1 && **b == 1).count();
        dsc_exact &= dsc(&p, &t, 1, 2).unwrap() == 100.0 * 2.0 * inter as f64 / (np + nt) as f64;
        let (bp, bt) = (boundary_points(&p, 1), boundary_points(&t, 1));
        let oracle = directed_p95(&bp, &bt).max(directed_p95(&bt, &bp));
        hd_worst = hd_worst.max((hd95(&p, &t, 1, None).unwrap() - oracle).abs());
    }
    let mut a = LabelMask::zeros(6, 6);
    a.set(0, 0, 1);
    let mut b = LabelMask::zeros(6, 6);
    b.set(3, 4, 1);
    let single = hd95(&a, &b, 1, None).unwrap();
    check(
        dsc_exact && hd_worst <= 1e-9 && single == 5.0,
        format!("DSC exact on 200 masks: {dsc_exact}; HD95 max gap {hd_worst:.1e}; single pixels (0,0)/(3,4) → {single}"),
    )
}

fn c06_loss_anchors() -> Outcome {
    let total = |probs: DiffArray<f64>, m: &LabelMask, classes: usize| {
        let t = Tape::new();
        let v = t.constant(probs);
        let terms = combined_loss(&t, v, m, &LossConfig::new(classes)).unwrap();
        (t.item(terms.total).unwrap(), t.item(terms.dice).unwrap())
    };
    let m = LabelMask::new(3, 3, vec![0, 1, 1, 0, 2, 2, 0, 1, 2]).unwrap();
    let (perfect, _) = total(m.one_hot(3), &m, 3);
    // class 3 absent from both truth and prediction
    let (_, empty_dice) = total(m.one_hot(4), &m, 4);
    let mut rng = SeededRng::new(606);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let classes = rng.int_in(2, 12) as usize;
        let n = rng.int_in(1, 64) as usize;
        let mask = LabelMask::new(1, n, (0..n).map(|_| rng.int_in(0, classes as i64 - 1) as u8).collect()).unwrap();
        worst = worst.max((area_weights(&mask, classes).iter().sum::<f64>() - 1.0).abs());
    }
    check(
        perfect == 0.0 && empty_dice == 0.0 && worst <= 1e-12,
        format!("perfect loss {perfect}; dice with a doubly-empty class {empty_dice}; area weights sum off by ≤ {worst:.1e}"),
    )
}

fn c07_energy_pipeline() -> Outcome {
    let pc = PhantomConfig::default();
    let (h, w) = (pc.size, pc.size);
    let training: Vec<Shape> = (0..20).map(|k| phantom_shape(&pc, 700 + k).unwrap()).collect();
    let ssm = build_ssm(&training, 0.95, Alignment::Translation).unwrap();
    let reference = ssm.mean_shape();
    let sd: Vec<f64> = ssm.variances.iter().map(|v| v.sqrt()).collect();
    let mode = |k: usize, s: f64| {
        let mut c = vec![0.0; sd.len()];
        c[k] = s * sd[k];
        ssm.sample(&c).unwrap()
    };
    let all = |s: f64| ssm.sample(&sd.iter().map(|d| s * d / (sd.len() as f64).sqrt()).collect::<Vec<_>>()).unwrap();
    let pairs: Vec<(&str, Shape)> = vec![
        ("identity", reference.clone()),
        ("translation", reference.translated(1.5, -2.0)),
        ("mode1 +1σ", mode(0, 1.0)),
        ("mode1 −1σ", mode(0, -1.0)),
        ("mode1 +2σ", mode(0, 2.0)),
        ("mode1 −2σ", mode(0, -2.0)),
        ("all modes +1σ", all(1.0)),
        ("all modes −2σ", all(-2.0)),
    ];
    let cfg = EnergyConfig::default();
    let results: Vec<(String, bool)> = pairs
        .par_iter()
        .map(|(name, virt)| {
            let start = Instant::now();
            match fit_transform::<f64>(virt, &reference, h, w, &cfg) {
                Ok(f) => {
                    let secs = start.elapsed().as_secs_f64();
                    let ok = f.mean_residual <= 0.5 && f.iterations <= 2000 && f.det_fraction >= 0.99 && secs <= 300.0;
                    (
                        format!("{name}: {:.3} px, det>0 {:.3}, {} it, {secs:.0} s", f.mean_residual, f.det_fraction, f.iterations),
                        ok,
                    )
                }
                Err(e) => (format!("{name}: {e}"), false),
            }
        })
        .collect();
    let ok = results.iter().all(|r| r.1);
    check(ok, results.into_iter().map(|r| r.0).collect::<Vec<_>>().join("; "))
}

fn c08_identity_synthesis() -> Outcome {
    let pc = PhantomConfig::default();
    let shape = phantom_shape(&pc, 808).unwrap();
    let (img, _) = render_phantom(&shape, &pc, 808).unwrap();
    let out = synth_sample(&img, &shape, &shape, &SynthConfig::default()).map_err(|e| e.to_string())?;
    let d = out.image.mean_abs_diff(&img);
    check(d <= 0.02, format!("mean |Δ intensity| {d:.2e}"))
}

fn c09_elastic() -> Outcome {
    let mut rng = SeededRng::new(909);
    let img = GrayImage::new(64, 64, (0..4096).map(|_| rng.uniform()).collect()).unwrap();
    let mask = LabelMask::new(64, 64, (0..4096).map(|i| ((i % 64) / 22) as u8).collect()).unwrap();
    let zero = ElasticConfig {
        sigma: 0.0,
        grids: vec![9, 17],
    };
    let identity = elastic_augment(&img, &mask, &zero, 3).unwrap();
    let bitwise = identity.0.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits()) && identity.1 == mask;
    let cfg = ElasticConfig {
        sigma: 0.25,
        grids: vec![9, 17],
    };
    let a = elastic_augment(&img, &mask, &cfg, 5).unwrap();
    let b = elastic_augment(&img, &mask, &cfg, 5).unwrap();
    let c = elastic_augment(&img, &mask, &cfg, 6).unwrap();
    check(
        bitwise && a == b && a != c && a.0 != img,
        format!("σ=0 bitwise identity: {bitwise}; σ=0.25 on 9×9 then 17×17 repeatable per seed: {}; seeds differ: {}", a == b, a != c),
    )
}

fn c10_toy_overfit() -> Outcome {
    let start = Instant::now();
    let data = toy_dataset(4, 64, 7).map_err(|e| e.to_string())?;
    let mut run = RunConfig::new(NetworkConfig::toy(3));
    run.augmentation = AugmentConfig::off();
    run.optimizer.lr = 1e-4;
    run.optimizer.clip_norm = Some(1.0);
    run.optimizer.batch_size = 1;
    run.optimizer.epochs = 500;
    run.seeds.init = 3;
    let mut net = SymTc::<f32>::new(run.network.clone(), run.seeds.init).unwrap();
    let logs = train_model(&mut net, &data, &run, |l, _| Ok(l.train_dsc.is_some_and(|d| d >= 95.0))).map_err(|e| e.to_string())?;
    let last = logs.last().unwrap();
    let dsc = evaluate(&net, &data, 3, None).unwrap().mean_dsc();
    let mins = start.elapsed().as_secs_f64() / 60.0;
    check(
        dsc >= 95.0 && mins < 30.0,
        format!("training DSC {dsc:.2}% at epoch {} (loss {:.4}) in {mins:.1} min", last.epoch, last.loss),
    )
}

/// Labels pixels by intensity band; commutes with translation.
struct BandModel;

impl Segmenter for BandModel {
    fn segment(&self, image: &GrayImage) -> symtc::Result<LabelMask> {
        LabelMask::new(image.height, image.width, image.data.iter().map(|&v| (v * 3.0).floor().min(2.0) as u8).collect())
    }
}

fn roll(a: &DiffArray<f64>, dy: usize, dx: usize) -> DiffArray<f64> {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    DiffArray::from_fn(&[c, h, w], |i| a.at(&[i / (h * w), ((i / w) % h + h - dy) % h, (i % w + w - dx) % w]))
}

fn c11_robustness() -> Outcome {
    let samples: Vec<(GrayImage, LabelMask)> = (0..3)
        .map(|k| {
            let m = LabelMask::new(
                128,
                128,
                (0..128 * 128)
                    .map(|i| {
                        let (r, c) = (i / 128, i % 128);
                        if (44..84).contains(&r) && (44 + k..84).contains(&c) {
                            1 + ((r + c) / 20 % 2) as u8
                        } else {
                            0
                        }
                    })
                    .collect(),
            )
            .unwrap();
            let img = GrayImage::new(128, 128, m.data.iter().map(|&l| (l as f64 + 0.5) / 3.0).collect()).unwrap();
            (img, m)
        })
        .collect();
    let shifts = [0, 10, 20, 30, 40];
    let mut perfect = true;
    for axis in [Axis::Horizontal, Axis::Vertical] {
        let rep = robustness_sweep(&BandModel, &samples, 3, axis, &shifts, 0.0, 40).map_err(|e| e.to_string())?;
        perfect &= rep.rows.len() == 5 && rep.mean_dsc().iter().all(|&(_, d)| d == 100.0);
    }
    let cnn_only = |mut cfg: NetworkConfig| {
        cfg.pad_mode = PadMode::Circular;
        for m in cfg.tc_modules_mut() {
            m.enable_transformer = false;
        }
        cfg
    };
    // pooling commutes with shifts by multiples of the total stride; a
    // single-level network commutes with every shift
    let toy = cnn_only(NetworkConfig::toy(3));
    let stride = *toy.strides.last().unwrap();
    let mut single = cnn_only(NetworkConfig::micro(3));
    single.height = 12;
    single.width = 12;
    let mut worst: f64 = 0.0;
    let mut rng = SeededRng::new(1111);
    for (cfg, moves) in [
        (toy, vec![(0, stride), (2 * stride, 0), (3 * stride, stride)]),
        (single, vec![(0, 1), (3, 5), (11, 7)]),
    ] {
        let net = SymTc::<f64>::new(cfg.clone(), 11).unwrap();
        let x = DiffArray::from_fn(&[1, cfg.height, cfg.width], |_| rng.uniform());
        let base = net.predict_array(&x).unwrap().logits;
        for (dy, dx) in moves {
            worst = worst.max(net.predict_array(&roll(&x, dy, dx)).unwrap().logits.max_abs_diff(&roll(&base, dy, dx)));
        }
    }
    check(
        perfect && worst <= 1e-9,
        format!("oracle DSC 100 at shifts {shifts:?} on both axes: {perfect}; CNN-only circular logits equivariant within {worst:.1e} (shifts in multiples of the stride {stride})"),
    )
}

fn c12_ablation() -> Outcome {
    let rows = ablate(&NetworkConfig::toy(3), 12, None).map_err(|e| e.to_string())?;
    let bad: Vec<&str> = rows.iter().filter(|r| !r.accounting_ok() || !r.forward_ok).map(|r| r.setting.as_str()).collect();
    check(
        bad.is_empty(),
        format!("{} path settings built and run forward; parameter accounting exact for {}; failing: {bad:?}", rows.len(), rows.len() - bad.len()),
    )
}

fn c13_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("toy.stc");
    let net = SymTc::<f32>::new(NetworkConfig::toy(3), 13).unwrap();
    save_model(&path, &net).map_err(|e| e.to_string())?;
    let back = load_model::<f32>(&path).map_err(|e| e.to_string())?;
    let bits = |n: &SymTc<f32>| -> Vec<(String, Vec<u32>)> {
        n.store.iter().map(|(k, v)| (k.to_string(), v.data().iter().map(|x| x.to_bits()).collect())).collect()
    };
    let weights = bits(&net) == bits(&back) && back.config == net.config;

    fn same<V: serde::Serialize + serde::de::DeserializeOwned + PartialEq>(v: &V) -> bool {
        let s = serde_json::to_string(v).unwrap();
        let back: V = serde_json::from_str(&s).unwrap();
        back == *v && serde_json::to_string(&back).unwrap() == s
    }
    let pc = PhantomConfig::default();
    let shapes: Vec<Shape> = (0..8).map(|k| phantom_shape(&pc, 1300 + k).unwrap()).collect();
    let ssm = build_ssm(&shapes, 0.95, Alignment::Similarity).unwrap();
    let json = same(&shapes[0]) && same(&ssm) && same(&RunConfig::new(NetworkConfig::paper_scale(12))) && same(&SynthConfig::default());
    check(weights && json, format!("f32 weights bit-exact: {weights}; shape/SSM/config JSON identical: {json}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("dual-form RPE identity", c01_dual_form_identity),
        ("translation invariance", c02_translation_invariance),
        ("gradient suite", c03_gradient_suite),
        ("additive-position decomposition", c04_decomposition),
        ("metric oracles", c05_metric_oracles),
        ("loss anchors", c06_loss_anchors),
        ("energy pipeline", c07_energy_pipeline),
        ("identity synthesis", c08_identity_synthesis),
        ("elastic deformation", c09_elastic),
        ("toy overfit", c10_toy_overfit),
        ("robustness harness", c11_robustness),
        ("ablation accounting", c12_ablation),
        ("persistence", c13_persistence),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut total = Duration::ZERO;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let dt = start.elapsed();
        total += dt;
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {tag} {name} [{:.1} s]: {detail}", dt.as_secs_f64());
    }
    println!("acceptance: {failed} failing, {:.0} s total", total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
