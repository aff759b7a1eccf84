use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use symtc::io::{
    atomic_write, load_json, load_model, run_config_schema, save_json, save_model, write_image, write_mask, AugmentConfig, BitDepth,
    DatasetManifest, RunConfig, SampleRecord,
};
use symtc::loss_metrics::{evaluate, robustness_sweep, Axis, EvalReport};
use symtc::ndgrad::SeededRng;
use symtc::pipeline::gradcheck::{run_suite, summarize, CaseResult, SUITES};
use symtc::pipeline::{ablate as run_ablation, ablation_text, ablation_tsv, augment_sample, ssm_phantom_dataset, train_model, AblationTraining};
use symtc::shape_synth::{build_ssm, phantom_dataset, synth_dataset, Alignment, ElasticConfig, PhantomConfig, Shape, SynthConfig};
use symtc::symtc_net::{NetworkConfig, SymTc};
use symtc::{Error, GrayImage, LabelMask, Real};

use crate::{AblateArgs, AugmentArgs, ConfigCommand, EvalArgs, OutputFormat, PhantomArgs, Precision, Preset, RobustnessArgs, SsmCommand, SynthArgs, TrainArgs};

/// A library error, or a run that completed but did not meet its bar.
pub enum Failure {
    Core(Error),
    Unmet { kind: &'static str, message: String },
}

impl Failure {
    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.kind(),
            Failure::Unmet { kind, .. } => kind,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => e.fmt(f),
            Failure::Unmet { message, .. } => f.write_str(message),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Config(msg.into()))
}

fn to_json<V: Serialize>(v: &V) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

/// Writes samples under `out/{images,masks,shapes}` and collects the manifest.
struct DatasetWriter {
    out: PathBuf,
    manifest: DatasetManifest,
}

impl DatasetWriter {
    fn new(out: &Path, split: &str, class_count: usize) -> Result<Self> {
        for sub in ["images", "masks", "shapes"] {
            let d = out.join(sub);
            std::fs::create_dir_all(&d).map_err(|source| Error::Io {
                path: d.display().to_string(),
                source,
            })?;
        }
        Ok(Self {
            out: out.to_path_buf(),
            manifest: DatasetManifest::new(split, class_count),
        })
    }

    fn add(&mut self, mut record: SampleRecord, image: &GrayImage, mask: &LabelMask, shape: Option<&Shape>) -> Result<()> {
        let id = record.id.clone();
        record.image = PathBuf::from(format!("images/{id}.pgm"));
        record.mask = PathBuf::from(format!("masks/{id}.pgm"));
        write_image(&self.out.join(&record.image), image, BitDepth::Sixteen)?;
        write_mask(&self.out.join(&record.mask), mask)?;
        record.shape = match shape {
            Some(s) => {
                let p = PathBuf::from(format!("shapes/{id}.json"));
                save_json(&self.out.join(&p), s)?;
                Some(p)
            }
            None => None,
        };
        self.manifest.samples.push(record);
        Ok(())
    }

    fn finish(self) -> Result<PathBuf> {
        let path = self.out.join("manifest.json");
        self.manifest.save(&path)?;
        DatasetManifest::load(&path)?;
        Ok(path)
    }
}

fn record(id: String) -> SampleRecord {
    SampleRecord {
        id,
        image: PathBuf::new(),
        mask: PathBuf::new(),
        shape: None,
        reference: None,
        virtual_index: None,
        virtual_seed: None,
    }
}

pub fn gradcheck(suites: &[String], format: OutputFormat) -> Result<()> {
    let names: Vec<&'static str> = if suites.is_empty() {
        SUITES.to_vec()
    } else {
        suites
            .iter()
            .map(|s| {
                SUITES
                    .iter()
                    .copied()
                    .find(|n| n == s)
                    .ok_or_else(|| config_err(format!("unknown suite {s:?}; expected one of {SUITES:?}")))
            })
            .collect::<Result<_>>()?
    };
    let mut all: Vec<CaseResult> = Vec::new();
    let mut summaries = Vec::new();
    for name in names {
        let cases = run_suite(name)?;
        let s = summarize(name, &cases);
        if format == OutputFormat::Text {
            println!(
                "{:<12} cases {:>3}  worst rel {:.3e}  tol {:.0e}  {}",
                s.suite,
                s.cases,
                s.worst_rel,
                s.tolerance,
                if s.passed { "PASS" } else { "FAIL" }
            );
        }
        summaries.push(s);
        all.extend(cases);
    }
    match format {
        OutputFormat::Text => {}
        OutputFormat::Tsv => {
            println!("suite\tcase\tworst_rel\ttolerance\tchecked\tpassed");
            for c in &all {
                println!("{}\t{}\t{:e}\t{:e}\t{}\t{}", c.suite, c.case, c.worst_rel, c.tolerance, c.checked, c.passed());
            }
        }
        OutputFormat::Json => println!("{}", to_json(&serde_json::json!({ "suites": summaries, "cases": all }))),
    }
    let failed: Vec<String> = all.iter().filter(|c| !c.passed()).map(|c| format!("{}/{}", c.suite, c.case)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Unmet {
            kind: "gradcheck",
            message: format!("{} case(s) above tolerance: {}", failed.len(), failed.join(", ")),
        })
    }
}

pub fn phantom(a: &PhantomArgs) -> Result<()> {
    let mut cfg: PhantomConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => PhantomConfig::default(),
    };
    if let Some(v) = a.size {
        cfg.size = v;
    }
    if let Some(v) = a.vertebrae {
        cfg.vertebrae = v;
    }
    if let Some(v) = a.discs {
        cfg.discs = v;
    }
    let data = match a.shape_model {
        Some(k) => ssm_phantom_dataset(&cfg, a.count, k, a.seed)?,
        None => phantom_dataset(&cfg, a.count, a.seed)?,
    };
    let mut w = DatasetWriter::new(&a.out, &a.split, cfg.class_count())?;
    for (i, (img, mask, shape)) in data.iter().enumerate() {
        w.add(record(format!("phantom{i:03}")), img, mask, Some(shape))?;
    }
    let path = w.finish()?;
    println!("{} samples, {} classes -> {}", data.len(), cfg.class_count(), path.display());
    Ok(())
}

/// Output of `ssm sample`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualSet {
    pub clamp: f64,
    pub shapes: Vec<VirtualShape>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualShape {
    pub seed: u64,
    pub coefficients: Vec<f64>,
    pub shape: Shape,
}

pub fn ssm(c: &SsmCommand) -> Result<()> {
    match c {
        SsmCommand::Build {
            manifest,
            shapes,
            variance,
            alignment,
            out,
        } => {
            let alignment = match alignment.as_str() {
                "translation" => Alignment::Translation,
                "similarity" => Alignment::Similarity,
                other => return Err(config_err(format!("unknown alignment {other:?}; expected translation or similarity"))),
            };
            let mut training: Vec<Shape> = Vec::new();
            if let Some(m) = manifest {
                training.extend(DatasetManifest::load(m)?.load_shapes()?.into_iter().map(|(_, s)| s));
            }
            for p in shapes {
                training.push(load_json(p)?);
            }
            let model = build_ssm(&training, *variance, alignment)?;
            save_json(out, &model)?;
            println!(
                "{} shapes, {} modes, {:.4} of variance retained -> {}",
                model.training_count,
                model.mode_count(),
                model.retained_fraction,
                out.display()
            );
        }
        SsmCommand::Sample {
            model,
            count,
            seed,
            clamp,
            out,
        } => {
            let model: symtc::shape_synth::SsmModel = load_json(model)?;
            let shapes = (0..*count as u64)
                .map(|i| {
                    let s = seed.wrapping_add(i);
                    let (shape, coefficients) = model.sample_seeded(s, *clamp)?;
                    Ok(VirtualShape { seed: s, coefficients, shape })
                })
                .collect::<Result<Vec<_>>>()?;
            save_json(out, &VirtualSet { clamp: *clamp, shapes })?;
            println!("{count} virtual shapes -> {}", out.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthOutcome {
    id: String,
    reference: String,
    virtual_index: usize,
    error: Option<String>,
    iterations: Option<usize>,
    converged: Option<bool>,
    mean_residual: Option<f64>,
    max_residual: Option<f64>,
    det_fraction: Option<f64>,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let refs = DatasetManifest::load(&a.references)?;
    let images = refs.load_samples()?;
    let shapes = refs.load_shapes()?;
    let references: Vec<(GrayImage, Shape)> = images.into_iter().map(|(i, _)| i).zip(shapes.iter().map(|(_, s)| s.clone())).collect();
    let virtuals: VirtualSet = load_json(&a.virtuals)?;
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.energy.seed = a.seed;
    if let Some(n) = a.max_iters {
        cfg.energy.max_iters = n;
    }
    let vshapes: Vec<Shape> = virtuals.shapes.iter().map(|v| v.shape.clone()).collect();
    let records = synth_dataset(&references, &vshapes, &cfg);

    let mut w = DatasetWriter::new(&a.out, &a.split, refs.class_count)?;
    let mut outcomes = Vec::new();
    println!("id\titerations\tconverged\tmean_residual\tmax_residual\tdet_fraction\tstatus");
    for r in &records {
        let ref_id = refs.samples[r.reference].id.clone();
        let id = format!("{ref_id}_v{:03}", r.virtual_index);
        let mut o = SynthOutcome {
            id: id.clone(),
            reference: ref_id.clone(),
            virtual_index: r.virtual_index,
            error: None,
            iterations: None,
            converged: None,
            mean_residual: None,
            max_residual: None,
            det_fraction: None,
        };
        match &r.result {
            Ok(s) => {
                let mut rec = record(id.clone());
                rec.reference = Some(ref_id);
                rec.virtual_index = Some(r.virtual_index);
                rec.virtual_seed = Some(virtuals.shapes[r.virtual_index].seed);
                w.add(rec, &s.image, &s.mask, Some(&s.shape))?;
                o.iterations = Some(s.fit.iterations);
                o.converged = Some(s.fit.converged);
                o.mean_residual = Some(s.fit.mean_residual);
                o.max_residual = Some(s.fit.max_residual);
                o.det_fraction = Some(s.fit.det_fraction);
                println!(
                    "{id}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\tok",
                    s.fit.iterations, s.fit.converged, s.fit.mean_residual, s.fit.max_residual, s.fit.det_fraction
                );
            }
            Err(e) => {
                println!("{id}\t\t\t\t\t\tfailed: {e}");
                o.error = Some(e.clone());
            }
        }
        outcomes.push(o);
    }
    save_json(&a.out.join("synth_report.json"), &outcomes)?;
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    let path = w.finish()?;
    println!("{} of {} pairs synthesized -> {}", records.len() - failed, records.len(), path.display());
    if failed > 0 {
        return Err(Failure::Unmet {
            kind: "synth",
            message: format!("{failed} of {} pairs failed; see synth_report.json", records.len()),
        });
    }
    Ok(())
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    let src = DatasetManifest::load(&a.manifest)?;
    let samples = src.load_samples()?;
    let elastic = if a.no_elastic {
        None
    } else {
        let mut e = ElasticConfig::default();
        if let Some(s) = a.sigma {
            e.sigma = s;
        }
        if let Some(g) = &a.grids {
            e.grids = g.clone();
        }
        Some(e)
    };
    let cfg = AugmentConfig {
        elastic,
        max_shift: a.max_shift,
    };
    let mut rng = SeededRng::new(a.seed);
    let mut w = DatasetWriter::new(&a.out, &format!("{}-augmented", src.split), src.class_count)?;
    for (rec, (img, mask)) in src.samples.iter().zip(&samples) {
        for k in 0..a.copies {
            let (i, m) = augment_sample(img, mask, &cfg, &mut rng)?;
            let mut r = record(format!("{}_a{k}", rec.id));
            r.reference = Some(rec.id.clone());
            w.add(r, &i, &m, None)?;
        }
    }
    let path = w.finish()?;
    println!("{} augmented samples -> {}", samples.len() * a.copies, path.display());
    Ok(())
}

fn load_labelled(path: &Path, class_count: usize) -> Result<Vec<(GrayImage, LabelMask)>> {
    let m = DatasetManifest::load(path)?;
    if m.class_count != class_count {
        return Err(config_err(format!(
            "{}: manifest has {} classes, network expects {class_count}",
            path.display(),
            m.class_count
        )));
    }
    Ok(m.load_samples()?)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    match a.precision {
        Precision::F32 => train_with::<f32>(a),
        Precision::F64 => train_with::<f64>(a),
    }
}

fn train_with<T: Real>(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds.init = s;
        cfg.seeds.data = s.wrapping_add(1);
    }
    if let Some(e) = a.epochs {
        cfg.optimizer.epochs = e;
    }
    cfg.validate()?;
    let classes = cfg.network.class_count;
    let train = load_labelled(&a.train, classes)?;
    let val = a.val.as_deref().map(|p| load_labelled(p, classes)).transpose()?;
    let mut model = match &a.init {
        Some(p) => {
            let m = load_model::<T>(p)?;
            if m.config != cfg.network {
                return Err(config_err(format!("{}: stored network differs from the run config", p.display())));
            }
            m
        }
        None => SymTc::<T>::new(cfg.network.clone(), cfg.seeds.init)?,
    };

    let header = "epoch\tloss\tdice\tce\tgrad_norm\ttrain_dsc\tval_dsc";
    println!("{header}");
    let mut log = format!("{header}\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
    train_model(&mut model, &train, &cfg, |l, m| {
        let val_dsc = match (&val, l.train_dsc) {
            (Some(v), Some(_)) => Some(evaluate(m, v, classes, None)?.mean_dsc()),
            _ => None,
        };
        let line = format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            l.epoch,
            l.loss,
            l.dice,
            l.ce,
            l.grad_norm,
            opt(l.train_dsc),
            opt(val_dsc)
        );
        println!("{line}");
        let _ = std::io::stdout().flush();
        log.push_str(&line);
        log.push('\n');
        if a.checkpoint_every > 0 && l.epoch % a.checkpoint_every == 0 {
            save_model(&a.out, m)?;
            if let Some(p) = &a.log {
                atomic_write(p, log.as_bytes())?;
            }
        }
        Ok(matches!((a.stop_at_dsc, l.train_dsc), (Some(t), Some(d)) if d >= t))
    })?;
    save_model(&a.out, &model)?;
    if let Some(p) = &a.log {
        atomic_write(p, log.as_bytes())?;
    }
    eprintln!("saved {}", a.out.display());
    Ok(())
}

fn print_eval(report: &EvalReport, format: OutputFormat) {
    match format {
        OutputFormat::Text => {
            print!("{}", report.table().to_text());
            println!("Mean DSC {:.3}", report.mean_dsc());
        }
        OutputFormat::Tsv => print!("{}", report.table().to_tsv()),
        OutputFormat::Json => println!("{}", to_json(report)),
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let report = match a.precision {
        Precision::F32 => eval_with::<f32>(&a.model, &a.manifest, a.spacing)?,
        Precision::F64 => eval_with::<f64>(&a.model, &a.manifest, a.spacing)?,
    };
    print_eval(&report, a.format);
    Ok(())
}

fn eval_with<T: Real>(model: &Path, manifest: &Path, spacing: Option<f64>) -> Result<EvalReport> {
    let m = load_model::<T>(model)?;
    let samples = load_labelled(manifest, m.config.class_count)?;
    Ok(evaluate(&m, &samples, m.config.class_count, spacing)?)
}

pub fn robustness(a: &RobustnessArgs) -> Result<()> {
    let axis: Axis = a.axis.parse()?;
    let report = match a.precision {
        Precision::F32 => robustness_with::<f32>(a, axis)?,
        Precision::F64 => robustness_with::<f64>(a, axis)?,
    };
    match a.format {
        OutputFormat::Text => {
            print!("{}", report.table().to_text());
            for (s, d) in report.mean_dsc() {
                println!("Mean DSC at shift {s}: {d:.3}");
            }
        }
        OutputFormat::Tsv => print!("{}", report.table().to_tsv()),
        OutputFormat::Json => println!("{}", to_json(&report)),
    }
    Ok(())
}

fn robustness_with<T: Real>(a: &RobustnessArgs, axis: Axis) -> Result<symtc::loss_metrics::RobustnessReport> {
    let m = load_model::<T>(&a.model)?;
    let c = &m.config;
    let samples = load_labelled(&a.manifest, c.class_count)?;
    let limit = match axis {
        Axis::Horizontal => c.width,
        Axis::Vertical => c.height,
    } as u32;
    Ok(robustness_sweep(&m, &samples, c.class_count, axis, &a.shifts, a.fill, limit)?)
}

fn preset(p: Preset, classes: usize) -> NetworkConfig {
    match p {
        Preset::Toy => NetworkConfig::toy(classes),
        Preset::Micro => NetworkConfig::micro(classes),
        Preset::Paper => NetworkConfig::paper_scale(classes),
    }
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(preset(a.preset.unwrap_or(Preset::Toy), a.classes)),
    };
    let data = match (&a.train, &a.test) {
        (Some(tr), Some(te)) => Some((load_labelled(tr, run.network.class_count)?, load_labelled(te, run.network.class_count)?)),
        _ => None,
    };
    let training = data.as_ref().map(|(train, test)| AblationTraining {
        run: run.clone(),
        train,
        test,
        shifts: a.shifts.clone(),
    });
    let rows = run_ablation(&run.network, a.seed, training.as_ref())?;
    match a.format {
        OutputFormat::Text => print!("{}", ablation_text(&rows)),
        OutputFormat::Tsv => print!("{}", ablation_tsv(&rows)),
        OutputFormat::Json => println!("{}", to_json(&rows)),
    }
    let bad: Vec<&str> = rows
        .iter()
        .filter(|r| !r.accounting_ok() || !r.forward_ok)
        .map(|r| r.setting.as_str())
        .collect();
    if !bad.is_empty() {
        return Err(Failure::Unmet {
            kind: "ablation",
            message: format!("parameter accounting or forward check failed for: {}", bad.join(", ")),
        });
    }
    Ok(())
}

pub fn config(c: &ConfigCommand) -> Result<()> {
    match c {
        ConfigCommand::Schema => println!("{}", to_json(&run_config_schema())),
        ConfigCommand::Default { preset: p, classes } => {
            let cfg = RunConfig::new(preset(*p, *classes));
            cfg.validate()?;
            println!("{}", to_json(&cfg));
        }
        ConfigCommand::Check { path } => {
            let cfg = RunConfig::load(path)?;
            cfg.validate()?;
            println!(
                "ok: {}×{} input, {} classes, {} TC modules",
                cfg.network.height,
                cfg.network.width,
                cfg.network.class_count,
                cfg.network.tc_modules().len()
            );
        }
    }
    Ok(())
}
