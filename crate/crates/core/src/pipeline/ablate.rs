//! Path-switch ablations over the four TC modules (encoder levels 0–2 and
//! the refine module).

use std::fmt::Write as _;

use serde::Serialize;

use super::train::train_model;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::io::RunConfig;
use crate::loss_metrics::{evaluate, robustness_sweep, Axis};
use crate::ndgrad::SeededRng;
use crate::symtc_net::{cnn_path_param_count, transformer_path_param_count, NetworkConfig, SymTc, TrainSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Path {
    Cnn,
    Transformer,
}

/// One named configuration: which paths are switched off in which TCMs.
#[derive(Clone, Debug, Serialize)]
pub struct AblationSetting {
    pub name: String,
    pub disabled: Vec<(usize, Path)>,
}

impl AblationSetting {
    pub fn apply(&self, base: &NetworkConfig) -> Result<NetworkConfig> {
        let mut cfg = base.clone();
        let mut mods = cfg.tc_modules_mut();
        for &(i, p) in &self.disabled {
            let m = mods
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("{}: network has no TCM-{i}", self.name)))?;
            match p {
                Path::Cnn => m.enable_cnn = false,
                Path::Transformer => m.enable_transformer = false,
            }
        }
        Ok(cfg)
    }
}

/// The full model, CNN only, Transformer only, then each path disabled in each TCM.
pub fn path_settings(tcm_count: usize) -> Vec<AblationSetting> {
    let all = |p| (0..tcm_count).map(|i| (i, p)).collect();
    let mut v = vec![
        AblationSetting {
            name: "CNN + Transformer".into(),
            disabled: vec![],
        },
        AblationSetting {
            name: "CNN only".into(),
            disabled: all(Path::Transformer),
        },
        AblationSetting {
            name: "Transformer only".into(),
            disabled: all(Path::Cnn),
        },
    ];
    for (p, label) in [(Path::Transformer, "Transformer"), (Path::Cnn, "CNN")] {
        for i in 0..tcm_count {
            v.push(AblationSetting {
                name: format!("Disable {label} in TCM-{i}"),
                disabled: vec![(i, p)],
            });
        }
    }
    v
}

/// Optional training and shift evaluation for each setting.
pub struct AblationTraining<'a> {
    pub run: RunConfig,
    pub train: &'a [TrainSample],
    pub test: &'a [TrainSample],
    pub shifts: Vec<u32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub setting: String,
    /// Scalars in the built network.
    pub param_count: usize,
    /// Drop relative to the full configuration, from the built networks.
    pub removed: usize,
    /// Sum of the disabled paths' sizes from the closed-form path counts.
    pub expected_removed: usize,
    pub forward_ok: bool,
    /// Mean DSC at each (axis, shift) when trained.
    pub dsc: Vec<(Axis, u32, f64)>,
}

impl AblationRow {
    pub fn accounting_ok(&self) -> bool {
        self.removed == self.expected_removed
    }
}

/// Forward pass on a random image: right shape and finite probabilities.
fn forward_ok(net: &SymTc<f64>, seed: u64) -> Result<bool> {
    let c = &net.config;
    let mut rng = SeededRng::new(seed);
    let img = GrayImage::new(c.height, c.width, (0..c.height * c.width).map(|_| rng.uniform()).collect())?;
    let p = net.predict(&img)?;
    Ok(p.logits.shape() == [c.class_count, c.height, c.width] && p.probs.is_finite() && p.logits.is_finite())
}

pub fn ablate(base: &NetworkConfig, seed: u64, training: Option<&AblationTraining>) -> Result<Vec<AblationRow>> {
    let tcms = base.tc_modules().len();
    let full = SymTc::<f64>::new(base.clone(), seed)?.param_count();
    let path_size = |i: usize, p: Path| {
        let m = base.tc_modules()[i];
        match p {
            Path::Cnn => cnn_path_param_count(m.in_channels, m.cnn_channels()),
            Path::Transformer => transformer_path_param_count(m),
        }
    };
    let mut rows = Vec::new();
    for setting in path_settings(tcms) {
        let cfg = setting.apply(base)?;
        let mut net = SymTc::<f64>::new(cfg.clone(), seed)?;
        let count = net.param_count();
        let ok = forward_ok(&net, seed ^ 0x5eed)?;
        let mut dsc = Vec::new();
        if let Some(tr) = training {
            let mut run = tr.run.clone();
            run.network = cfg;
            train_model(&mut net, tr.train, &run, |_, _| Ok(false))?;
            let classes = run.network.class_count;
            dsc.push((Axis::Horizontal, 0, evaluate(&net, tr.test, classes, None)?.mean_dsc()));
            let nonzero: Vec<u32> = tr.shifts.iter().copied().filter(|&s| s > 0).collect();
            for axis in [Axis::Horizontal, Axis::Vertical] {
                let rep = robustness_sweep(&net, tr.test, classes, axis, &nonzero, 0.0, u32::MAX)?;
                dsc.extend(rep.mean_dsc().into_iter().map(|(s, d)| (axis, s, d)));
            }
        }
        rows.push(AblationRow {
            setting: setting.name.clone(),
            param_count: count,
            removed: full - count,
            expected_removed: setting.disabled.iter().map(|&(i, p)| path_size(i, p)).sum(),
            forward_ok: ok,
            dsc,
        });
    }
    Ok(rows)
}

fn dsc_header(rows: &[AblationRow]) -> Vec<String> {
    rows.first()
        .map(|r| {
            r.dsc
                .iter()
                .map(|(a, s, _)| format!("{}{s}", if *a == Axis::Horizontal { "H" } else { "V" }))
                .collect()
        })
        .unwrap_or_default()
}

/// Aligned summary table.
pub fn ablation_text(rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.setting.len()).max().unwrap_or(8);
    let mut s = format!("{:<w$} {:>10} {:>10} {:>10} {:>8}", "setting", "params", "removed", "expected", "forward");
    for h in dsc_header(rows) {
        let _ = write!(s, " {h:>8}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{:<w$} {:>10} {:>10} {:>10} {:>8}",
            r.setting,
            r.param_count,
            r.removed,
            r.expected_removed,
            if r.forward_ok { "ok" } else { "FAIL" }
        );
        for (_, _, d) in &r.dsc {
            let _ = write!(s, " {d:>8.3}");
        }
        s.push('\n');
    }
    s
}

/// Tab-separated variant of [`ablation_text`].
pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting\tparams\tremoved\texpected\tforward");
    for h in dsc_header(rows) {
        let _ = write!(s, "\t{h}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}\t{}\t{}\t{}\t{}", r.setting, r.param_count, r.removed, r.expected_removed, r.forward_ok);
        for (_, _, d) in &r.dsc {
            let _ = write!(s, "\t{d}");
        }
        s.push('\n');
    }
    s
}
