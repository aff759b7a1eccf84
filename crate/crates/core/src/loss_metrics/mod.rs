//! Training loss (soft Dice plus area-weighted cross-entropy), DSC / HD95
//! metrics and the translation-robustness evaluation harness.

mod eval;
mod metrics;

pub use eval::{
    class_names, evaluate, robustness_sweep, Axis, EvalReport, MetricTable, RobustnessReport, RobustnessRow, Segmenter,
};
pub use metrics::{boundary, directed_distances, distance_transform, dsc, hausdorff, hd95, percentile};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabelMask;
use crate::ndgrad::{DiffArray, Tape, Var};
use crate::scalar::Real;

/// Probabilities below this are clamped before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "half")]
    pub dice_weight: f64,
    #[serde(default = "half")]
    pub ce_weight: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    pub class_count: usize,
}

fn half() -> f64 {
    0.5
}

fn default_eps() -> f64 {
    1e-4
}

impl LossConfig {
    pub fn new(class_count: usize) -> Self {
        Self {
            dice_weight: 0.5,
            ce_weight: 0.5,
            epsilon: 1e-4,
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dice_weight >= 0.0 && self.ce_weight >= 0.0 && self.epsilon > 0.0) || self.class_count < 2 {
            return Err(Error::Config(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

fn check_inputs<T: Real>(t: &Tape<T>, probs: Var, labels: &LabelMask, cfg: &LossConfig, op: &'static str) -> Result<()> {
    let s = t.shape(probs);
    let want = [labels.data.len(), cfg.class_count];
    if s != want {
        return Err(Error::shape(op, &s, &want));
    }
    labels.validate(cfg.class_count)
}

/// Soft Dice loss `1 − mean_m (2 Σ y_m p_m + ε) / (Σ y_m + Σ p_m + ε)` over
/// all classes, for probabilities `probs` (HW × C).
pub fn dice_loss<T: Real>(t: &Tape<T>, probs: Var, labels: &LabelMask, cfg: &LossConfig) -> Result<Var> {
    check_inputs(t, probs, labels, cfg, "dice_loss")?;
    {
        let p = t.value(probs);
        let c = cfg.class_count;
        for (i, row) in p.data().chunks(c).enumerate() {
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > T::lit(1e-6) {
                return Err(Error::invalid(
                    "dice_loss",
                    format!("probabilities at pixel {i} sum to {s}, not 1"),
                ));
            }
        }
    }
    let eps = T::lit(cfg.epsilon);
    let y = t.constant(labels.one_hot(cfg.class_count));
    let ysum = t.sum_axis(y, 0)?;
    let inter = t.mul(probs, y)?;
    let inter = t.sum_axis(inter, 0)?;
    let psum = t.sum_axis(probs, 0)?;
    let num = t.scale(inter, T::lit(2.0))?;
    let num = t.add_scalar(num, eps)?;
    let den = t.add(ysum, psum)?;
    let den = t.add_scalar(den, eps)?;
    let ratio = t.div(num, den)?;
    let mean = t.mean(ratio)?;
    let neg = t.neg(mean)?;
    t.add_scalar(neg, T::one())
}

/// Class weights `w_m ∝ 1 / max(area_m, 1)`, normalized to sum to 1.
pub fn area_weights(labels: &LabelMask, class_count: usize) -> Vec<f64> {
    let mut area = vec![0usize; class_count];
    for &l in &labels.data {
        if (l as usize) < class_count {
            area[l as usize] += 1;
        }
    }
    let inv: Vec<f64> = area.iter().map(|&a| 1.0 / a.max(1) as f64).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|v| v / total).collect()
}

/// Area-weighted cross-entropy `−(1/HW) Σ_{i,m} w_m y_m log p_m`.
pub fn aw_ce_loss<T: Real>(t: &Tape<T>, probs: Var, labels: &LabelMask, cfg: &LossConfig) -> Result<Var> {
    check_inputs(t, probs, labels, cfg, "aw_ce_loss")?;
    let c = cfg.class_count;
    let w = area_weights(labels, c);
    let n = labels.data.len();
    let mut coef = DiffArray::zeros(&[n, c]);
    {
        let d = coef.data_mut();
        let scale = -1.0 / n as f64;
        for (i, &l) in labels.data.iter().enumerate() {
            d[i * c + l as usize] = T::lit(scale * w[l as usize]);
        }
    }
    let coef = t.constant(coef);
    let p = t.clamp_min(probs, T::lit(PROB_FLOOR))?;
    let lp = t.log(p)?;
    let terms = t.mul(lp, coef)?;
    t.sum(terms)
}

/// Tape handles of the loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// `dice_weight · L_dice + ce_weight · L_aw_ce`.
pub fn combined_loss<T: Real>(t: &Tape<T>, probs: Var, labels: &LabelMask, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let dice = dice_loss(t, probs, labels, cfg);
    let ce = aw_ce_loss(t, probs, labels, cfg);
    let value = |r: &Result<Var>| match r {
        Ok(v) => t.item(*v).map(|x| x.to_f64_lossy()).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    };
    let (dice, ce) = match (dice, ce) {
        (Ok(d), Ok(c)) => (d, c),
        (d, c) => {
            let non_finite = |r: &Result<Var>| matches!(r, Err(Error::NonFinite { .. }));
            if non_finite(&d) || non_finite(&c) {
                return Err(Error::NonFiniteLoss {
                    dice: value(&d),
                    ce: value(&c),
                });
            }
            d?;
            c?;
            unreachable!("one of the loss terms failed")
        }
    };
    let a = t.scale(dice, T::lit(cfg.dice_weight))?;
    let b = t.scale(ce, T::lit(cfg.ce_weight))?;
    let total = t.add(a, b).map_err(|_| Error::NonFiniteLoss {
        dice: value(&Ok(dice)),
        ce: value(&Ok(ce)),
    })?;
    Ok(LossTerms { total, dice, ce })
}
