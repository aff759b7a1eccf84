use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{pixel_probabilities, SymTc};
use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::loss_metrics::{combined_loss, LossConfig, Segmenter};
use crate::ndgrad::{DiffArray, Tape};
use crate::scalar::Real;

/// One (image, mask) training pair.
pub type TrainSample = (GrayImage, LabelMask);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global L2 gradient-norm limit; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: default_clip(),
        }
    }
}

/// Adam moment estimates for every parameter array.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<DiffArray<T>>,
    v: Vec<DiffArray<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update of `grads` (parallel to the store's arrays).
    pub fn update(&mut self, params: &mut [&mut DiffArray<T>], grads: &[DiffArray<T>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| DiffArray::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params[i].data_mut();
            for k in 0..g.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] = p[k] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Loss and gradient statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub dice: f64,
    pub ce: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl<T: Real> SymTc<T> {
    /// Mean loss over `batch` and its gradients with respect to every parameter.
    pub fn loss_and_gradients(&self, batch: &[TrainSample], loss: &LossConfig) -> Result<(StepReport, Vec<DiffArray<T>>)> {
        if batch.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        let per_sample = batch
            .par_iter()
            .map(|(image, mask)| {
                let t = Tape::new();
                let b = self.store.bind(&t);
                let x = t.constant(image.to_array());
                let logits = self.forward(&t, &b, x)?;
                let probs = pixel_probabilities(&t, logits)?;
                let terms = combined_loss(&t, probs, mask, loss)?;
                let grads = t.backward(terms.total)?;
                let vals = [terms.total, terms.dice, terms.ce].map(|v| t.item(v).map(|x| x.to_f64_lossy()));
                Ok((vals, self.store.gradients(&grads, &b)))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = T::lit(batch.len() as f64);
        let mut total = [0.0f64; 3];
        let mut grads: Vec<DiffArray<T>> = self.store.iter().map(|(_, v)| DiffArray::zeros(v.shape())).collect();
        for (vals, g) in per_sample {
            for (k, v) in vals.into_iter().enumerate() {
                total[k] += v?;
            }
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, x) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a = *a + *x;
                }
            }
        }
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v = *v / n);
        }
        let k = batch.len() as f64;
        let [l, d, c] = total.map(|v| v / k);
        if !(l.is_finite() && d.is_finite() && c.is_finite()) {
            return Err(Error::NonFiniteLoss { dice: d, ce: c });
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        Ok((
            StepReport {
                loss: l,
                dice: d,
                ce: c,
                grad_norm: norm,
            },
            grads,
        ))
    }

    /// Forward, combined loss, backward, global-norm clip and an Adam update.
    pub fn train_step(&mut self, batch: &[TrainSample], optimizer: &mut Adam<T>, loss: &LossConfig) -> Result<StepReport> {
        let (report, mut grads) = self.loss_and_gradients(batch, loss)?;
        if let Some(limit) = optimizer.config.clip_norm {
            if report.grad_norm > limit {
                let s = T::lit(limit / report.grad_norm);
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v = *v * s);
                }
            }
        }
        let mut params: Vec<&mut DiffArray<T>> = self.store.values_mut().collect();
        optimizer.update(&mut params, &grads);
        Ok(report)
    }
}

impl<T: Real> Segmenter for SymTc<T> {
    fn segment(&self, image: &GrayImage) -> Result<LabelMask> {
        let p = self.predict(image)?;
        LabelMask::new(image.height, image.width, p.labels())
    }
}
