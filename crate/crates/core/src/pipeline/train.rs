use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::io::{AugmentConfig, RunConfig};
use crate::loss_metrics::evaluate;
use crate::ndgrad::SeededRng;
use crate::scalar::Real;
use crate::shape_synth::{elastic_augment, random_translate};
use crate::symtc_net::{Adam, SymTc, TrainSample};

/// Elastic deformation (if enabled) followed by a random translation.
pub fn augment_sample(image: &GrayImage, mask: &LabelMask, aug: &AugmentConfig, rng: &mut SeededRng) -> Result<(GrayImage, LabelMask)> {
    let (img, m) = match &aug.elastic {
        Some(e) => {
            let seed = rng.int_in(0, i64::MAX) as u64;
            elastic_augment(image, mask, e, seed)?
        }
        None => (image.clone(), mask.clone()),
    };
    if aug.max_shift == 0 {
        return Ok((img, m));
    }
    Ok(random_translate(&img, &m, aug.max_shift as u32, rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Means over the epoch's batches.
    pub loss: f64,
    pub dice: f64,
    pub ce: f64,
    pub grad_norm: f64,
    /// Mean foreground DSC (%) on the unaugmented training set.
    pub train_dsc: Option<f64>,
}

fn shuffle(order: &mut [usize], rng: &mut SeededRng) {
    for i in (1..order.len()).rev() {
        let j = rng.int_in(0, i as i64) as usize;
        order.swap(i, j);
    }
}

/// Runs `cfg.optimizer.epochs` epochs of shuffled mini-batch Adam.
///
/// `on_epoch` sees every log line and the current model; returning
/// `Ok(true)` stops early.
pub fn train_model<T: Real>(
    model: &mut SymTc<T>,
    samples: &[TrainSample],
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochLog, &SymTc<T>) -> Result<bool>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("train", "no training samples"));
    }
    let net = &model.config;
    for (i, (img, m)) in samples.iter().enumerate() {
        if (img.height, img.width) != (net.height, net.width) || (m.height, m.width) != (net.height, net.width) {
            return Err(Error::Config(format!(
                "sample {i} is {}×{} (mask {}×{}), network expects {}×{}",
                img.height, img.width, m.height, m.width, net.height, net.width
            )));
        }
        m.validate(net.class_count)?;
    }
    let loss = cfg.loss_config();
    let mut opt = Adam::new(cfg.optimizer.adam());
    let mut data_rng = SeededRng::new(cfg.seeds.data);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.optimizer.epochs);
    for epoch in 1..=cfg.optimizer.epochs {
        let mut rng = data_rng.fork();
        shuffle(&mut order, &mut rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| augment_sample(&samples[i].0, &samples[i].1, &cfg.augmentation, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let r = model.train_step(&batch, &mut opt, &loss)?;
            for (s, v) in sums.iter_mut().zip([r.loss, r.dice, r.ce, r.grad_norm]) {
                *s += v;
            }
            batches += 1;
        }
        let [l, d, c, g] = sums.map(|s| s / batches as f64);
        let train_dsc = if cfg.dsc_every > 0 && (epoch % cfg.dsc_every == 0 || epoch == cfg.optimizer.epochs) {
            Some(evaluate(&*model, samples, model.config.class_count, None)?.mean_dsc())
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            loss: l,
            dice: d,
            ce: c,
            grad_norm: g,
            train_dsc,
        };
        let stop = on_epoch(&log, model)?;
        logs.push(log);
        if stop {
            break;
        }
    }
    Ok(logs)
}
