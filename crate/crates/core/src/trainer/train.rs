use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, ProbMap};
use crate::error::{Error, Result};

use super::loss::{batch_loss_and_grad, BatchItem, LossParts};
use super::model::{FeatureMap, ToySegmenter};
use super::optim::{poly_lr, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub crop: (usize, usize),
    pub poly_power: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            lr: 5e-5,
            weight_decay: 1e-4,
            lambda: 0.5,
            crop: (64, 64),
            poly_power: 0.9,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("batch size and crop must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return Err(Error::Config("weight decay and poly power must be non-negative".into()));
        }
        Ok(())
    }
}

/// One training image: frozen encoder features, (pseudo) labels and the
/// frozen model's softmax over the old classes.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub features: FeatureMap,
    pub labels: LabelMask,
    pub teacher: ProbMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub distill: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToySegmenter,
    pub loss_trace: Vec<EpochLoss>,
}

impl TrainOutcome {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,total,ce,distill,lr\n");
        for e in &self.loss_trace {
            out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.total, e.ce, e.distill, e.lr));
        }
        out
    }
}

struct Crop {
    features: FeatureMap,
    labels: Vec<i32>,
    teacher: Vec<f64>,
}

fn random_crop(sample: &TrainSample, crop: (usize, usize), rng: &mut ChaCha8Rng) -> Crop {
    let h = crop.0.min(sample.features.height);
    let w = crop.1.min(sample.features.width);
    let r0 = rng.gen_range(0..=sample.features.height - h);
    let c0 = rng.gen_range(0..=sample.features.width - w);
    Crop {
        features: sample.features.crop(r0, c0, h, w),
        labels: sample.labels.crop(r0, c0, h, w).into_vec(),
        teacher: sample.teacher.crop(r0, c0, h, w).as_slice().to_vec(),
    }
}

/// Trains the decoder of `g` on `samples`. Batches are drawn from a seeded
/// shuffle each epoch; the encoder is never touched.
pub fn train(g: &ToySegmenter, samples: &[TrainSample], n_old: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let dim = g.encoder.feature_dim();
    for s in samples {
        if s.features.dim != dim
            || s.labels.height() != s.features.height
            || s.labels.width() != s.features.width
            || s.teacher.height() != s.features.height
            || s.teacher.width() != s.features.width
        {
            return Err(Error::Shape(format!("sample {} is misaligned", s.id)));
        }
        if s.teacher.classes() != n_old || n_old > g.n_classes() {
            return Err(Error::Shape(format!(
                "sample {}: teacher has {} classes, expected {}",
                s.id,
                s.teacher.classes(),
                n_old
            )));
        }
        if let Some(&y) = s.labels.as_slice().iter().find(|&&y| y != -1 && (y < 1 || y as usize > g.n_classes())) {
            return Err(Error::Validation(format!("sample {}: label {} out of range", s.id, y)));
        }
    }

    let mut model = g.clone();
    let iters_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_iters = cfg.epochs * iters_per_epoch;
    let weight_len = model.decoder.weights.len();
    let mut adam = Adam::new(model.decoder.n_params(), weight_len, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut params = vec![0.0; model.decoder.n_params()];
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut t = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let crops: Vec<Crop> = chunk.iter().map(|&i| random_crop(&samples[i], cfg.crop, &mut rng)).collect();
            let batch: Vec<BatchItem> = crops
                .iter()
                .map(|c| BatchItem { features: &c.features, labels: &c.labels, teacher: &c.teacher })
                .collect();
            let (parts, grad) = batch_loss_and_grad(&model.decoder, &batch, n_old, cfg.lambda);
            if !parts.total.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, iteration {t} (ce {}, distill {})",
                    parts.ce, parts.distill
                )));
            }
            lr = poly_lr(cfg.lr, t, total_iters, cfg.poly_power);
            params[..weight_len].copy_from_slice(&model.decoder.weights);
            params[weight_len..].copy_from_slice(&model.decoder.bias);
            adam.step(&mut params, &grad, lr);
            model.decoder.weights.copy_from_slice(&params[..weight_len]);
            model.decoder.bias.copy_from_slice(&params[weight_len..]);
            sum.ce += parts.ce;
            sum.distill += parts.distill;
            sum.total += parts.total;
            t += 1;
        }
        let n = iters_per_epoch as f64;
        let e = EpochLoss { epoch, total: sum.total / n, ce: sum.ce / n, distill: sum.distill / n, lr };
        log::debug!("epoch {epoch}: loss {:.5} (ce {:.5}, distill {:.5})", e.total, e.ce, e.distill);
        trace.push(e);
    }
    Ok(TrainOutcome { model, loss_trace: trace })
}
