//! Weighted cross entropy, distillation towards the frozen model and their
//! convex combination, with analytic gradients w.r.t. the decoder.

use rayon::prelude::*;

use crate::data::IGNORE_LABEL;

use super::model::{Decoder, FeatureMap};

/// Probabilities are clamped to this value before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Inverse-frequency class weights over the non-ignore pixels of a batch,
/// scaled so the weights of present classes average to 1. Absent classes get 0.
///
/// `None` signals a batch without any labelled pixel.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a [i32]>, n_classes: usize) -> Option<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    let mut total = 0usize;
    for batch in labels {
        for &y in batch {
            if y != IGNORE_LABEL {
                counts[(y - 1) as usize] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return None;
    }
    let inv: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { total as f64 / c as f64 })
        .collect();
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mean = inv.iter().sum::<f64>() / present;
    Some(inv.into_iter().map(|w| w / mean).collect())
}

/// `-(1/N_valid) sum_z w_{y_z} log g_{z,y_z}` over labelled pixels.
/// `probs` is row-major pixels x classes.
pub fn weighted_ce(probs: &[f64], n_classes: usize, labels: &[i32], weights: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut valid = 0usize;
    for (z, &y) in labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        let c = (y - 1) as usize;
        sum -= weights[c] * probs[z * n_classes + c].max(PROB_FLOOR).ln();
        valid += 1;
    }
    if valid == 0 {
        0.0
    } else {
        sum / valid as f64
    }
}

/// `-(1/|H||W|) sum_z sum_{c old} f_{z,c} log g_{z,c}`; `g` is not renormalized.
pub fn distill_loss(g: &[f64], g_classes: usize, f: &[f64], f_classes: usize) -> f64 {
    let n = f.len() / f_classes;
    let mut sum = 0.0;
    for z in 0..n {
        for c in 0..f_classes {
            sum -= f[z * f_classes + c] * g[z * g_classes + c].max(PROB_FLOOR).ln();
        }
    }
    sum / n as f64
}

pub fn total_loss(ce: f64, distill: f64, lambda: f64) -> f64 {
    lambda * ce + (1.0 - lambda) * distill
}

/// One crop: features, labels (1-based, ignore allowed) and soft targets of
/// the frozen model over the old classes.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub features: &'a FeatureMap,
    pub labels: &'a [i32],
    pub teacher: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub ce: f64,
    pub distill: f64,
    pub total: f64,
}

struct Normalizers {
    weights: Option<Vec<f64>>,
    n_valid: usize,
    n_all: usize,
}

fn normalizers(batch: &[BatchItem], n_classes: usize) -> Normalizers {
    Normalizers {
        weights: class_weights(batch.iter().map(|b| b.labels), n_classes),
        n_valid: batch.iter().map(|b| b.labels.iter().filter(|&&y| y != IGNORE_LABEL).count()).sum(),
        n_all: batch.iter().map(|b| b.labels.len()).sum(),
    }
}

/// Batch objective `L = lambda * CE_w + (1 - lambda) * D`, with class weights
/// from the batch labels and both terms averaged over the whole batch.
pub fn batch_loss(decoder: &Decoder, batch: &[BatchItem], n_old: usize, lambda: f64) -> LossParts {
    evaluate(decoder, batch, n_old, lambda, false).0
}

/// Loss and gradient (weights then bias, same layout as the decoder).
pub fn batch_loss_and_grad(decoder: &Decoder, batch: &[BatchItem], n_old: usize, lambda: f64) -> (LossParts, Vec<f64>) {
    let (parts, grad) = evaluate(decoder, batch, n_old, lambda, true);
    (parts, grad.expect("gradient requested"))
}

fn evaluate(
    decoder: &Decoder,
    batch: &[BatchItem],
    n_old: usize,
    lambda: f64,
    want_grad: bool,
) -> (LossParts, Option<Vec<f64>>) {
    let k = decoder.n_classes;
    let dim = decoder.dim;
    let norm = normalizers(batch, k);
    let ce_scale = if norm.n_valid > 0 { 1.0 / norm.n_valid as f64 } else { 0.0 };
    let d_scale = 1.0 / norm.n_all.max(1) as f64;

    // per-item partial sums, reduced in item order for determinism
    let partials: Vec<(f64, f64, Option<Vec<f64>>)> = batch
        .par_iter()
        .map(|item| {
            let mut ce = 0.0;
            let mut dist = 0.0;
            let mut grad = want_grad.then(|| vec![0.0; k * dim + k]);
            let mut probs = vec![0.0; k];
            let mut delta = vec![0.0; k];
            for (z, &y) in item.labels.iter().enumerate() {
                let x = item.features.at(z);
                decoder.probs_into(x, &mut probs);
                let teacher = &item.teacher[z * n_old..(z + 1) * n_old];
                delta.iter_mut().for_each(|d| *d = 0.0);
                if y != IGNORE_LABEL {
                    if let Some(w) = &norm.weights {
                        let c = (y - 1) as usize;
                        let p = probs[c];
                        ce -= w[c] * p.max(PROB_FLOOR).ln();
                        if p > PROB_FLOOR {
                            let s = lambda * w[c] * ce_scale;
                            for (j, d) in delta.iter_mut().enumerate() {
                                *d += s * (probs[j] - f64::from(u8::from(j == c)));
                            }
                        }
                    }
                }
                let mut teacher_mass = 0.0;
                for c in 0..n_old {
                    let p = probs[c];
                    dist -= teacher[c] * p.max(PROB_FLOOR).ln();
                    if p > PROB_FLOOR {
                        teacher_mass += teacher[c];
                        delta[c] -= (1.0 - lambda) * d_scale * teacher[c];
                    }
                }
                for (j, d) in delta.iter_mut().enumerate() {
                    *d += (1.0 - lambda) * d_scale * teacher_mass * probs[j];
                }
                if let Some(g) = grad.as_mut() {
                    for j in 0..k {
                        let dj = delta[j];
                        if dj == 0.0 {
                            continue;
                        }
                        let row = &mut g[j * dim..(j + 1) * dim];
                        for (gw, xv) in row.iter_mut().zip(x) {
                            *gw += dj * xv;
                        }
                        g[k * dim + j] += dj;
                    }
                }
            }
            (ce, dist, grad)
        })
        .collect();

    let mut ce = 0.0;
    let mut dist = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; k * dim + k]);
    for (c, d, g) in partials {
        ce += c;
        dist += d;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    let ce = ce * ce_scale;
    let distill = dist * d_scale;
    (LossParts { ce, distill, total: total_loss(ce, distill, lambda) }, grad)
}
