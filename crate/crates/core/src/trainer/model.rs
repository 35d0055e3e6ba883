use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::data::{LabelMask, ProbMap, RgbImage};
use crate::error::{Error, Result};

/// Per-pixel feature vectors, shape (H, W, F).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, z: usize) -> &[f64] {
        &self.data[z * self.dim..(z + 1) * self.dim]
    }

    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> FeatureMap {
        assert!(r0 + h <= self.height && c0 + w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(h * w * self.dim);
        for r in r0..r0 + h {
            let start = (r * self.width + c0) * self.dim;
            data.extend_from_slice(&self.data[start..start + w * self.dim]);
        }
        FeatureMap { height: h, width: w, dim: self.dim, data }
    }
}

/// Frozen feature extractor: a seeded bank of 3x3 RGB filters with tanh,
/// followed by normalized pixel coordinates and the centred RGB values.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    seed: u64,
    n_filters: usize,
    kernels: Vec<[f64; 27]>,
    biases: Vec<f64>,
}

impl Encoder {
    pub fn new(seed: u64, n_filters: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 3.0 / 27f64.sqrt();
        let kernels = (0..n_filters)
            .map(|_| {
                let mut k = [0.0; 27];
                for v in &mut k {
                    let s: f64 = StandardNormal.sample(&mut rng);
                    *v = s * scale;
                }
                k
            })
            .collect();
        let biases = (0..n_filters)
            .map(|_| {
                let s: f64 = StandardNormal.sample(&mut rng);
                0.5 * s
            })
            .collect();
        Encoder { seed, n_filters, kernels, biases }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn feature_dim(&self) -> usize {
        self.n_filters + 5
    }

    pub fn encode(&self, image: &RgbImage) -> FeatureMap {
        let (h, w) = (image.height(), image.width());
        let dim = self.feature_dim();
        let px = |r: isize, c: isize, ch: usize| -> f64 {
            let r = r.clamp(0, h as isize - 1) as usize;
            let c = c.clamp(0, w as isize - 1) as usize;
            image.pixel(r, c)[ch] as f64 / 255.0 - 0.5
        };
        let rows: Vec<Vec<f64>> = (0..h)
            .into_par_iter()
            .map(|r| {
                let mut out = Vec::with_capacity(w * dim);
                for c in 0..w {
                    let mut patch = [0.0; 27];
                    let mut i = 0;
                    for dr in -1..=1isize {
                        for dc in -1..=1isize {
                            for ch in 0..3 {
                                patch[i] = px(r as isize + dr, c as isize + dc, ch);
                                i += 1;
                            }
                        }
                    }
                    for (k, b) in self.kernels.iter().zip(&self.biases) {
                        let a: f64 = k.iter().zip(&patch).map(|(x, y)| x * y).sum::<f64>() + b;
                        out.push(a.tanh());
                    }
                    out.push(r as f64 / (h.max(2) - 1) as f64 - 0.5);
                    out.push(c as f64 / (w.max(2) - 1) as f64 - 0.5);
                    out.extend_from_slice(&patch[12..15]);
                }
                out
            })
            .collect();
        FeatureMap { height: h, width: w, dim, data: rows.concat() }
    }
}

/// Per-pixel affine map to class logits followed by softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub n_classes: usize,
    pub dim: usize,
    /// Row-major `n_classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Decoder {
    pub fn random(n_classes: usize, dim: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        Decoder {
            n_classes,
            dim,
            weights: (0..n_classes * dim).map(|_| normal.sample(&mut rng)).collect(),
            bias: (0..n_classes).map(|_| normal.sample(&mut rng)).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Softmax probabilities of one feature vector written into `out`.
    #[inline]
    pub fn probs_into(&self, x: &[f64], out: &mut [f64]) {
        let mut max = f64::NEG_INFINITY;
        for k in 0..self.n_classes {
            let row = &self.weights[k * self.dim..(k + 1) * self.dim];
            let a = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[k];
            out[k] = a;
            max = max.max(a);
        }
        let mut sum = 0.0;
        for v in out.iter_mut().take(self.n_classes) {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in out.iter_mut().take(self.n_classes) {
            *v /= sum;
        }
    }

    pub fn predict(&self, features: &FeatureMap) -> ProbMap {
        let k = self.n_classes;
        let mut data = vec![0.0; features.pixels() * k];
        data.par_chunks_mut(k)
            .enumerate()
            .for_each(|(z, out)| self.probs_into(features.at(z), out));
        ProbMap::from_vec(features.height, features.width, k, data).expect("consistent shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySegmenter {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl ToySegmenter {
    pub fn new(encoder: Encoder, n_classes: usize, seed: u64) -> Self {
        let dim = encoder.feature_dim();
        ToySegmenter { encoder, decoder: Decoder::random(n_classes, dim, 0.01, seed) }
    }

    pub fn n_classes(&self) -> usize {
        self.decoder.n_classes
    }

    pub fn probs(&self, image: &RgbImage) -> ProbMap {
        self.decoder.predict(&self.encoder.encode(image))
    }

    /// Argmax prediction with 1-based class ids.
    pub fn predict_mask(&self, image: &RgbImage) -> Result<LabelMask> {
        crate::segments::argmax_mask(&self.probs(image))
    }
}

/// Adds `n_new` output classes. Old decoder rows are copied; the new rows
/// are drawn from a seeded Gaussian with standard deviation 0.01.
pub fn extend_model(f: &ToySegmenter, n_new: usize, seed: u64) -> Result<ToySegmenter> {
    if n_new == 0 {
        return Err(Error::Config("extension needs at least one new class".into()));
    }
    let old = &f.decoder;
    let fresh = Decoder::random(n_new, old.dim, 0.01, seed);
    let mut weights = old.weights.clone();
    weights.extend_from_slice(&fresh.weights);
    let mut bias = old.bias.clone();
    bias.extend_from_slice(&fresh.bias);
    Ok(ToySegmenter {
        encoder: f.encoder.clone(),
        decoder: Decoder { n_classes: old.n_classes + n_new, dim: old.dim, weights, bias },
    })
}
