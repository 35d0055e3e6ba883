//! Exact t-SNE with Euclidean input similarities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    /// Upper bound on the step size, see [`effective_learning_rate`].
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub init_scale: f64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            init_scale: 1e-4,
        }
    }
}

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTION: usize = 50;
const MIN_LEARNING_RATE: f64 = 50.0;
const P_FLOOR: f64 = 1e-12;

/// 2-D points with a reference back to the patch each one represents.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    pub patch_refs: Vec<String>,
}

fn squared_distances(y: &[Vec<f64>]) -> Vec<f64> {
    let n = y.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = y[i].iter().zip(&y[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional row `p_{j|i}` for precision `beta`; returns (row, entropy in nats).
fn conditional_row(dist: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let n = dist.len();
    let min_d = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut row: Vec<f64> = (0..n)
        .map(|j| if j == i { 0.0 } else { (-(dist[j] - min_d) * beta).exp() })
        .collect();
    let sum: f64 = row.iter().sum();
    let weighted: f64 = row.iter().zip(dist).map(|(p, d)| p * (d - min_d)).sum();
    let entropy = sum.ln() + beta * weighted / sum;
    row.iter_mut().for_each(|p| *p /= sum);
    (row, entropy)
}

/// Bisection on the precision until the row entropy matches `target` nats.
fn calibrated_row(d: &[f64], i: usize, target: f64) -> Vec<f64> {
    let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
    let (mut row, mut h) = conditional_row(d, i, beta);
    for _ in 0..MAX_BISECTION {
        let diff = h - target;
        if diff.abs() < ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
        (row, h) = conditional_row(d, i, beta);
    }
    row
}

/// Symmetrized joint probabilities `P = (P_cond + P_cond^T) / 2n`, row-major n x n.
pub fn joint_probabilities(y: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = y.len();
    if n < 2 {
        return Err(Error::Precondition("need at least 2 points".into()));
    }
    if !(perplexity > 0.0) || perplexity >= n as f64 {
        return Err(Error::Config(format!("perplexity {perplexity} must lie in (0, {n})")));
    }
    let dist = squared_distances(y);
    let target = perplexity.ln();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| calibrated_row(&dist[i * n..(i + 1) * n], i, target))
        .collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((rows[i][j] + rows[j][i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    Ok(p)
}

fn student_kernel(points: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = points.len();
    let mut num = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    (num, total)
}

/// `KL(P || Q)` of a 2-D configuration.
pub fn kl_divergence(p: &[f64], points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let (num, total) = student_kernel(points);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / total).max(f64::MIN_POSITIVE);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

/// Gradient of the KL objective with `P` scaled by `exaggeration`:
/// `dC/dy_i = 4 sum_j (a p_ij - q_ij)(1 + |y_i - y_j|^2)^-1 (y_i - y_j)`.
pub fn kl_gradient(p: &[f64], points: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let n = points.len();
    let (num, total) = student_kernel(points);
    (0..n)
        .map(|i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - w / total) * w;
                g[0] += coeff * (points[i][0] - points[j][0]);
                g[1] += coeff * (points[i][1] - points[j][1]);
            }
            g
        })
        .collect()
}

/// Step size actually used for `n` points: `n / (4 * early_exaggeration)`
/// floored at 50 and capped by the configured rate. Few points at the full
/// rate make the momentum iteration oscillate.
pub fn effective_learning_rate(params: &TsneParams, n: usize) -> f64 {
    (n as f64 / (4.0 * params.early_exaggeration)).max(MIN_LEARNING_RATE).min(params.learning_rate)
}

/// Runs t-SNE and returns the embedding with the KL divergence (unexaggerated
/// `P`) after every iteration.
pub fn tsne_with_trace(y: &[Vec<f64>], params: &TsneParams, seed: u64) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
    let n = y.len();
    if n < 5 {
        return Err(Error::Precondition(format!("t-SNE needs at least 5 points, got {n}")));
    }
    let p = joint_probabilities(y, params.perplexity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [a * params.init_scale, b * params.init_scale]
        })
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let learning_rate = effective_learning_rate(params, n);
    let mut trace = Vec::with_capacity(params.iterations);
    for it in 0..params.iterations {
        let early = it < params.exaggeration_iterations;
        let exaggeration = if early { params.early_exaggeration } else { 1.0 };
        let momentum = if early { params.initial_momentum } else { params.final_momentum };
        let grad = kl_gradient(&p, &points, exaggeration);
        for i in 0..n {
            for d in 0..2 {
                velocity[i][d] = momentum * velocity[i][d] - learning_rate * grad[i][d];
                points[i][d] += velocity[i][d];
            }
        }
        let centre = [
            points.iter().map(|q| q[0]).sum::<f64>() / n as f64,
            points.iter().map(|q| q[1]).sum::<f64>() / n as f64,
        ];
        for q in &mut points {
            q[0] -= centre[0];
            q[1] -= centre[1];
        }
        let kl = kl_divergence(&p, &points);
        if !kl.is_finite() {
            return Err(Error::Numeric(format!("t-SNE diverged at iteration {it}")));
        }
        trace.push(kl);
    }
    Ok((points, trace))
}

pub fn tsne(y: &[Vec<f64>], refs: Vec<String>, params: &TsneParams, seed: u64) -> Result<Embedding2D> {
    if refs.len() != y.len() {
        return Err(Error::Shape("one reference per input row required".into()));
    }
    let (points, _) = tsne_with_trace(y, params, seed)?;
    Ok(Embedding2D { points, patch_refs: refs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn perplexity_calibration_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let dist = squared_distances(&y);
        let n = y.len();
        for i in 0..n {
            let row = calibrated_row(&dist[i * n..(i + 1) * n], i, 10f64.ln());
            let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            assert!((h.exp() - 10.0).abs() < 1e-3, "row {i}: perplexity {}", h.exp());
        }
        let p = joint_probabilities(&y, 10.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(p[i * n + j], p[j * n + i]);
            }
        }
    }

    #[test]
    fn config_errors() {
        let y = vec![vec![0.0]; 6];
        assert!(matches!(joint_probabilities(&y, 6.0), Err(Error::Config(_))));
        assert!(tsne_with_trace(&y[..4], &TsneParams::default(), 0).is_err());
    }

    #[test]
    fn duplicates_are_finite() {
        let y = vec![vec![1.0, 1.0]; 8];
        let params = TsneParams { perplexity: 3.0, iterations: 300, ..Default::default() };
        let (pts, trace) = tsne_with_trace(&y, &params, 2).unwrap();
        assert!(pts.iter().flatten().all(|v| v.is_finite()));
        assert!(trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let params = TsneParams { perplexity: 4.0, iterations: 200, ..Default::default() };
        let a = tsne_with_trace(&y, &params, 7).unwrap();
        let b = tsne_with_trace(&y, &params, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_inputs_use_a_reduced_step() {
        let params = TsneParams::default();
        assert_eq!(effective_learning_rate(&params, 40), 50.0);
        assert_eq!(effective_learning_rate(&params, 4800), 100.0);
        assert_eq!(effective_learning_rate(&params, 100_000), 200.0);
        let slow = TsneParams { learning_rate: 10.0, ..params };
        assert_eq!(effective_learning_rate(&slow, 40), 10.0);
    }

    #[test]
    fn simplex_embeds_near_equidistant() {
        // 5 unit vectors are pairwise equidistant; no planar layout does
        // better than the regular pentagon's diagonal/side ratio of 1.618
        let y: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let params = TsneParams { perplexity: 2.0, ..Default::default() };
        let mut spread = 0.0;
        for seed in 0..5 {
            let (pts, _) = tsne_with_trace(&y, &params, seed).unwrap();
            let mut d = Vec::new();
            for i in 0..5 {
                for j in (i + 1)..5 {
                    d.push(((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt());
                }
            }
            let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            spread += hi / lo / 5.0;
        }
        assert!(spread <= 2.2, "mean max/min distance ratio {spread}");
    }
}
