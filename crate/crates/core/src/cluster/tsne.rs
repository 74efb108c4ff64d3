//! Exact t-SNE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub dims: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches and exaggeration ends.
    pub switch_iteration: usize,
    pub exaggeration: f64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            perplexity: 30.0,
            dims: 2,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            switch_iteration: 250,
            exaggeration: 12.0,
        }
    }
}

const ENTROPY_TOLERANCE: f64 = 1e-5;
const BISECTION_STEPS: usize = 200;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub embedding: Vec<Vec<f64>>,
    pub kl_initial: f64,
    pub kl_final: f64,
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.par_iter()
        .map(|a| {
            x.iter()
                .map(|b| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum())
                .collect()
        })
        .collect()
}

/// Conditional affinities of row `i` for precision `beta`, with their
/// entropy in nats.
fn row_affinities(d: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == i { 0.0 } else { (-(v - dmin) * beta).exp() })
        .collect();
    let sum: f64 = p.iter().sum();
    let mut h = 0.0;
    for (j, pj) in p.iter_mut().enumerate() {
        *pj /= sum;
        if j != i && *pj > 0.0 {
            h -= *pj * pj.ln();
        }
    }
    (p, h)
}

/// Symmetrised joint affinities `P`, rows calibrated to `ln(perplexity)`.
pub fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    if !(perplexity >= 1.0) || n as f64 <= 3.0 * perplexity {
        return Err(Error::Parameter(format!(
            "t-SNE needs perplexity >= 1 and more than 3*perplexity points (n = {n}, perplexity = {perplexity})"
        )));
    }
    let d = squared_distances(x);
    let target = perplexity.ln();
    let conditional: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut beta = 1.0;
            let (mut p, mut h) = row_affinities(&d[i], i, beta);
            for _ in 0..BISECTION_STEPS {
                if (h - target).abs() < ENTROPY_TOLERANCE {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                (p, h) = row_affinities(&d[i], i, beta);
            }
            p
        })
        .collect();
    let scale = 2.0 * n as f64;
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| ((conditional[i][j] + conditional[j][i]) / scale).max(1e-300))
                .collect()
        })
        .collect())
}

/// Student-t kernel `(1 + |y_i - y_j|²)^-1` and its off-diagonal sum.
fn kernel(y: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = y.len();
    let mut num = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d: f64 = y[i].iter().zip(&y[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                num[i][j] = 1.0 / (1.0 + d);
                total += num[i][j];
            }
        }
    }
    (num, total)
}

/// `KL(P || Q)` over off-diagonal pairs.
pub fn kl_divergence(p: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let (num, total) = kernel(y);
    let mut kl = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if i != j && p[i][j] > 0.0 {
                let q = (num[i][j] / total).max(1e-300);
                kl += p[i][j] * (p[i][j] / q).ln();
            }
        }
    }
    kl
}

/// Gradient of `KL(P || Q)` with respect to every embedding coordinate.
pub fn kl_gradient(p: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = y.len();
    let dims = y.first().map_or(0, Vec::len);
    let (num, total) = kernel(y);
    (0..n)
        .map(|i| {
            let mut g = vec![0.0; dims];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let coeff = 4.0 * (p[i][j] - num[i][j] / total) * num[i][j];
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk += coeff * (y[i][k] - y[j][k]);
                }
            }
            g
        })
        .collect()
}

pub fn tsne(x: &[Vec<f64>], options: &TsneOptions, seed: u64) -> Result<TsneResult> {
    if options.dims == 0 {
        return Err(Error::Parameter("t-SNE needs at least one output dimension".into()));
    }
    let p = joint_probabilities(x, options.perplexity)?;
    let n = x.len();
    let dims = options.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dims).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let kl_initial = kl_divergence(&p, &y);

    let mut velocity = vec![vec![0.0; dims]; n];
    let mut gains = vec![vec![1.0f64; dims]; n];
    let exaggerated: Vec<Vec<f64>> = p
        .iter()
        .map(|row| row.iter().map(|v| v * options.exaggeration).collect())
        .collect();
    for iter in 0..options.iterations {
        let early = iter < options.switch_iteration;
        let grad = kl_gradient(if early { &exaggerated } else { &p }, &y);
        let momentum = if early {
            options.initial_momentum
        } else {
            options.final_momentum
        };
        for i in 0..n {
            for k in 0..dims {
                let same_sign = (grad[i][k] > 0.0) == (velocity[i][k] > 0.0);
                gains[i][k] = if same_sign {
                    gains[i][k] * 0.8
                } else {
                    gains[i][k] + 0.2
                }
                .max(MIN_GAIN);
                velocity[i][k] = momentum * velocity[i][k] - options.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += velocity[i][k];
            }
        }
        for k in 0..dims {
            let mean = y.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            for r in y.iter_mut() {
                r[k] -= mean;
            }
        }
    }
    let kl_final = kl_divergence(&p, &y);
    Ok(TsneResult {
        embedding: y,
        kl_initial,
        kl_final,
    })
}
