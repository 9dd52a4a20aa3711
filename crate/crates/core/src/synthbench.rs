// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-ground-truth generators and the experiments built on them.
//!
//! A planted neuron is a known mixture of orthonormal directions, each of
//! which lines up with a small disjoint set of unembedding rows. Those rows
//! give every direction a spiky vocabulary projection, so a correct
//! decomposition should recover the directions and their token supports.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{self, jaccard, MatchReport};
use crate::error::{Result, RotateError};
use crate::linstats::{cosine, dot, norm, Unembedding};
use crate::rotate::{self, Decomposition, RotateConfig, WeightVector};

/// Norm of the Gaussian perturbation added to each support row before
/// renormalization.
pub const SUPPORT_JITTER: f64 = 0.1;

/// Parameters of a planted instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub d: usize,
    pub vocab_size: usize,
    pub k: usize,
    pub sparsity: usize,
    pub noise_level: f64,
    pub seed: u64,
    /// Mixture weights; drawn uniformly from `[0.5, 1.5]` when absent.
    pub coefficients: Option<Vec<f64>>,
}

impl PlantSpec {
    pub fn new(d: usize, vocab_size: usize, k: usize, sparsity: usize, noise_level: f64, seed: u64) -> Self {
        Self {
            d,
            vocab_size,
            k,
            sparsity,
            noise_level,
            seed,
            coefficients: None,
        }
    }

    /// The benchmark instance: `K = 3, d = 64, V = 512`, 8 tokens per direction, 5% noise.
    pub fn standard(seed: u64) -> Self {
        Self::new(64, 512, 3, 8, 0.05, seed)
    }

    pub fn with_coefficients(mut self, coefficients: Vec<f64>) -> Self {
        self.coefficients = Some(coefficients);
        self
    }
}

/// A synthetic neuron with known structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedNeuron {
    pub w: Vec<f64>,
    /// Orthonormal planted directions.
    pub directions: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    /// The noise actually added; `w = sum c_i dir_i + noise`.
    pub noise: Vec<f64>,
    /// Sorted, pairwise disjoint token ids per direction.
    pub token_supports: Vec<Vec<usize>>,
    pub seed: u64,
}

impl PlantedNeuron {
    pub fn signal(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.directions.first().map_or(0, Vec::len)];
        for (dir, &c) in self.directions.iter().zip(&self.coefficients) {
            s.iter_mut().zip(dir).for_each(|(x, &di)| *x += c * di);
        }
        s
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Generate a planted neuron and the unembedding it lives in.
pub fn plant(spec: &PlantSpec) -> Result<(PlantedNeuron, Unembedding)> {
    let PlantSpec { d, vocab_size, k, sparsity, noise_level, seed, .. } = *spec;
    if k == 0 || sparsity == 0 || d < k || k * sparsity > vocab_size {
        return Err(RotateError::InvalidInput(format!(
            "infeasible plant: d={d}, V={vocab_size}, K={k}, sparsity={sparsity}"
        )));
    }
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(RotateError::InvalidInput("noise_level must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Gram-Schmidt on Gaussian draws.
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(k);
    while directions.len() < k {
        let mut g = gaussian(&mut rng, d);
        for q in &directions {
            let c = dot(&g, q);
            g.iter_mut().zip(q).for_each(|(x, &qi)| *x -= c * qi);
        }
        if norm(&g) > 1e-8 {
            directions.push(normalized(g));
        }
    }

    let mut tokens: Vec<usize> = (0..vocab_size).collect();
    tokens.shuffle(&mut rng);
    let token_supports: Vec<Vec<usize>> = tokens[..k * sparsity]
        .chunks(sparsity)
        .map(|c| {
            let mut s = c.to_vec();
            s.sort_unstable();
            s
        })
        .collect();

    let mut rows: Vec<Vec<f64>> = (0..vocab_size).map(|_| normalized(gaussian(&mut rng, d))).collect();
    let jitter_scale = SUPPORT_JITTER / (d as f64).sqrt();
    for (dir, support) in directions.iter().zip(&token_supports) {
        for &t in support {
            let jitter = gaussian(&mut rng, d);
            rows[t] = normalized(dir.iter().zip(&jitter).map(|(&a, &j)| a + jitter_scale * j).collect());
        }
    }

    let coefficients = match &spec.coefficients {
        Some(c) if c.len() == k => c.clone(),
        Some(c) => {
            return Err(RotateError::DimensionMismatch {
                context: "plant coefficients",
                expected: k,
                actual: c.len(),
            })
        }
        None => (0..k).map(|_| rng.gen_range(0.5..1.5)).collect(),
    };
    let mut neuron = PlantedNeuron {
        w: Vec::new(),
        directions,
        coefficients,
        noise: Vec::new(),
        token_supports,
        seed,
    };
    let signal = neuron.signal();
    let noise_scale = noise_level * norm(&signal) / (d as f64).sqrt();
    neuron.noise = gaussian(&mut rng, d).into_iter().map(|g| noise_scale * g).collect();
    neuron.w = signal.iter().zip(&neuron.noise).map(|(s, n)| s + n).collect();
    Ok((neuron, Unembedding::from_rows(&rows)?))
}

/// How well one planted direction was recovered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionRecovery {
    pub direction: usize,
    pub best_channel: usize,
    /// `|cos|` between the direction and its best channel.
    pub abs_cosine: f64,
    /// Jaccard of the channel's top-`sparsity` tokens (bottom tokens for an
    /// anti-aligned channel) with the planted support.
    pub support_jaccard: f64,
}

/// Best-matching channel for every planted direction.
pub fn recovery_score(decomposition: &Decomposition, planted: &PlantedNeuron) -> Result<Vec<DirectionRecovery>> {
    if decomposition.channels.is_empty() || planted.directions.is_empty() {
        return Err(RotateError::EmptySet("recovery inputs"));
    }
    planted
        .directions
        .iter()
        .zip(&planted.token_supports)
        .enumerate()
        .map(|(direction, (dir, support))| {
            let mut best: Option<(usize, f64)> = None;
            for (i, ch) in decomposition.channels.iter().enumerate() {
                let c = cosine(dir, &ch.v)?;
                if best.map_or(true, |(_, b)| c.abs() > b.abs()) {
                    best = Some((i, c));
                }
            }
            let (best_channel, signed) = best.expect("nonempty");
            let ch = &decomposition.channels[best_channel];
            let k = support.len();
            let support_jaccard = if signed >= 0.0 {
                jaccard(ch.top_ids(k), support.iter().copied())
            } else {
                jaccard(ch.bottom_ids(k), support.iter().copied())
            };
            Ok(DirectionRecovery {
                direction,
                best_channel,
                abs_cosine: signed.abs(),
                support_jaccard,
            })
        })
        .collect()
}

/// Pairwise cross-seed matching for one neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub seeds: Vec<u64>,
    /// `(i, j, report)` for every seed pair `i < j`.
    pub pairs: Vec<(usize, usize, MatchReport)>,
    pub mean_cosine: f64,
    pub mean_jaccard: f64,
}

/// Decompose `w` once per seed and match every pair of runs.
pub fn consistency_experiment(
    w: &WeightVector,
    unembedding: &Unembedding,
    config: &RotateConfig,
    glitch_ids: &[usize],
    seeds: &[u64],
    topk: usize,
) -> Result<ConsistencyReport> {
    if seeds.len() < 2 {
        return Err(RotateError::InvalidInput("consistency needs at least two seeds".into()));
    }
    let runs: Vec<Decomposition> = seeds
        .par_iter()
        .map(|&seed| rotate::decompose(w, unembedding, &RotateConfig { seed, ..*config }, glitch_ids))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for i in 0..runs.len() {
        for j in (i + 1)..runs.len() {
            pairs.push((i, j, channels::match_channels(&runs[i].channels, &runs[j].channels, topk)?));
        }
    }
    let n = pairs.len() as f64;
    Ok(ConsistencyReport {
        seeds: seeds.to_vec(),
        mean_cosine: pairs.iter().map(|p| p.2.mean_cosine).sum::<f64>() / n,
        mean_jaccard: pairs.iter().map(|p| p.2.mean_jaccard).sum::<f64>() / n,
        pairs,
    })
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        return 0.0;
    }
    2.0 * a * b / (a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub eta: f64,
    pub k_sigma: f64,
}

/// Hyperparameter grid; the sweep visits the Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub etas: Vec<f64>,
    pub k_sigmas: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.1, 0.3, 0.5],
            etas: vec![8e-4, 2e-3],
            k_sigmas: vec![4.0, 6.0, 8.0],
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &lambda in &self.lambdas {
            for &eta in &self.etas {
                for &k_sigma in &self.k_sigmas {
                    out.push(GridPoint { lambda, eta, k_sigma });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub point: GridPoint,
    pub explained_norm: f64,
    pub orthogonality: f64,
    pub harmonic_mean: f64,
}

impl SweepResult {
    pub fn new(point: GridPoint, explained_norm: f64, orthogonality: f64) -> Self {
        Self {
            point,
            explained_norm,
            orthogonality,
            harmonic_mean: harmonic_mean(explained_norm, orthogonality),
        }
    }
}

/// Sort by harmonic mean, best first; equal scores keep grid order.
pub fn rank(mut results: Vec<SweepResult>) -> Vec<SweepResult> {
    results.sort_by(|a, b| b.harmonic_mean.total_cmp(&a.harmonic_mean));
    results
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub ranked: Vec<SweepResult>,
    /// Grid points dropped from the ranking, with the reason.
    pub failed: Vec<(GridPoint, RotateError)>,
}

/// Sweep n_step default: shorter than a full decomposition run.
pub const SWEEP_N_STEP: usize = 500;

/// Decompose every neuron at every grid point; rank by harmonic mean of
/// mean explained norm and mean orthogonality.
pub fn sweep(
    neurons: &[WeightVector],
    unembedding: &Unembedding,
    grid: &SweepGrid,
    base: &RotateConfig,
    glitch_ids: &[usize],
) -> Result<SweepOutcome> {
    let points = grid.points();
    if points.is_empty() || neurons.is_empty() {
        return Err(RotateError::EmptySet("sweep grid or neuron set"));
    }
    let evaluated: Vec<(GridPoint, Result<SweepResult>)> = points
        .par_iter()
        .map(|&point| {
            let config = RotateConfig {
                lambda: point.lambda,
                eta: point.eta,
                k_sigma: point.k_sigma,
                ..*base
            };
            let run = || -> Result<SweepResult> {
                let mut en = 0.0;
                let mut orth = 0.0;
                for w in neurons {
                    let d = rotate::decompose(w, unembedding, &config, glitch_ids)?;
                    en += d.explained_norm();
                    orth += d.orthogonality().ok_or(RotateError::Undefined(
                        "orthogonality needs at least two channels",
                    ))?;
                }
                let n = neurons.len() as f64;
                Ok(SweepResult::new(point, en / n, orth / n))
            };
            (point, run())
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (point, r) in evaluated {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => failed.push((point, e)),
        }
    }
    Ok(SweepOutcome {
        ranked: rank(ok),
        failed,
    })
}
