// SPDX-License-Identifier: MIT OR Apache-2.0

//! Iterative decomposition of one neuron into vocabulary channels.
//!
//! Each iteration optimizes a fresh reflection, records the channel, then
//! depletes the signal it explained so the next iteration finds a new
//! direction. Depletion is token masking by default; residual subtraction
//! and no depletion are available for comparison runs.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{self, top_tokens_of_logits, Channel};
use crate::error::{Result, RotateError};
use crate::householder::{self, ChannelSettings};
use crate::linstats::{self, cosine, dot, norm, LogitVector, MomentMode, Unembedding};
use crate::mask::{MaskReason, TokenMask};

/// MLP weight matrix a neuron vector is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Gate,
    In,
    Out,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Gate => "gate",
            Role::In => "in",
            Role::Out => "out",
        }
    }

    fn code(self) -> u64 {
        match self {
            Role::Gate => 1,
            Role::In => 2,
            Role::Out => 3,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = RotateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(Role::Gate),
            "in" | "up" => Ok(Role::In),
            "out" | "down" => Ok(Role::Out),
            other => Err(RotateError::InvalidInput(format!(
                "unknown role {other:?} (expected gate, in or out)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: u32,
    pub role: Role,
    pub index: u32,
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}.{}", self.layer, self.role, self.index)
    }
}

/// One neuron weight vector with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub id: NeuronId,
    pub values: Vec<f64>,
}

/// How an iteration removes what the previous channel explained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depletion {
    /// Mask the tokens the channel drives beyond `k_sigma` deviations.
    #[default]
    Masking,
    /// Replace the target by its residual after projecting out the channel.
    Subtraction,
    /// Independent runs on the same target.
    None,
}

impl std::str::FromStr for Depletion {
    type Err = RotateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masking" => Ok(Depletion::Masking),
            "subtraction" => Ok(Depletion::Subtraction),
            "none" => Ok(Depletion::None),
            other => Err(RotateError::InvalidInput(format!("unknown depletion {other:?}"))),
        }
    }
}

/// Decomposition settings. Flat keys; the same names are used in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotateConfig {
    pub lambda: f64,
    pub eta: f64,
    pub k_sigma: f64,
    pub n_iter: usize,
    pub n_step: usize,
    /// Stop once a channel's masked kurtosis falls below this.
    pub tau: Option<f64>,
    pub eps_conv: f64,
    pub seed: u64,
    pub moment_mode: MomentMode,
    pub depletion: Depletion,
    /// Composed reflections per channel (1 or 2).
    pub reflections: usize,
    /// Length of the stored top and bottom token lists.
    pub top_k: usize,
}

impl Default for RotateConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            eta: 2e-3,
            k_sigma: 4.0,
            n_iter: 50,
            n_step: 3000,
            tau: None,
            eps_conv: 1e-6,
            seed: 0,
            moment_mode: MomentMode::ZeroFill,
            depletion: Depletion::Masking,
            reflections: 1,
            top_k: 50,
        }
    }
}

impl RotateConfig {
    pub fn channel_settings(&self) -> ChannelSettings {
        ChannelSettings {
            lambda: self.lambda,
            eta: self.eta,
            n_step: self.n_step,
            eps_conv: self.eps_conv,
            moment_mode: self.moment_mode,
            reflections: self.reflections,
            ..ChannelSettings::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.channel_settings().validate()?;
        if !(self.k_sigma > 0.0 && self.k_sigma.is_finite()) {
            return Err(RotateError::InvalidConfig("k_sigma must be positive".into()));
        }
        if self.n_iter == 0 {
            return Err(RotateError::InvalidConfig("n_iter must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(RotateError::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.tau.is_some_and(|t| !t.is_finite()) {
            return Err(RotateError::InvalidConfig("tau must be finite".into()));
        }
        Ok(())
    }
}

/// Mask with only the glitch tokens removed.
pub fn init_mask(vocab_size: usize, glitch_ids: &[usize]) -> Result<TokenMask> {
    let mut mask = TokenMask::all_admissible(vocab_size);
    for &id in glitch_ids {
        mask.mask(id, MaskReason::Glitch)?;
    }
    Ok(mask)
}

/// Mask every admissible token with `|z_i - mu| > k_sigma * sigma`, the
/// statistics taken over admissible tokens only.
pub fn update_mask(
    z: &LogitVector,
    mask: &TokenMask,
    k_sigma: f64,
    channel_index: usize,
) -> Result<TokenMask> {
    let stats = linstats::moments(&z.values, mask.admissible(), MomentMode::Exclude)?;
    let threshold = k_sigma * stats.std;
    let mut next = mask.clone();
    for (i, &zi) in z.values.iter().enumerate() {
        if mask.is_admissible(i) && (zi - stats.mean).abs() > threshold {
            next.mask(i, MaskReason::Channel(channel_index))?;
        }
    }
    Ok(next)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for one optimization attempt; independent of batch order.
pub fn derive_seed(base: u64, neuron: NeuronId, iteration: usize, attempt: u32) -> u64 {
    let mut h = splitmix64(u64::from(neuron.layer) << 8 | neuron.role.code());
    h = splitmix64(h ^ u64::from(neuron.index));
    h = splitmix64(h ^ iteration as u64);
    h = splitmix64(h ^ u64::from(attempt));
    base ^ h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionPoint {
    /// Explained norm after this channel was added (greedy residual).
    pub explained_norm: f64,
    /// Same, measured against the span of all channels so far.
    pub span_explained_norm: f64,
    pub cosine_with_w: f64,
}

/// An iteration that produced no channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    IterationBudget,
    KurtosisThreshold,
    /// Depletion left nothing with nonzero variance to optimize.
    Exhausted,
}

/// All channels found for one neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub neuron: NeuronId,
    pub config: RotateConfig,
    pub channels: Vec<Channel>,
    pub reconstruction: Vec<ReconstructionPoint>,
    pub final_mask: TokenMask,
    pub gaps: Vec<Gap>,
    pub stop: StopReason,
    /// Seconds spent per iteration; not serialized, so archives stay reproducible.
    #[serde(skip)]
    pub wall_clock: Vec<f64>,
}

impl Decomposition {
    pub fn channel_vectors(&self) -> Vec<&[f64]> {
        self.channels.iter().map(|c| c.v.as_slice()).collect()
    }

    pub fn explained_norm(&self) -> f64 {
        self.reconstruction.last().map_or(0.0, |p| p.explained_norm)
    }

    pub fn orthogonality(&self) -> Option<f64> {
        channels::orthogonality_score(&self.channel_vectors()).ok()
    }
}

fn is_retryable(err: &RotateError) -> bool {
    matches!(err, RotateError::NonFinite(_) | RotateError::ZeroVector("householder normal"))
}

/// Run the iterative channel search on one neuron.
pub fn decompose(
    w: &WeightVector,
    unembedding: &Unembedding,
    config: &RotateConfig,
    glitch_ids: &[usize],
) -> Result<Decomposition> {
    config.validate()?;
    let original = &w.values;
    if original.len() != unembedding.dim() {
        return Err(RotateError::DimensionMismatch {
            context: "decompose weight vector",
            expected: unembedding.dim(),
            actual: original.len(),
        });
    }
    if norm(original) == 0.0 {
        return Err(RotateError::ZeroVector("weight vector"));
    }
    let settings = config.channel_settings();
    let mut mask = init_mask(unembedding.vocab_size(), glitch_ids)?;
    let mut target = original.clone();
    let mut channels: Vec<Channel> = Vec::new();
    let mut reconstruction = Vec::new();
    let mut gaps = Vec::new();
    let mut wall_clock = Vec::new();
    let mut stop = StopReason::IterationBudget;

    'iterations: for iteration in 0..config.n_iter {
        let started = Instant::now();
        let mut fit = None;
        for attempt in 0..2 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, w.id, iteration, attempt));
            match householder::optimize_channel(&target, unembedding, &mask, &settings, &mut rng) {
                Ok(f) => {
                    fit = Some(f);
                    break;
                }
                Err(e) if is_retryable(&e) => {
                    log::warn!("{}: iteration {iteration} attempt {attempt} failed: {e}", w.id);
                    if attempt == 1 {
                        gaps.push(Gap {
                            iteration,
                            reason: e.to_string(),
                        });
                    }
                }
                Err(RotateError::DegenerateDistribution { .. }) => {
                    stop = StopReason::Exhausted;
                    break 'iterations;
                }
                Err(e) => return Err(e),
            }
        }
        let Some(fit) = fit else {
            wall_clock.push(started.elapsed().as_secs_f64());
            continue;
        };

        let index = channels.len();
        let z = LogitVector {
            values: linstats::project_logits(&fit.v, unembedding)?.values,
            source_channel: Some(index),
        };
        let lists = top_tokens_of_logits(&z.values, config.top_k, Some(mask.admissible()));
        let masked_kurtosis = fit.final_eval.moments.excess_kurtosis;
        let cosine_with_w = cosine(original, &fit.v)?;
        channels.push(Channel {
            iteration,
            v: fit.v.clone(),
            householder: fit.state.normals,
            masked_excess_kurtosis: masked_kurtosis,
            skewness: fit.final_eval.moments.skewness,
            cosine_with_w,
            final_loss: fit.final_eval.loss.total,
            steps: fit.trace.steps.len(),
            termination: fit.trace.termination,
            top_tokens: lists.top,
            bottom_tokens: lists.bottom,
        });
        reconstruction.push(ReconstructionPoint {
            explained_norm: channels::explained_norm(original, channels.iter().map(|c| c.v.as_slice()))?,
            span_explained_norm: channels::span_explained_norm(
                original,
                channels.iter().map(|c| c.v.as_slice()),
            )?,
            cosine_with_w,
        });

        match config.depletion {
            Depletion::Masking => match update_mask(&z, &mask, config.k_sigma, index) {
                Ok(next) => mask = next,
                Err(RotateError::DegenerateDistribution { .. } | RotateError::Undefined(_)) => {
                    wall_clock.push(started.elapsed().as_secs_f64());
                    stop = StopReason::Exhausted;
                    break;
                }
                Err(e) => return Err(e),
            },
            Depletion::Subtraction => {
                let vv = dot(&fit.v, &fit.v);
                let coef = dot(&target, &fit.v) / vv;
                target.iter_mut().zip(&fit.v).for_each(|(t, &vi)| *t -= coef * vi);
                if norm(&target) <= 1e-12 * norm(original) {
                    wall_clock.push(started.elapsed().as_secs_f64());
                    stop = StopReason::Exhausted;
                    break;
                }
            }
            Depletion::None => {}
        }
        wall_clock.push(started.elapsed().as_secs_f64());

        if config.tau.is_some_and(|tau| masked_kurtosis < tau) {
            stop = StopReason::KurtosisThreshold;
            break;
        }
    }

    Ok(Decomposition {
        neuron: w.id,
        config: *config,
        channels,
        reconstruction,
        final_mask: mask,
        gaps,
        stop,
        wall_clock,
    })
}

#[derive(Debug)]
pub struct BatchFailure {
    /// Position in the input list.
    pub position: usize,
    pub neuron: NeuronId,
    pub error: RotateError,
}

/// Results of a batch in input order, plus the failures that were skipped.
#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub decompositions: Vec<Decomposition>,
    pub failures: Vec<BatchFailure>,
}

/// Decompose every neuron on up to `parallelism` worker threads.
///
/// Each neuron derives its own seeds, so the output does not depend on
/// the worker count.
pub fn decompose_batch(
    neurons: &[WeightVector],
    unembedding: &Unembedding,
    config: &RotateConfig,
    glitch_ids: &[usize],
    parallelism: usize,
) -> Result<BatchOutcome> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| RotateError::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<Result<Decomposition>> = pool.install(|| {
        neurons
            .par_iter()
            .map(|w| decompose(w, unembedding, config, glitch_ids))
            .collect()
    });
    let mut outcome = BatchOutcome::default();
    for (position, (result, w)) in results.into_iter().zip(neurons).enumerate() {
        match result {
            Ok(d) => outcome.decompositions.push(d),
            Err(error) => outcome.failures.push(BatchFailure {
                position,
                neuron: w.id,
                error,
            }),
        }
    }
    Ok(outcome)
}
