// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense vector statistics and the vocabulary projection.
//!
//! The unembedding is stored in 32-bit floats; every reduction here is
//! carried out in 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RotateError};

/// The `V x d` unembedding matrix, row-major, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Unembedding {
    vocab_size: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Unembedding {
    pub fn new(vocab_size: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != vocab_size * dim {
            return Err(RotateError::DimensionMismatch {
                context: "unembedding buffer",
                expected: vocab_size * dim,
                actual: data.len(),
            });
        }
        if vocab_size == 0 || dim == 0 {
            return Err(RotateError::EmptySet("unembedding"));
        }
        Ok(Self {
            vocab_size,
            dim,
            data,
        })
    }

    /// Build from `f64` rows, narrowing to storage precision.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(RotateError::DimensionMismatch {
                    context: "unembedding row",
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend(row.iter().map(|&x| x as f32));
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, token: usize) -> &[f32] {
        &self.data[token * self.dim..(token + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// `U^T g`: pulls a vocabulary-space vector back into weight space.
    pub fn pull_back(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.vocab_size);
        let mut out = vec![0.0; self.dim];
        for (row, &gi) in self.rows().zip(g) {
            if gi == 0.0 {
                continue;
            }
            for (o, &u) in out.iter_mut().zip(row) {
                *o += gi * f64::from(u);
            }
        }
        out
    }
}

/// Logits of a weight-space direction over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_channel: Option<usize>,
}

impl LogitVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which entries enter the moment sums when a mask is applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMode {
    /// Masked entries are replaced by zero and still counted.
    #[default]
    ZeroFill,
    /// Masked entries are dropped.
    Exclude,
}

/// Population moments of a logit distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub count: usize,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn dot_mixed(row: &[f32], v: &[f64]) -> f64 {
    row.iter().zip(v).map(|(&u, &x)| f64::from(u) * x).sum()
}

/// `z = U v`: the logit each token receives from direction `v`.
pub fn project_logits(v: &[f64], unembedding: &Unembedding) -> Result<LogitVector> {
    if v.len() != unembedding.dim() {
        return Err(RotateError::DimensionMismatch {
            context: "project_logits",
            expected: unembedding.dim(),
            actual: v.len(),
        });
    }
    let values = unembedding.rows().map(|row| dot_mixed(row, v)).collect();
    Ok(LogitVector {
        values,
        source_channel: None,
    })
}

/// Moments of `values` restricted by `admissible` under `mode`.
///
/// Uses two passes: the mean first, then centered powers.
pub fn moments(values: &[f64], admissible: &[bool], mode: MomentMode) -> Result<MomentSummary> {
    if values.len() != admissible.len() {
        return Err(RotateError::DimensionMismatch {
            context: "moments mask",
            expected: values.len(),
            actual: admissible.len(),
        });
    }
    let selected = || {
        values
            .iter()
            .zip(admissible)
            .filter_map(move |(&x, &keep)| match (keep, mode) {
                (true, _) => Some(x),
                (false, MomentMode::ZeroFill) => Some(0.0),
                (false, MomentMode::Exclude) => None,
            })
    };
    summarize(selected)
}

/// Moments over every entry.
pub fn moments_unmasked(values: &[f64]) -> Result<MomentSummary> {
    summarize(|| values.iter().copied())
}

fn summarize<I, F>(entries: F) -> Result<MomentSummary>
where
    I: Iterator<Item = f64>,
    F: Fn() -> I,
{
    let (count, sum) = entries().fold((0usize, 0.0f64), |(n, s), x| (n + 1, s + x));
    if count < 2 {
        return Err(RotateError::Undefined("moments need at least two entries"));
    }
    let n = count as f64;
    let mean = sum / n;
    let (mut m2, mut m3, mut m4) = (0.0f64, 0.0f64, 0.0f64);
    for x in entries() {
        let c = x - mean;
        let c2 = c * c;
        m2 += c2;
        m3 += c2 * c;
        m4 += c2 * c2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if !m2.is_finite() || m2 <= 0.0 {
        if m2.is_finite() {
            return Err(RotateError::DegenerateDistribution { mean });
        }
        return Err(RotateError::NonFinite("moments"));
    }
    let std = m2.sqrt();
    Ok(MomentSummary {
        mean,
        std,
        skewness: m3 / (m2 * std),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        count,
    })
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RotateError::DimensionMismatch {
            context: "cosine",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return Err(RotateError::ZeroVector("cosine"));
    }
    // sqrt(x * x) == x exactly, so cosine(a, a) is exactly 1.
    Ok((dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}
