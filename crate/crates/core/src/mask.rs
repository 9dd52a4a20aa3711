// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Result, RotateError};

/// Why a token was removed from the admissible set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskReason {
    Glitch,
    /// Claimed by the channel discovered at this (zero-based) position.
    Channel(usize),
}

/// Admissible vocabulary entries. Tokens are only ever removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "MaskRecord", try_from = "MaskRecord")]
pub struct TokenMask {
    admissible: Vec<bool>,
    provenance: Vec<Option<MaskReason>>,
    masked_count: usize,
}

impl TokenMask {
    pub fn all_admissible(vocab_size: usize) -> Self {
        Self {
            admissible: vec![true; vocab_size],
            provenance: vec![None; vocab_size],
            masked_count: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.admissible.len()
    }

    pub fn admissible(&self) -> &[bool] {
        &self.admissible
    }

    pub fn is_admissible(&self, token: usize) -> bool {
        self.admissible[token]
    }

    pub fn masked_count(&self) -> usize {
        self.masked_count
    }

    pub fn admissible_count(&self) -> usize {
        self.vocab_size() - self.masked_count
    }

    pub fn reason(&self, token: usize) -> Option<MaskReason> {
        self.provenance[token]
    }

    /// Mask `token`; returns false when it was already masked.
    pub fn mask(&mut self, token: usize, reason: MaskReason) -> Result<bool> {
        if token >= self.vocab_size() {
            return Err(RotateError::TokenOutOfRange {
                id: token,
                vocab_size: self.vocab_size(),
            });
        }
        if !self.admissible[token] {
            return Ok(false);
        }
        self.admissible[token] = false;
        self.provenance[token] = Some(reason);
        self.masked_count += 1;
        Ok(true)
    }

    /// Masked token ids in ascending order.
    pub fn masked_tokens(&self) -> impl Iterator<Item = (usize, MaskReason)> + '_ {
        self.provenance
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|r| (i, r)))
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    vocab_size: usize,
    masked: Vec<(usize, MaskReason)>,
}

impl From<TokenMask> for MaskRecord {
    fn from(mask: TokenMask) -> Self {
        Self {
            vocab_size: mask.vocab_size(),
            masked: mask.masked_tokens().collect(),
        }
    }
}

impl TryFrom<MaskRecord> for TokenMask {
    type Error = RotateError;

    fn try_from(record: MaskRecord) -> Result<Self> {
        let mut mask = TokenMask::all_admissible(record.vocab_size);
        for (id, reason) in record.masked {
            if !mask.mask(id, reason)? {
                return Err(RotateError::InvalidInput(format!(
                    "token {id} listed twice in mask record"
                )));
            }
        }
        Ok(mask)
    }
}
