// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use crate::error::{Result, RotateError};

/// Token id to token string.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    /// Placeholder names `<tok{i}>` for synthetic vocabularies.
    pub fn synthetic(size: usize) -> Self {
        Self::new((0..size).map(|i| format!("<tok{i}>")).collect())
    }

    /// Invert a `token -> id` map; ids must cover `0..len` exactly once.
    pub fn from_token_ids(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens: Vec<Option<String>> = vec![None; map.len()];
        for (token, &id) in map {
            let slot = tokens.get_mut(id).ok_or_else(|| {
                RotateError::InvalidInput(format!(
                    "vocab id {id} for {token:?} exceeds entry count {}",
                    map.len()
                ))
            })?;
            if slot.is_some() {
                return Err(RotateError::InvalidInput(format!("vocab id {id} assigned twice")));
            }
            *slot = Some(token.clone());
        }
        Ok(Self::new(tokens.into_iter().map(Option::unwrap).collect()))
    }

    pub fn to_token_ids(&self) -> BTreeMap<String, usize> {
        self.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}
