// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared inputs for the benchmarks.

use rotatelab::synthbench::{plant, PlantSpec};
use rotatelab::{NeuronId, Role, Unembedding, WeightVector};

/// A planted neuron of width `d` over a vocabulary of `vocab_size` tokens.
pub fn fixture(d: usize, vocab_size: usize) -> (WeightVector, Unembedding) {
    let (planted, unembedding) =
        plant(&PlantSpec::new(d, vocab_size, 3, 8, 0.05, 7)).expect("benchmark sizes are valid");
    let id = NeuronId {
        layer: 0,
        role: Role::Gate,
        index: 0,
    };
    (WeightVector { id, values: planted.w }, unembedding)
}

/// A deterministic normal with small, varied entries.
pub fn normal_for(w: &[f64]) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(i, x)| x + 0.1 * ((i as f64) * 0.7).sin())
        .collect()
}
