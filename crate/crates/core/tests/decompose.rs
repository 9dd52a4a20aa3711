// SPDX-License-Identifier: MIT OR Apache-2.0

use rotatelab::channels::match_channels;
use rotatelab::linstats::project_logits;
use rotatelab::rotate::{decompose, decompose_batch, update_mask};
use rotatelab::synthbench::{plant, recovery_score, PlantSpec};
use rotatelab::{Depletion, NeuronId, Role, RotateConfig, WeightVector};

fn planted(seed: u64) -> (rotatelab::synthbench::PlantedNeuron, rotatelab::Unembedding, WeightVector) {
    let (p, u) = plant(&PlantSpec::standard(seed)).unwrap();
    let w = WeightVector {
        id: NeuronId { layer: 0, role: Role::Gate, index: seed as u32 },
        values: p.w.clone(),
    };
    (p, u, w)
}

fn quick() -> RotateConfig {
    RotateConfig { n_iter: 6, n_step: 600, ..RotateConfig::default() }
}

#[test]
fn single_planted_direction_is_recovered_almost_exactly() {
    let spec = PlantSpec::new(64, 512, 1, 8, 0.0, 11);
    let (p, u) = plant(&spec).unwrap();
    let w = WeightVector { id: NeuronId { layer: 0, role: Role::In, index: 0 }, values: p.w.clone() };
    let config = RotateConfig { n_iter: 1, ..RotateConfig::default() };
    let d = decompose(&w, &u, &config, &[]).unwrap();
    let r = recovery_score(&d, &p).unwrap();
    assert!(r[0].abs_cosine >= 0.99, "{r:?}");
    assert_eq!(r[0].support_jaccard, 1.0);
}

#[test]
fn decomposition_is_deterministic() {
    let (_, u, w) = planted(1);
    let a = decompose(&w, &u, &quick(), &[3, 4]).unwrap();
    let b = decompose(&w, &u, &quick(), &[3, 4]).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn trace_and_mask_invariants_hold() {
    let (_, u, w) = planted(2);
    let config = quick();
    let d = decompose(&w, &u, &config, &[0, 1]).unwrap();
    assert_eq!(d.reconstruction.len(), d.channels.len());
    for (i, c) in d.channels.iter().enumerate() {
        assert!(i == 0 || c.iteration > d.channels[i - 1].iteration, "discovery order");
        assert!((-1.0..=1.0).contains(&c.cosine_with_w));
        assert!(c.top_tokens.windows(2).all(|p| p[0].logit >= p[1].logit));
        assert!(c.bottom_tokens.windows(2).all(|p| p[0].logit <= p[1].logit));
    }
    let curve: Vec<f64> = d.reconstruction.iter().map(|p| p.explained_norm).collect();
    assert!(curve.windows(2).all(|p| p[1] >= p[0] - 1e-12), "{curve:?}");
    assert!(curve.iter().all(|&e| (0.0..=1.0).contains(&e)));

    // Replay the masks: each channel's top token was admissible when it was
    // found, and masks only grow.
    let mut mask = rotatelab::rotate::init_mask(u.vocab_size(), &[0, 1]).unwrap();
    for (i, c) in d.channels.iter().enumerate() {
        let z = project_logits(&c.v, &u).unwrap();
        let top = (0..u.vocab_size())
            .filter(|&t| mask.is_admissible(t))
            .max_by(|&a, &b| z.values[a].abs().total_cmp(&z.values[b].abs()))
            .unwrap();
        assert!(mask.is_admissible(top));
        let before: Vec<usize> = mask.masked_tokens().map(|(t, _)| t).collect();
        mask = update_mask(&z, &mask, config.k_sigma, i).unwrap();
        assert!(before.iter().all(|&t| !mask.is_admissible(t)));
        assert!(mask.masked_count() >= before.len());
    }
    assert_eq!(mask, d.final_mask);
}

#[test]
fn batch_matches_sequential_runs_in_order() {
    let neurons: Vec<WeightVector> = (3..7).map(|s| planted(s).2).collect();
    let (_, u, _) = planted(3);
    let config = RotateConfig { n_iter: 3, n_step: 300, ..RotateConfig::default() };
    let batch = decompose_batch(&neurons, &u, &config, &[], 3).unwrap();
    assert!(batch.failures.is_empty());
    for (w, d) in neurons.iter().zip(&batch.decompositions) {
        let single = decompose(w, &u, &config, &[]).unwrap();
        assert_eq!(serde_json::to_string(d).unwrap(), serde_json::to_string(&single).unwrap());
    }
}

#[test]
fn batch_isolates_bad_neurons() {
    let (_, u, good) = planted(5);
    let bad = WeightVector { id: NeuronId { layer: 0, role: Role::Gate, index: 99 }, values: vec![0.0; 64] };
    let config = RotateConfig { n_iter: 1, n_step: 100, ..RotateConfig::default() };
    let out = decompose_batch(&[good, bad], &u, &config, &[], 2).unwrap();
    assert_eq!(out.decompositions.len(), 1);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].neuron.index, 99);
}

#[test]
fn a_run_matches_itself_perfectly() {
    let (_, u, w) = planted(6);
    let d = decompose(&w, &u, &quick(), &[]).unwrap();
    let report = match_channels(&d.channels, &d.channels, 20).unwrap();
    assert_eq!(report.mean_cosine, 1.0);
    assert_eq!(report.mean_jaccard, 1.0);
}

#[test]
fn no_depletion_repeats_itself_while_masking_moves_on() {
    let (_, u, w) = planted(7);
    let none = decompose(&w, &u, &RotateConfig { depletion: Depletion::None, ..quick() }, &[]).unwrap();
    let masked = decompose(&w, &u, &quick(), &[]).unwrap();
    let top = |d: &rotatelab::Decomposition, i: usize| -> Vec<usize> { d.channels[i].top_ids(8).collect() };
    let overlap = |d: &rotatelab::Decomposition| rotatelab::channels::jaccard(top(d, 0), top(d, 1));
    assert!(overlap(&none) > overlap(&masked), "{} vs {}", overlap(&none), overlap(&masked));
    assert!(none.final_mask.masked_count() == 0);
}

#[test]
fn two_reflection_channels_are_proper_rotations() {
    let (_, u, w) = planted(8);
    let config = RotateConfig { reflections: 2, n_iter: 2, n_step: 400, ..RotateConfig::default() };
    let d = decompose(&w, &u, &config, &[]).unwrap();
    for c in &d.channels {
        assert_eq!(c.householder.len(), 2);
        let v = rotatelab::householder::apply_reflections(&w.values, &c.householder).unwrap();
        let scale = rotatelab::linstats::norm(&w.values);
        assert!(v.iter().zip(&c.v).all(|(a, b)| (a - b).abs() <= 1e-12 * scale));
        assert!((rotatelab::linstats::norm(&c.v) - scale).abs() <= 1e-9 * scale);
    }
}
