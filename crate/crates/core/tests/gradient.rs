// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic loss gradient against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rotatelab::householder::{loss, loss_gradient, Objective};
use rotatelab::linstats::{dot, norm};
use rotatelab::{MomentMode, TokenMask, Unembedding};

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;

struct Instance {
    w: Vec<f64>,
    normals: Vec<Vec<f64>>,
    u: Unembedding,
    mask: TokenMask,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn instance(seed: u64, d: usize, vocab: usize, reflections: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = gaussian(&mut rng, vocab * d).into_iter().map(|x| x as f32).collect();
    let u = Unembedding::new(vocab, d, data).unwrap();
    let mut mask = TokenMask::all_admissible(vocab);
    for id in 0..vocab {
        if rng.gen_bool(0.15) {
            mask.mask(id, rotatelab::MaskReason::Glitch).unwrap();
        }
    }
    Instance {
        w: gaussian(&mut rng, d),
        normals: (0..reflections).map(|_| gaussian(&mut rng, d)).collect(),
        u,
        mask,
    }
}

/// Largest per-coordinate error relative to the coordinate itself.
fn worst_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > 0.0)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

fn finite_difference(f: impl Fn(&[Vec<f64>]) -> f64, normals: &[Vec<f64>]) -> Vec<Vec<f64>> {
    normals
        .iter()
        .enumerate()
        .map(|(r, h)| {
            (0..h.len())
                .map(|i| {
                    let mut plus = normals.to_vec();
                    let mut minus = normals.to_vec();
                    plus[r][i] += STEP;
                    minus[r][i] -= STEP;
                    (f(&plus) - f(&minus)) / (2.0 * STEP)
                })
                .collect()
        })
        .collect()
}

fn check(seed: u64, d: usize, vocab: usize, reflections: usize, mode: MomentMode, lambda: f64) -> f64 {
    let inst = instance(seed, d, vocab, reflections);
    let objective = Objective::new(&inst.w, &inst.u, &inst.mask, lambda, mode).unwrap();
    let analytic = objective.evaluate(&inst.normals, true).unwrap().gradient.unwrap();
    let numeric = finite_difference(|n| objective.loss(n).unwrap().total, &inst.normals);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| worst_relative_error(a, n))
        .fold(0.0, f64::max)
}

#[test]
fn single_reflection_zero_fill() {
    for seed in 0..20 {
        let err = check(seed, 16, 64, 1, MomentMode::ZeroFill, 0.3);
        assert!(err < REL_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn single_reflection_exclude() {
    for seed in 100..110 {
        let err = check(seed, 24, 96, 1, MomentMode::Exclude, 0.5);
        assert!(err < REL_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn composed_reflections() {
    for seed in 200..210 {
        let err = check(seed, 12, 48, 2, MomentMode::ZeroFill, 0.3);
        assert!(err < REL_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn free_functions_agree_with_objective() {
    let inst = instance(7, 16, 64, 1);
    let h = &inst.normals[0];
    let g = loss_gradient(&inst.w, h, &inst.u, &inst.mask, 0.3).unwrap();
    let numeric: Vec<f64> = (0..h.len())
        .map(|i| {
            let mut p = h.clone();
            let mut m = h.clone();
            p[i] += STEP;
            m[i] -= STEP;
            let lp = loss(&inst.w, &p, &inst.u, &inst.mask, 0.3).unwrap().total;
            let lm = loss(&inst.w, &m, &inst.u, &inst.mask, 0.3).unwrap().total;
            (lp - lm) / (2.0 * STEP)
        })
        .collect();
    assert!(worst_relative_error(&g, &numeric) < REL_TOL);
}

#[test]
fn gradient_is_orthogonal_to_normal() {
    for seed in 0..20 {
        let inst = instance(seed, 32, 128, 1);
        let h = &inst.normals[0];
        let g = loss_gradient(&inst.w, h, &inst.u, &inst.mask, 0.3).unwrap();
        assert!(dot(&g, h).abs() <= 1e-5 * norm(&g) * norm(h), "seed {seed}");
    }
}

#[test]
fn regularizer_is_stationary_when_normal_is_orthogonal_to_w() {
    let inst = instance(3, 16, 64, 1);
    // Make h orthogonal to w so that v = w.
    let mut h = inst.normals[0].clone();
    let c = dot(&h, &inst.w) / dot(&inst.w, &inst.w);
    h.iter_mut().zip(&inst.w).for_each(|(hi, wi)| *hi -= c * wi);
    let g = loss_gradient(&inst.w, &h, &inst.u, &inst.mask, 0.0).unwrap();
    for i in 0..h.len() {
        let mut probe = vec![0.0; h.len()];
        probe[i] = 1.0;
        assert!(dot(&g, &probe).abs() < 1e-4, "coordinate {i}: {}", g[i]);
    }
}
