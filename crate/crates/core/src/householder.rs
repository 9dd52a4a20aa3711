// SPDX-License-Identifier: MIT OR Apache-2.0

//! Householder-parameterized channel search.
//!
//! A channel is `v = R w` with `R = I - 2 h h^T / |h|^2` (or a product of
//! such reflections). The objective trades vocabulary kurtosis of `v`
//! against cosine distance from `w`:
//!
//! ```text
//! L(h) = -lambda * ln(1 + Kurt(mask(U v))) + 1 - cos(w, v)
//! ```
//!
//! The gradient with respect to every normal `h` is computed analytically.
//! `L` depends on `h` only through its direction, so `grad . h = 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RotateError};
use crate::linstats::{self, dot, norm, MomentMode, MomentSummary, Unembedding};
use crate::mask::TokenMask;

/// Lower clamp on the argument of the kurtosis logarithm.
pub const LOG_ARG_FLOOR: f64 = 1e-6;

/// `w - 2 (w . h_hat) h_hat`, in O(d).
pub fn reflect(w: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if w.len() != h.len() {
        return Err(RotateError::DimensionMismatch {
            context: "reflect",
            expected: w.len(),
            actual: h.len(),
        });
    }
    let hn = norm(h);
    if hn == 0.0 || !hn.is_finite() {
        return Err(RotateError::ZeroVector("householder normal"));
    }
    let scale = 2.0 * dot(w, h) / (hn * hn);
    Ok(w.iter().zip(h).map(|(&x, &hi)| x - scale * hi).collect())
}

/// Apply `h1` then `h2`. The composed map is a proper rotation.
pub fn compose_reflect(w: &[f64], h1: &[f64], h2: &[f64]) -> Result<Vec<f64>> {
    reflect(&reflect(w, h1)?, h2)
}

/// Apply every reflection in order.
pub fn apply_reflections(w: &[f64], normals: &[Vec<f64>]) -> Result<Vec<f64>> {
    normals
        .iter()
        .try_fold(w.to_vec(), |acc, h| reflect(&acc, h))
}

/// Value of the objective split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `ln(max(1 + Kurt, LOG_ARG_FLOOR))`.
    pub kurtosis_term: f64,
    /// `1 - cos(w, v)`, in `[0, 2]`.
    pub regularization_term: f64,
    pub lambda: f64,
}

/// Everything computed in one pass over the objective.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    /// Moments of the masked logits of `v`.
    pub moments: MomentSummary,
    pub cosine: f64,
    pub v: Vec<f64>,
    /// One gradient per reflection normal, when requested.
    pub gradient: Option<Vec<Vec<f64>>>,
}

/// The channel objective for one weight vector under a fixed mask.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub w: &'a [f64],
    pub unembedding: &'a Unembedding,
    pub admissible: &'a [bool],
    pub lambda: f64,
    pub mode: MomentMode,
}

impl<'a> Objective<'a> {
    pub fn new(
        w: &'a [f64],
        unembedding: &'a Unembedding,
        mask: &'a TokenMask,
        lambda: f64,
        mode: MomentMode,
    ) -> Result<Self> {
        if w.len() != unembedding.dim() {
            return Err(RotateError::DimensionMismatch {
                context: "objective weight vector",
                expected: unembedding.dim(),
                actual: w.len(),
            });
        }
        if mask.vocab_size() != unembedding.vocab_size() {
            return Err(RotateError::DimensionMismatch {
                context: "objective mask",
                expected: unembedding.vocab_size(),
                actual: mask.vocab_size(),
            });
        }
        if norm(w) == 0.0 {
            return Err(RotateError::ZeroVector("weight vector"));
        }
        Ok(Self {
            w,
            unembedding,
            admissible: mask.admissible(),
            lambda,
            mode,
        })
    }

    pub fn loss(&self, normals: &[Vec<f64>]) -> Result<LossBreakdown> {
        Ok(self.evaluate(normals, false)?.loss)
    }

    pub fn evaluate(&self, normals: &[Vec<f64>], with_gradient: bool) -> Result<Evaluation> {
        // Forward through the reflections, keeping each input and unit normal.
        let mut inputs = Vec::with_capacity(normals.len());
        let mut units = Vec::with_capacity(normals.len());
        let mut x = self.w.to_vec();
        for h in normals {
            if h.len() != x.len() {
                return Err(RotateError::DimensionMismatch {
                    context: "householder normal",
                    expected: x.len(),
                    actual: h.len(),
                });
            }
            let hn = norm(h);
            if hn == 0.0 || !hn.is_finite() {
                return Err(RotateError::ZeroVector("householder normal"));
            }
            let unit: Vec<f64> = h.iter().map(|&c| c / hn).collect();
            let a = dot(&x, &unit);
            let y: Vec<f64> = x.iter().zip(&unit).map(|(&xi, &ui)| xi - 2.0 * a * ui).collect();
            inputs.push(x);
            units.push((unit, hn, a));
            x = y;
        }
        let v = x;

        let z = linstats::project_logits(&v, self.unembedding)?.values;
        let moments = linstats::moments(&z, self.admissible, self.mode)?;
        let one_plus = 1.0 + moments.excess_kurtosis;
        let kurtosis_term = one_plus.max(LOG_ARG_FLOOR).ln();

        let (nw, nv) = (norm(self.w), norm(&v));
        if nv == 0.0 {
            return Err(RotateError::ZeroVector("channel"));
        }
        let wv = dot(self.w, &v);
        let raw_cos = wv / (nw * nv);
        let cosine = raw_cos.clamp(-1.0, 1.0);
        let regularization_term = (1.0 - raw_cos).clamp(0.0, 2.0);
        let total = -self.lambda * kurtosis_term + regularization_term;
        if !total.is_finite() {
            return Err(RotateError::NonFinite("loss"));
        }
        let loss = LossBreakdown {
            total,
            kurtosis_term,
            regularization_term,
            lambda: self.lambda,
        };

        let gradient = if with_gradient {
            let mut g_v = self.kurtosis_pullback(&z, &moments, one_plus);
            // d(1 - cos)/dv = -(w / (|w||v|) - (w.v) v / (|w||v|^3))
            let a = 1.0 / (nw * nv);
            let b = wv / (nw * nv * nv * nv);
            for ((g, &wi), &vi) in g_v.iter_mut().zip(self.w).zip(&v) {
                *g -= a * wi - b * vi;
            }
            let mut grads = vec![Vec::new(); normals.len()];
            let mut g_y = g_v;
            for k in (0..normals.len()).rev() {
                let (unit, hn, a) = &units[k];
                let x = &inputs[k];
                let gu = dot(&g_y, unit);
                // y = x - 2 (x.u) u
                let g_unit: Vec<f64> = x
                    .iter()
                    .zip(&g_y)
                    .map(|(&xi, &gi)| -2.0 * (gu * xi + a * gi))
                    .collect();
                let radial = dot(&g_unit, unit);
                grads[k] = g_unit
                    .iter()
                    .zip(unit)
                    .map(|(&g, &u)| (g - radial * u) / hn)
                    .collect();
                for (g, &u) in g_y.iter_mut().zip(unit) {
                    *g -= 2.0 * gu * u;
                }
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(RotateError::NonFinite("gradient"));
            }
            Some(grads)
        } else {
            None
        };

        Ok(Evaluation {
            loss,
            moments,
            cosine,
            v,
            gradient,
        })
    }

    /// Gradient of `-lambda * ln(1 + Kurt)` with respect to `v`.
    fn kurtosis_pullback(&self, z: &[f64], m: &MomentSummary, one_plus: f64) -> Vec<f64> {
        if one_plus <= LOG_ARG_FLOOR || self.lambda == 0.0 {
            return vec![0.0; self.unembedding.dim()];
        }
        let n = m.count as f64;
        let m2 = m.std * m.std;
        let m4 = (m.excess_kurtosis + 3.0) * m2 * m2;
        let m3 = m.skewness * m2 * m.std;
        let coef = -self.lambda / one_plus;
        let a = 4.0 / (n * m2 * m2);
        let b = 4.0 * m4 / (n * m2 * m2 * m2);
        // Masked entries are constant (zero-fill) or absent (exclude): no gradient.
        let g_z: Vec<f64> = z
            .iter()
            .zip(self.admissible)
            .map(|(&zi, &keep)| {
                if keep {
                    let c = zi - m.mean;
                    coef * (a * (c * c * c - m3) - b * c)
                } else {
                    0.0
                }
            })
            .collect();
        self.unembedding.pull_back(&g_z)
    }
}

/// Objective value for a single reflection with zero-filled masking.
pub fn loss(
    w: &[f64],
    h: &[f64],
    unembedding: &Unembedding,
    mask: &TokenMask,
    lambda: f64,
) -> Result<LossBreakdown> {
    Objective::new(w, unembedding, mask, lambda, MomentMode::ZeroFill)?.loss(&[h.to_vec()])
}

/// `dL/dh` for a single reflection with zero-filled masking.
pub fn loss_gradient(
    w: &[f64],
    h: &[f64],
    unembedding: &Unembedding,
    mask: &TokenMask,
    lambda: f64,
) -> Result<Vec<f64>> {
    let eval = Objective::new(w, unembedding, mask, lambda, MomentMode::ZeroFill)?
        .evaluate(&[h.to_vec()], true)?;
    Ok(eval.gradient.and_then(|mut g| g.pop()).unwrap_or_default())
}

/// Decoupled-weight-decay Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(len: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
            first: vec![0.0; len],
            second: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        for (((p, &g), m), s) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *p *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *s = self.beta2 * *s + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let s_hat = *s / bc2;
            *p -= self.learning_rate * m_hat / (s_hat.sqrt() + self.epsilon);
        }
    }

    /// Rescale the moment buffers of `range` after its parameters were
    /// multiplied by `factor`, so later gradients (which scale by
    /// `1 / factor`) stay consistent with the history.
    pub fn rescale(&mut self, range: std::ops::Range<usize>, factor: f64) {
        for m in &mut self.first[range.clone()] {
            *m /= factor;
        }
        for s in &mut self.second[range] {
            *s /= factor * factor;
        }
    }
}

/// Inner-loop settings for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSettings {
    pub lambda: f64,
    pub eta: f64,
    pub n_step: usize,
    pub eps_conv: f64,
    pub conv_window: usize,
    pub moment_mode: MomentMode,
    /// Number of composed reflections (1 or 2).
    pub reflections: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    /// Restore each normal to its initial norm every this many steps.
    pub renorm_every: usize,
}

impl Default for ChannelSettings {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            eta: 2e-3,
            n_step: 3000,
            eps_conv: 1e-6,
            conv_window: 50,
            moment_mode: MomentMode::ZeroFill,
            reflections: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            renorm_every: 100,
        }
    }
}

impl ChannelSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(RotateError::InvalidConfig(what.to_string()));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if self.n_step == 0 {
            return bad("n_step must be at least 1");
        }
        if !(1..=2).contains(&self.reflections) {
            return bad("reflections must be 1 or 2");
        }
        if self.conv_window == 0 {
            return bad("conv_window must be at least 1");
        }
        if self.eps_conv.is_nan() || self.eps_conv < 0.0 {
            return bad("eps_conv must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub loss: f64,
    pub kurtosis: f64,
    pub cosine: f64,
}

/// Per-step history of one channel optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub steps: Vec<TraceStep>,
    pub termination: Termination,
}

/// Reflection normals plus optimizer state.
#[derive(Debug, Clone)]
pub struct HouseholderState {
    pub normals: Vec<Vec<f64>>,
    pub step: usize,
    pub optimizer: AdamW,
}

/// Result of one channel optimization.
#[derive(Debug, Clone)]
pub struct ChannelFit {
    pub state: HouseholderState,
    pub v: Vec<f64>,
    pub trace: OptTrace,
    /// Evaluation at the final normals.
    pub final_eval: Evaluation,
}

fn window_mean(xs: &[TraceStep]) -> f64 {
    xs.iter().map(|s| s.loss).sum::<f64>() / xs.len() as f64
}

/// Optimize the reflection normals for one channel, starting from `h ~ N(0, I)`.
pub fn optimize_channel<R: Rng + ?Sized>(
    w: &[f64],
    unembedding: &Unembedding,
    mask: &TokenMask,
    settings: &ChannelSettings,
    rng: &mut R,
) -> Result<ChannelFit> {
    settings.validate()?;
    let objective = Objective::new(w, unembedding, mask, settings.lambda, settings.moment_mode)?;
    let d = w.len();

    let mut normals: Vec<Vec<f64>> = (0..settings.reflections)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let target_norms: Vec<f64> = normals.iter().map(|h| norm(h)).collect();
    let mut optimizer = AdamW::new(
        d * settings.reflections,
        settings.eta,
        settings.beta1,
        settings.beta2,
        settings.adam_epsilon,
        settings.weight_decay,
    );

    let mut flat = vec![0.0; d * settings.reflections];
    let mut flat_grad = vec![0.0; d * settings.reflections];
    let mut steps = Vec::with_capacity(settings.n_step);
    let mut termination = Termination::MaxSteps;
    let window = settings.conv_window;

    for step in 0..settings.n_step {
        let eval = objective.evaluate(&normals, true)?;
        steps.push(TraceStep {
            step,
            loss: eval.loss.total,
            kurtosis: eval.moments.excess_kurtosis,
            cosine: eval.cosine,
        });
        let grads = eval.gradient.expect("gradient requested");
        for (k, (h, g)) in normals.iter().zip(&grads).enumerate() {
            flat[k * d..(k + 1) * d].copy_from_slice(h);
            flat_grad[k * d..(k + 1) * d].copy_from_slice(g);
        }
        optimizer.step(&mut flat, &flat_grad);
        for (k, h) in normals.iter_mut().enumerate() {
            h.copy_from_slice(&flat[k * d..(k + 1) * d]);
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(RotateError::NonFinite("householder normal"));
        }

        if settings.renorm_every > 0 && (step + 1) % settings.renorm_every == 0 {
            for (k, h) in normals.iter_mut().enumerate() {
                let hn = norm(h);
                if hn == 0.0 {
                    return Err(RotateError::ZeroVector("householder normal"));
                }
                let factor = target_norms[k] / hn;
                h.iter_mut().for_each(|x| *x *= factor);
                optimizer.rescale(k * d..(k + 1) * d, factor);
            }
        }

        if steps.len() >= 2 * window {
            let n = steps.len();
            let recent = window_mean(&steps[n - window..]);
            let previous = window_mean(&steps[n - 2 * window..n - window]);
            if (recent - previous).abs() < settings.eps_conv {
                termination = Termination::Converged;
                break;
            }
        }
    }

    let final_eval = objective.evaluate(&normals, false)?;
    let step = steps.len();
    Ok(ChannelFit {
        v: final_eval.v.clone(),
        state: HouseholderState {
            normals,
            step,
            optimizer,
        },
        trace: OptTrace { steps, termination },
        final_eval,
    })
}
