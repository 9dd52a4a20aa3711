// SPDX-License-Identifier: MIT OR Apache-2.0

//! Channel-level analytics: token lists, reconstruction, ablation,
//! assignment, cross-run matching and the kurtosis survey.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RotateError};
use crate::householder::Termination;
use crate::linstats::{self, cosine, dot, norm, MomentMode, Unembedding};
use crate::vocab::Vocab;

/// One entry of a channel's vocabulary projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub id: usize,
    /// Resolved token string; empty until resolved against a vocabulary.
    #[serde(default)]
    pub token: String,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenLists {
    /// Highest logits first.
    pub top: Vec<TokenScore>,
    /// Lowest logits first.
    pub bottom: Vec<TokenScore>,
}

impl TokenLists {
    pub fn resolve(&mut self, vocab: &Vocab) {
        for t in self.top.iter_mut().chain(self.bottom.iter_mut()) {
            t.token = vocab.get(t.id).unwrap_or_default().to_string();
        }
    }
}

/// A discovered direction `v = R w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    /// Zero-based iteration that produced the channel.
    pub iteration: usize,
    pub v: Vec<f64>,
    /// Reflection normals, in application order.
    pub householder: Vec<Vec<f64>>,
    pub masked_excess_kurtosis: f64,
    pub skewness: f64,
    pub cosine_with_w: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub termination: Termination,
    pub top_tokens: Vec<TokenScore>,
    pub bottom_tokens: Vec<TokenScore>,
}

impl Channel {
    pub fn top_ids(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.top_tokens.iter().take(k).map(|t| t.id)
    }

    pub fn bottom_ids(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.bottom_tokens.iter().take(k).map(|t| t.id)
    }
}

/// The `k` largest and `k` smallest admissible logits, ties by ascending id.
pub fn top_tokens_of_logits(z: &[f64], k: usize, admissible: Option<&[bool]>) -> TokenLists {
    let mut ids: Vec<usize> = match admissible {
        Some(mask) => (0..z.len()).filter(|&i| mask[i]).collect(),
        None => (0..z.len()).collect(),
    };
    let score = |i: usize| TokenScore {
        id: i,
        token: String::new(),
        logit: z[i],
    };
    ids.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let top = ids.iter().take(k).map(|&i| score(i)).collect();
    ids.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    let bottom = ids.iter().take(k).map(|&i| score(i)).collect();
    TokenLists { top, bottom }
}

/// Top and bottom tokens of `v`'s vocabulary projection.
pub fn top_tokens(
    v: &[f64],
    unembedding: &Unembedding,
    vocab: Option<&Vocab>,
    k: usize,
    admissible: Option<&[bool]>,
) -> Result<TokenLists> {
    if k == 0 {
        return Err(RotateError::InvalidInput("k must be at least 1".into()));
    }
    let z = linstats::project_logits(v, unembedding)?.values;
    let mut lists = top_tokens_of_logits(&z, k, admissible);
    if let Some(vocab) = vocab {
        lists.resolve(vocab);
    }
    Ok(lists)
}

fn check_channel(w: &[f64], v: &[f64], context: &'static str) -> Result<f64> {
    if v.len() != w.len() {
        return Err(RotateError::DimensionMismatch {
            context,
            expected: w.len(),
            actual: v.len(),
        });
    }
    let vv = dot(v, v);
    if vv == 0.0 {
        return Err(RotateError::ZeroVector("channel"));
    }
    Ok(vv)
}

/// Residual after greedily projecting each unit-normalized channel, in
/// order, out of what the previous channels left: `r_t = r_{t-1} -
/// (r_{t-1} . v_t_hat) v_t_hat`. Its norm never increases.
pub fn residual<'a, I>(w: &[f64], channels: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut r = w.to_vec();
    for v in channels {
        let vv = check_channel(w, v, "residual")?;
        let coef = dot(&r, v) / vv;
        r.iter_mut().zip(v).for_each(|(ri, &vi)| *ri -= coef * vi);
    }
    Ok(r)
}

/// `w - sum_i (w . v_i_hat) v_i_hat`: every coefficient taken against the
/// original `w`. Matches [`residual`] for orthogonal channels; for
/// correlated ones it over-subtracts and can grow without bound.
pub fn residual_raw_sum<'a, I>(w: &[f64], channels: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut r = w.to_vec();
    for v in channels {
        let vv = check_channel(w, v, "residual")?;
        let coef = dot(w, v) / vv;
        r.iter_mut().zip(v).for_each(|(ri, &vi)| *ri -= coef * vi);
    }
    Ok(r)
}

fn weight_norm(w: &[f64]) -> Result<f64> {
    let nw = norm(w);
    if nw == 0.0 {
        return Err(RotateError::ZeroVector("weight vector"));
    }
    Ok(nw)
}

/// `1 - |r_t| / |w|` with the greedy [`residual`]; in `[0, 1]` and
/// non-decreasing as channels are appended.
pub fn explained_norm<'a, I>(w: &[f64], channels: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let nw = weight_norm(w)?;
    Ok(1.0 - norm(&residual(w, channels)?) / nw)
}

/// `1 - |r_t| / |w|` with [`residual_raw_sum`], reported raw.
pub fn explained_norm_raw_sum<'a, I>(w: &[f64], channels: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let nw = weight_norm(w)?;
    Ok(1.0 - norm(&residual_raw_sum(w, channels)?) / nw)
}

/// Explained norm after each prefix of `channels`.
pub fn explained_norm_curve(w: &[f64], channels: &[&[f64]]) -> Result<Vec<f64>> {
    let nw = weight_norm(w)?;
    let mut r = w.to_vec();
    let mut curve = Vec::with_capacity(channels.len());
    for &v in channels {
        let vv = check_channel(w, v, "explained_norm_curve")?;
        let coef = dot(&r, v) / vv;
        r.iter_mut().zip(v).for_each(|(ri, &vi)| *ri -= coef * vi);
        curve.push(1.0 - norm(&r) / nw);
    }
    Ok(curve)
}

/// `1 - |w - P w| / |w|` where `P` projects onto the span of `channels`.
///
/// Unlike [`explained_norm`] this is order-independent and bounded in
/// `[0, 1]`, so it stays meaningful when channels are far from orthogonal.
pub fn span_explained_norm<'a, I>(w: &[f64], channels: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let nw = weight_norm(w)?;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in channels {
        if v.len() != w.len() {
            return Err(RotateError::DimensionMismatch {
                context: "span_explained_norm",
                expected: w.len(),
                actual: v.len(),
            });
        }
        let nv = norm(v);
        if nv == 0.0 {
            return Err(RotateError::ZeroVector("channel"));
        }
        // Modified Gram-Schmidt, twice for stability with near-parallel channels.
        let mut q = v.to_vec();
        for _ in 0..2 {
            for b in &basis {
                let a = dot(&q, b);
                q.iter_mut().zip(b).for_each(|(qi, &bi)| *qi -= a * bi);
            }
        }
        let nq = norm(&q);
        if nq > 1e-10 * nv {
            basis.push(q.into_iter().map(|x| x / nq).collect());
        }
    }
    let mut r = w.to_vec();
    for b in &basis {
        let a = dot(&r, b);
        r.iter_mut().zip(b).for_each(|(ri, &bi)| *ri -= a * bi);
    }
    Ok((1.0 - norm(&r) / nw).max(0.0))
}

pub fn per_channel_cosine(w: &[f64], v: &[f64]) -> Result<f64> {
    cosine(w, v)
}

/// Normalization used when projecting a channel out of a weight vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// `w - (w . v_hat) v_hat`, an orthogonal projection.
    #[default]
    Unit,
    /// `w - (w . v) v` verbatim; only a projection when `|v| = 1`.
    PaperRaw,
}

pub fn ablate(w: &[f64], v: &[f64], mode: AblationMode) -> Result<Vec<f64>> {
    if w.len() != v.len() {
        return Err(RotateError::DimensionMismatch {
            context: "ablate",
            expected: w.len(),
            actual: v.len(),
        });
    }
    let vv = dot(v, v);
    if vv == 0.0 {
        return Err(RotateError::ZeroVector("ablated channel"));
    }
    let coef = match mode {
        AblationMode::Unit => dot(w, v) / vv,
        AblationMode::PaperRaw => dot(w, v),
    };
    Ok(w.iter().zip(v).map(|(&wi, &vi)| wi - coef * vi).collect())
}

/// Index of the channel with the largest `x . v`; ties go to the earliest.
pub fn top_channel<V: AsRef<[f64]>>(x: &[f64], channels: &[V]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in channels.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != x.len() {
            return Err(RotateError::DimensionMismatch {
                context: "top_channel",
                expected: x.len(),
                actual: v.len(),
            });
        }
        let s = dot(x, v);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(RotateError::EmptySet("channel set"))
}

pub fn jaccard<T: Eq + std::hash::Hash>(a: impl IntoIterator<Item = T>, b: impl IntoIterator<Item = T>) -> f64 {
    let a: HashSet<T> = a.into_iter().collect();
    let b: HashSet<T> = b.into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub a: usize,
    pub b: usize,
    pub cosine: f64,
    pub topk_jaccard: f64,
}

/// One-to-one alignment between two channel sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub pairs: Vec<MatchedPair>,
    pub mean_cosine: f64,
    pub mean_jaccard: f64,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

/// Greedy matching: all cross pairs by descending cosine, a pair is taken
/// when both endpoints are still free.
pub fn match_channels(a: &[Channel], b: &[Channel], topk: usize) -> Result<MatchReport> {
    if a.is_empty() || b.is_empty() {
        return Err(RotateError::EmptySet("channel set to match"));
    }
    let mut cross = Vec::with_capacity(a.len() * b.len());
    for (i, ca) in a.iter().enumerate() {
        for (j, cb) in b.iter().enumerate() {
            cross.push((i, j, cosine(&ca.v, &cb.v)?));
        }
    }
    cross.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (i, j, c) in cross {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        pairs.push(MatchedPair {
            a: i,
            b: j,
            cosine: c,
            topk_jaccard: jaccard(a[i].top_ids(topk), b[j].top_ids(topk)),
        });
    }
    let n = pairs.len() as f64;
    let unfree = |used: &[bool]| used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i).collect();
    Ok(MatchReport {
        mean_cosine: pairs.iter().map(|p| p.cosine).sum::<f64>() / n,
        mean_jaccard: pairs.iter().map(|p| p.topk_jaccard).sum::<f64>() / n,
        unmatched_a: unfree(&used_a),
        unmatched_b: unfree(&used_b),
        pairs,
    })
}

/// `1 - mean_{i != j} |cos(v_i, v_j)|`.
pub fn orthogonality_score<V: AsRef<[f64]>>(channels: &[V]) -> Result<f64> {
    let n = channels.len();
    if n < 2 {
        return Err(RotateError::Undefined("orthogonality needs at least two channels"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += cosine(channels[i].as_ref(), channels[j].as_ref())?.abs();
        }
    }
    // Each unordered pair stands for two ordered ones.
    Ok(1.0 - 2.0 * total / (n * (n - 1)) as f64)
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    match sorted.len() {
        0 => None,
        1 => Some(sorted[0]),
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub count: usize,
    pub missing: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Per-neuron vocabulary kurtosis of one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyReport {
    /// `None` where the projection had zero variance.
    pub kurtosis: Vec<Option<f64>>,
    sorted: Vec<f64>,
}

impl SurveyReport {
    pub fn from_values(kurtosis: Vec<Option<f64>>) -> Self {
        let mut sorted: Vec<f64> = kurtosis.iter().flatten().copied().collect();
        sorted.sort_by(f64::total_cmp);
        Self { kurtosis, sorted }
    }

    pub fn summary(&self) -> Option<QuantileSummary> {
        let q = |p| quantile_sorted(&self.sorted, p);
        Some(QuantileSummary {
            count: self.sorted.len(),
            missing: self.kurtosis.len() - self.sorted.len(),
            min: q(0.0)?,
            q1: q(0.25)?,
            median: q(0.5)?,
            q3: q(0.75)?,
            max: q(1.0)?,
        })
    }

    pub fn quantile(&self, q: f64) -> Option<f64> {
        quantile_sorted(&self.sorted, q)
    }

    /// Percentage of surveyed neurons with kurtosis at or below `value`.
    pub fn percentile_of(&self, value: f64) -> Option<f64> {
        if self.sorted.is_empty() {
            return None;
        }
        let below = self.sorted.partition_point(|&x| x <= value);
        Some(100.0 * below as f64 / self.sorted.len() as f64)
    }
}

/// Excess kurtosis of each row's vocabulary projection, masked tokens excluded.
pub fn layer_kurtosis_survey<R: AsRef<[f64]> + Sync>(
    rows: &[R],
    unembedding: &Unembedding,
    admissible: &[bool],
) -> Result<SurveyReport> {
    if admissible.len() != unembedding.vocab_size() {
        return Err(RotateError::DimensionMismatch {
            context: "survey mask",
            expected: unembedding.vocab_size(),
            actual: admissible.len(),
        });
    }
    let values: Vec<Result<Option<f64>>> = rows
        .par_iter()
        .map(|row| {
            let z = linstats::project_logits(row.as_ref(), unembedding)?.values;
            match linstats::moments(&z, admissible, MomentMode::Exclude) {
                Ok(m) => Ok(Some(m.excess_kurtosis)),
                Err(RotateError::DegenerateDistribution { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    Ok(SurveyReport::from_values(values.into_iter().collect::<Result<_>>()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(v: Vec<f64>, top: &[usize]) -> Channel {
        Channel {
            iteration: 0,
            v,
            householder: Vec::new(),
            masked_excess_kurtosis: 0.0,
            skewness: 0.0,
            cosine_with_w: 0.0,
            final_loss: 0.0,
            steps: 0,
            termination: Termination::MaxSteps,
            top_tokens: top
                .iter()
                .map(|&id| TokenScore { id, token: String::new(), logit: 0.0 })
                .collect(),
            bottom_tokens: Vec::new(),
        }
    }

    #[test]
    fn hand_matvec_token_lists() {
        let lists = top_tokens_of_logits(&[2.0, -1.0, 1.0], 2, None);
        let ids = |l: &[TokenScore]| l.iter().map(|t| t.id).collect::<Vec<_>>();
        assert_eq!(ids(&lists.top), vec![0, 2]);
        assert_eq!(ids(&lists.bottom), vec![1, 2]);
    }

    #[test]
    fn ties_broken_by_id_and_mask_respected() {
        let lists = top_tokens_of_logits(&[1.0; 5], 3, Some(&[true, false, true, true, true]));
        let ids: Vec<_> = lists.top.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![0, 2, 3]);
        let ids: Vec<_> = lists.bottom.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![0, 2, 3]);
        // k beyond the admissible count truncates.
        assert_eq!(top_tokens_of_logits(&[1.0, 2.0], 10, Some(&[true, false])).top.len(), 1);
    }

    #[test]
    fn top_tokens_resolves_strings() {
        let u = Unembedding::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let vocab = Vocab::new(vec!["a".into(), "b".into(), "c".into()]);
        let lists = top_tokens(&[2.0, -1.0], &u, Some(&vocab), 1, None).unwrap();
        assert_eq!(lists.top[0].token, "a");
        assert_eq!(lists.bottom[0].token, "b");
        assert!(top_tokens(&[2.0, -1.0], &u, None, 0, None).is_err());
    }

    #[test]
    fn explained_norm_cases() {
        let w = [3.0, 4.0];
        assert_eq!(explained_norm(&w, std::iter::empty()).unwrap(), 0.0);
        let one = explained_norm(&w, [&[6.0, 8.0][..]]).unwrap();
        assert!((one - 1.0).abs() < 1e-15);
        let half = explained_norm(&[1.0, 1.0], [&[2.0, 0.0][..]]).unwrap();
        assert!((half - (1.0 - std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-15);
        assert!(explained_norm(&[0.0, 0.0], std::iter::empty()).is_err());
        let curve = explained_norm_curve(&[1.0, 1.0], &[&[1.0, 0.0], &[0.0, 5.0]]).unwrap();
        assert!((curve[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ablation_cases() {
        let w = [1.0, 2.0, 2.0];
        let gone = ablate(&w, &[2.0, 4.0, 4.0], AblationMode::Unit).unwrap();
        assert!(norm(&gone) < 1e-14);
        assert_eq!(ablate(&w, &[0.0, 1.0, -1.0], AblationMode::Unit).unwrap(), w.to_vec());
        let once = ablate(&w, &[1.0, 0.5, 0.0], AblationMode::Unit).unwrap();
        let twice = ablate(&once, &[1.0, 0.5, 0.0], AblationMode::Unit).unwrap();
        assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-14));
        // Verbatim mode with unit v equals the projection.
        assert_eq!(
            ablate(&w, &[1.0, 0.0, 0.0], AblationMode::PaperRaw).unwrap(),
            vec![0.0, 2.0, 2.0]
        );
        assert_eq!(
            ablate(&w, &[2.0, 0.0, 0.0], AblationMode::PaperRaw).unwrap(),
            vec![-3.0, 2.0, 2.0]
        );
        assert!(ablate(&w, &[0.0; 3], AblationMode::Unit).is_err());
    }

    #[test]
    fn top_channel_cases() {
        let chans = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.5, 0.5, 0.0]];
        assert_eq!(top_channel(&[0.0, 1.0, 0.0], &chans).unwrap(), 1);
        assert_eq!(top_channel(&[0.0, 0.0, 1.0], &chans).unwrap(), 0);
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(top_channel(&[1.0], &empty), Err(RotateError::EmptySet(_))));
    }

    #[test]
    fn matching_recovers_permutation() {
        let a = vec![
            channel(vec![1.0, 0.0, 0.0], &[1, 2]),
            channel(vec![0.0, 1.0, 0.0], &[3, 4]),
            channel(vec![0.0, 0.0, 1.0], &[5, 6]),
        ];
        let b = vec![a[2].clone(), a[0].clone(), a[1].clone()];
        let report = match_channels(&a, &b, 2).unwrap();
        let mut pairs: Vec<_> = report.pairs.iter().map(|p| (p.a, p.b)).collect();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 1), (1, 2), (2, 0)]);
        assert_eq!(report.mean_cosine, 1.0);
        assert_eq!(report.mean_jaccard, 1.0);
        assert!(report.unmatched_a.is_empty() && report.unmatched_b.is_empty());
    }

    #[test]
    fn matching_uneven_sets_leaves_unmatched() {
        let a = vec![channel(vec![1.0, 0.0], &[1]), channel(vec![0.0, 1.0], &[2])];
        let b = vec![channel(vec![0.1, 1.0], &[2, 9])];
        let report = match_channels(&a, &b, 2).unwrap();
        assert_eq!(report.pairs.len(), 1);
        assert_eq!((report.pairs[0].a, report.pairs[0].b), (1, 0));
        assert_eq!(report.pairs[0].topk_jaccard, 0.5);
        assert_eq!(report.unmatched_a, vec![0]);
        assert!(match_channels(&a, &[], 2).is_err());
    }

    #[test]
    fn orthogonality_cases() {
        let ortho = vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, -3.0]];
        assert_eq!(orthogonality_score(&ortho).unwrap(), 1.0);
        let same = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(orthogonality_score(&same).unwrap().abs() < 1e-15);
        assert!(orthogonality_score(&ortho[..1]).is_err());
    }

    #[test]
    fn quantiles_and_percentiles() {
        let report = SurveyReport::from_values(vec![Some(3.0), None, Some(1.0), Some(2.0), Some(4.0)]);
        let s = report.summary().unwrap();
        assert_eq!((s.count, s.missing), (4, 1));
        assert_eq!((s.min, s.median, s.max), (1.0, 2.5, 4.0));
        assert_eq!(s.q1, 1.75);
        assert_eq!(report.percentile_of(3.0), Some(75.0));
        assert_eq!(report.percentile_of(0.0), Some(0.0));
    }
}
