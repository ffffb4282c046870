//! Empirical Christoffel scores, the Christoffel sampling measure, and
//! weighted index sampling.
//!
//! For a finite family of states the score of node `j` is the largest
//! squared `j`-th coordinate over all normalized secants
//! `(x_a − x_b) / ‖x_a − x_b‖`. Offline the family is a snapshot set,
//! online it is the live ensemble of Tweedie estimates.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Field, SnapshotSet};
use crate::rng::{rng_from_seed, SeededRng};

pub const DEFAULT_PAIR_CAP: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChristoffelScore {
    pub scores: Vec<f64>,
    /// Secants that entered the maximum.
    pub n_pairs_used: usize,
    /// Zero-norm secants (duplicate states) that were skipped.
    pub n_pairs_skipped: usize,
    /// True iff every unordered pair was evaluated.
    pub exact: bool,
}

impl ChristoffelScore {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

/// Running per-node maximum over a batch of secants.
struct SecantMax {
    scores: Vec<f64>,
    used: usize,
    skipped: usize,
}

impl SecantMax {
    fn new(n: usize) -> Self {
        Self {
            scores: vec![0.0; n],
            used: 0,
            skipped: 0,
        }
    }

    fn push(&mut self, a: &[f64], b: &[f64], diff: &mut [f64]) {
        let mut norm2 = 0.0;
        for ((d, x), y) in diff.iter_mut().zip(a).zip(b) {
            *d = x - y;
            norm2 += *d * *d;
        }
        if !(norm2 > 0.0) || !norm2.is_finite() {
            self.skipped += 1;
            return;
        }
        self.used += 1;
        let inv = 1.0 / norm2;
        for (s, d) in self.scores.iter_mut().zip(diff.iter()) {
            // d² ≤ norm2 exactly in floating point, the clamp only guards inv rounding
            let v = (d * d * inv).min(1.0);
            if v > *s {
                *s = v;
            }
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (s, o) in self.scores.iter_mut().zip(other.scores) {
            if o > *s {
                *s = o;
            }
        }
        self.used += other.used;
        self.skipped += other.skipped;
        self
    }
}

fn secant_scores(columns: &[&[f64]], pairs: &[(u32, u32)]) -> SecantMax {
    let n = columns[0].len();
    // Max is exact, so the chunked reduction is independent of thread count.
    pairs
        .par_chunks(2048)
        .map(|chunk| {
            let mut acc = SecantMax::new(n);
            let mut diff = vec![0.0; n];
            for &(a, b) in chunk {
                acc.push(columns[a as usize], columns[b as usize], &mut diff);
            }
            acc
        })
        .reduce(|| SecantMax::new(n), SecantMax::merge)
}

fn all_pairs(count: usize) -> Vec<(u32, u32)> {
    let mut pairs = Vec::with_capacity(count * count.saturating_sub(1) / 2);
    for a in 0..count as u32 {
        for b in a + 1..count as u32 {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Maps a sorted list of linear pair ids (row-major over `a < b`) to pairs.
fn decode_pairs(count: usize, sorted_ids: &[usize]) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(sorted_ids.len());
    let mut a = 0usize;
    let mut row_start = 0usize;
    let mut row_len = count - 1;
    for &k in sorted_ids {
        while k >= row_start + row_len {
            row_start += row_len;
            a += 1;
            row_len -= 1;
        }
        out.push((a as u32, (a + 1 + k - row_start) as u32));
    }
    out
}

/// Empirical Christoffel score of a snapshot set.
///
/// All `M(M−1)/2` unordered pairs are used when that count is at most
/// `pair_cap`; otherwise `pair_cap` distinct pairs are drawn uniformly with
/// the seeded generator and the result is flagged inexact (a lower bound of
/// the exact score).
pub fn empirical_christoffel(
    snapshots: &SnapshotSet,
    pair_cap: usize,
    seed: u64,
) -> Result<ChristoffelScore> {
    let m = snapshots.n_snapshots();
    if m < 2 {
        return Err(invalid("empirical Christoffel score needs at least 2 snapshots"));
    }
    if pair_cap == 0 {
        return Err(invalid("pair_cap must be >= 1"));
    }
    if m > u32::MAX as usize {
        return Err(invalid("too many snapshots"));
    }
    let total = m * (m - 1) / 2;
    let exact = total <= pair_cap;
    let pairs = if exact {
        all_pairs(m)
    } else {
        let mut rng = rng_from_seed(seed);
        let mut ids = rand::seq::index::sample(&mut rng, total, pair_cap).into_vec();
        ids.sort_unstable();
        decode_pairs(m, &ids)
    };
    let columns: Vec<&[f64]> = snapshots
        .data()
        .as_slice()
        .chunks_exact(snapshots.n_nodes())
        .collect();
    let acc = secant_scores(&columns, &pairs);
    if acc.used == 0 {
        return Err(Error::DegenerateData);
    }
    Ok(ChristoffelScore {
        scores: acc.scores,
        n_pairs_used: acc.used,
        n_pairs_skipped: acc.skipped,
        exact,
    })
}

fn check_ensemble(estimates: &[Field]) -> Result<usize> {
    if estimates.len() < 2 {
        return Err(invalid("ensemble scoring needs at least 2 estimates"));
    }
    let n = estimates[0].len();
    if let Some(bad) = estimates.iter().find(|e| e.len() != n) {
        return Err(Error::LengthMismatch {
            expected: n,
            got: bad.len(),
        });
    }
    Ok(n)
}

/// Exact Christoffel score over all pairs of an ensemble of estimates.
pub fn ensemble_christoffel(estimates: &[Field]) -> Result<ChristoffelScore> {
    check_ensemble(estimates)?;
    let columns: Vec<&[f64]> = estimates.iter().map(|e| e.as_slice()).collect();
    let acc = secant_scores(&columns, &all_pairs(estimates.len()));
    if acc.used == 0 {
        return Err(Error::DegenerateEnsemble);
    }
    Ok(ChristoffelScore {
        scores: acc.scores,
        n_pairs_used: acc.used,
        n_pairs_skipped: acc.skipped,
        exact: true,
    })
}

/// Per-node sample standard deviation (divisor `K − 1`) across an ensemble.
pub fn ensemble_std_score(estimates: &[Field]) -> Result<Vec<f64>> {
    let n = check_ensemble(estimates)?;
    let k = estimates.len() as f64;
    Ok((0..n)
        .map(|j| {
            let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / k;
            let ss = estimates
                .iter()
                .map(|e| (e[j] - mean) * (e[j] - mean))
                .sum::<f64>();
            (ss / (k - 1.0)).sqrt()
        })
        .collect())
}

/// Node probabilities `μ*(j) = (K(j) / 2C + 1/2) / N` with uniform base
/// measure `ρ_j = 1/N` and `C = Σ_j K(j) / N`. The mixture with the base
/// measure keeps every density ratio `N·μ*(j)` at least 1/2, i.e. the
/// importance weight `w = 1 / (N·μ*)` never exceeds 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingMeasure {
    pub probs: Vec<f64>,
    pub c_constant: f64,
}

impl SamplingMeasure {
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(invalid("empty score vector"));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(invalid("scores must be finite and nonnegative"));
        }
        let n = scores.len() as f64;
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateScore);
        }
        let c = total / n;
        let mut probs: Vec<f64> = scores
            .iter()
            .map(|k| (k / (2.0 * c) + 0.5) / n)
            .collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(Self {
            probs,
            c_constant: c,
        })
    }
}

pub fn christoffel_sampling_measure(score: &ChristoffelScore) -> Result<SamplingMeasure> {
    SamplingMeasure::from_scores(&score.scores)
}

/// How a score vector becomes sampling weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreWeighting {
    /// Mixture with the uniform measure (`μ*`).
    #[default]
    MuStar,
    /// Proportional to the raw score.
    Raw,
}

impl ScoreWeighting {
    /// Sampling weights for `scores`. An all-zero score yields zero weights,
    /// which [`weighted_sample`] treats as uniform.
    pub fn weights(self, scores: &[f64]) -> Result<Vec<f64>> {
        match self {
            ScoreWeighting::Raw => Ok(scores.to_vec()),
            ScoreWeighting::MuStar => match SamplingMeasure::from_scores(scores) {
                Ok(m) => Ok(m.probs),
                Err(Error::DegenerateScore) => Ok(vec![0.0; scores.len()]),
                Err(e) => Err(e),
            },
        }
    }
}

/// Draws `m` node indices with probabilities proportional to `weights`.
///
/// With replacement the draws are i.i.d. Without replacement they are
/// sequential, removing each drawn index; once the positive-weight support
/// is exhausted the remaining draws are uniform over the zero-weight nodes.
/// All-zero weights mean uniform sampling.
pub fn weighted_sample(
    weights: &[f64],
    m: usize,
    replacement: bool,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = rng_from_seed(seed);
    if replacement {
        sample_with_replacement(weights, m, &mut rng)
    } else {
        sample_without_replacement(weights, m, &vec![false; weights.len()], &mut rng)
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(invalid("empty weight vector"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(invalid("weights must be finite and nonnegative"));
    }
    Ok(())
}

fn sample_with_replacement(weights: &[f64], m: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    check_weights(weights)?;
    if weights.iter().all(|&w| w == 0.0) {
        return Ok((0..m).map(|_| rng.random_range(0..weights.len())).collect());
    }
    let dist = WeightedIndex::new(weights).map_err(|e| invalid(e.to_string()))?;
    Ok((0..m).map(|_| dist.sample(rng)).collect())
}

/// Sequential weighted draws without replacement over nodes not marked in
/// `excluded`.
pub(crate) fn sample_without_replacement(
    weights: &[f64],
    m: usize,
    excluded: &[bool],
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    check_weights(weights)?;
    let mut available: Vec<usize> = (0..weights.len()).filter(|&j| !excluded[j]).collect();
    if m > available.len() {
        return Err(invalid(format!(
            "cannot draw {m} distinct nodes from {} available",
            available.len()
        )));
    }
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = available.iter().map(|&j| weights[j]).sum();
        let pos = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = None;
            let mut last_positive = 0;
            for (p, &j) in available.iter().enumerate() {
                if weights[j] > 0.0 {
                    cum += weights[j];
                    last_positive = p;
                    if u < cum {
                        pick = Some(p);
                        break;
                    }
                }
            }
            pick.unwrap_or(last_positive)
        } else {
            rng.random_range(0..available.len())
        };
        out.push(available.remove(pos));
    }
    Ok(out)
}
