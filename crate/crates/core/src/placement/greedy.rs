use nalgebra::DMatrix;
use rand::seq::index::sample;

use super::pod::PodBasis;
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Residual below this fraction of the initial maximum counts as exhausted.
pub const EXHAUSTION_TOL: f64 = 1e-12;

/// Outcome of a pivoting pass: picks made by the pivot rule, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pivots {
    pub picks: Vec<usize>,
    /// True when the residual ran out before `m` picks.
    pub exhausted: bool,
}

/// Greedy Gram–Schmidt deflation over the rows of `rows`.
///
/// Repeatedly picks the unselected row with the largest squared residual
/// norm (lowest index on ties), normalizes it and removes its direction
/// from every row. Stops after `m` picks or once the largest unselected
/// residual falls below `EXHAUSTION_TOL` times the initial largest.
pub fn deflation_pivots(rows: &DMatrix<f64>, m: usize) -> Pivots {
    let n = rows.nrows();
    let mut r = rows.clone();
    let mut selected = vec![false; n];
    let mut picks = Vec::with_capacity(m.min(n));
    let mut init_max = None;
    while picks.len() < m.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !selected[i]) {
            let s = r.row(i).norm_squared();
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let Some((p, s)) = best else { break };
        let init = *init_max.get_or_insert(s);
        if s <= 0.0 || s < EXHAUSTION_TOL * init {
            return Pivots {
                picks,
                exhausted: true,
            };
        }
        selected[p] = true;
        picks.push(p);
        let q = r.row(p).transpose() / s.sqrt();
        let coef = &r * &q;
        r.ger(-1.0, &coef, &q, 1.0);
    }
    Pivots {
        picks,
        exhausted: false,
    }
}

/// How picks beyond the pivot rule's reach are filled.
#[derive(Debug, Clone, Copy)]
pub enum Fill<'a> {
    /// Uniform over unselected nodes, drawn from this seed.
    Seeded(u64),
    /// Unselected nodes in increasing index order.
    LowestIndex,
    /// Unselected nodes by decreasing squared row norm of this matrix.
    RowNorms(&'a DMatrix<f64>),
}

/// Completes `picks` to `m` entries; returns the number of filled picks.
pub fn fill_picks(picks: &mut Vec<usize>, n: usize, m: usize, fill: Fill<'_>) -> Result<usize> {
    if m > n {
        return Err(invalid(format!("budget {m} exceeds {n} nodes")));
    }
    let need = m.saturating_sub(picks.len());
    if need == 0 {
        return Ok(0);
    }
    let mut selected = vec![false; n];
    for &p in picks.iter() {
        selected[p] = true;
    }
    let mut rest: Vec<usize> = (0..n).filter(|&j| !selected[j]).collect();
    match fill {
        Fill::LowestIndex => picks.extend_from_slice(&rest[..need]),
        Fill::Seeded(seed) => {
            let mut rng = rng_from_seed(derive_seed(seed, 0xF111));
            let chosen = sample(&mut rng, rest.len(), need);
            picks.extend(chosen.iter().map(|k| rest[k]));
        }
        Fill::RowNorms(x) => {
            let norms: Vec<f64> = (0..n).map(|j| x.row(j).norm_squared()).collect();
            rest.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
            picks.extend_from_slice(&rest[..need]);
        }
    }
    Ok(need)
}

/// Greedy Christoffel placement on the mean-adjusted snapshot matrix `x` (`N × M`).
///
/// Returns the pick order and the number of fallback picks made after rank
/// exhaustion (uniform with `fallback_seed`, else lowest index).
pub fn greedy_christoffel_place(
    x: &DMatrix<f64>,
    m: usize,
    fallback_seed: Option<u64>,
) -> Result<(Vec<usize>, usize)> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(invalid(format!("budget {m} outside 1..={n}")));
    }
    let mut picks = deflation_pivots(x, m).picks;
    let fill = fallback_seed.map_or(Fill::LowestIndex, Fill::Seeded);
    let filled = fill_picks(&mut picks, n, m, fill)?;
    Ok((picks, filled))
}

/// Pivoted QR on `Vᵀ`, i.e. deflation over the rows of the mode matrix.
/// Picks past the basis rank come from `fill`.
pub fn sspor_place(basis: &PodBasis, m: usize, fill: Fill<'_>) -> Result<(Vec<usize>, usize)> {
    let n = basis.modes.nrows();
    if m == 0 || m > n {
        return Err(invalid(format!("budget {m} outside 1..={n}")));
    }
    let mut picks = deflation_pivots(&basis.modes, m).picks;
    let filled = fill_picks(&mut picks, n, m, fill)?;
    Ok((picks, filled))
}
