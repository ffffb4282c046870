use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::pod::PodBasis;
use crate::error::{invalid, Result};

/// Optimality criterion applied to the information matrix `M_S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OedCriterion {
    A,
    D,
    E,
}

/// Tikhonov prior `Σ₀ = diag(λ) + εI` scaled by the noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub eps: f64,
    pub sigma_eta: f64,
}

/// Criterion value on the positive spectrum, compared lexicographically
/// after the numerical rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OedObjective {
    pub rank: usize,
    pub value: f64,
}

impl OedObjective {
    /// Strict improvement beyond a relative tolerance.
    pub fn improves_on(&self, other: &Self) -> bool {
        if self.rank != other.rank {
            return self.rank > other.rank;
        }
        self.value > other.value + 1e-12 * other.value.abs().max(1.0)
    }
}

/// Evaluates `criterion` on a symmetric PSD information matrix.
///
/// Pre-rank conventions: A uses the pseudo-inverse trace, D the
/// pseudo-determinant and E the smallest positive eigenvalue.
pub fn oed_objective(info: &DMatrix<f64>, criterion: OedCriterion) -> OedObjective {
    let eig = SymmetricEigen::new(info.clone()).eigenvalues;
    let lmax = eig.iter().copied().fold(0.0, f64::max);
    if lmax <= 0.0 {
        return OedObjective {
            rank: 0,
            value: match criterion {
                OedCriterion::A => f64::NEG_INFINITY,
                _ => 0.0,
            },
        };
    }
    let pos: Vec<f64> = eig.iter().copied().filter(|&l| l > 1e-10 * lmax).collect();
    let value = match criterion {
        OedCriterion::A => -pos.iter().map(|l| l.recip()).sum::<f64>(),
        OedCriterion::D => pos.iter().map(|l| l.ln()).sum(),
        OedCriterion::E => pos.iter().copied().fold(f64::INFINITY, f64::min),
    };
    OedObjective {
        rank: pos.len(),
        value,
    }
}

/// Prior precision term `σ_η² · Σ₀⁻¹` for the basis energies.
pub fn prior_precision(basis: &PodBasis, reg: Regularization) -> DMatrix<f64> {
    let r = basis.n_modes();
    let s2 = reg.sigma_eta * reg.sigma_eta;
    DMatrix::from_fn(r, r, |i, j| {
        if i == j {
            s2 / (basis.energies[i] + reg.eps)
        } else {
            0.0
        }
    })
}

/// Greedy forward selection of `m` nodes for an A/D/E criterion.
///
/// Returns the picks and the objective after each pick.
pub fn oed_place(
    basis: &PodBasis,
    m: usize,
    criterion: OedCriterion,
    reg: Option<Regularization>,
) -> Result<(Vec<usize>, Vec<OedObjective>)> {
    let (n, r) = basis.modes.shape();
    if m == 0 || m > n {
        return Err(invalid(format!("budget {m} outside 1..={n}")));
    }
    let mut info = match reg {
        Some(reg) => {
            if !(reg.eps > 0.0) || !(reg.sigma_eta > 0.0) {
                return Err(invalid("regularization needs eps > 0 and sigma_eta > 0"));
            }
            prior_precision(basis, reg)
        }
        None => DMatrix::zeros(r, r),
    };
    let mut selected = vec![false; n];
    let mut picks = Vec::with_capacity(m);
    let mut path = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(usize, OedObjective)> = None;
        for j in (0..n).filter(|&j| !selected[j]) {
            let v = basis.modes.row(j).transpose();
            let cand = &info + &v * v.transpose();
            let obj = oed_objective(&cand, criterion);
            if best.is_none_or(|(_, b)| obj.improves_on(&b)) {
                best = Some((j, obj));
            }
        }
        let (j, obj) = best.expect("m <= n leaves a candidate");
        let v = basis.modes.row(j).transpose();
        info += &v * v.transpose();
        selected[j] = true;
        picks.push(j);
        path.push(obj);
    }
    Ok((picks, path))
}
