use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mean_adjust;
use crate::error::{invalid, Error, Result};
use crate::grid::SnapshotSet;

/// What to do when more modes are requested than the data's numerical rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    /// Keep all requested modes. Modes past the numerical rank complete the
    /// orthonormal basis and carry (near-)zero energy.
    #[default]
    Keep,
    /// Truncate to the numerical rank.
    Clip,
}

/// Orthonormal POD modes of the mean-adjusted snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// `N × r`, orthonormal columns.
    pub modes: DMatrix<f64>,
    /// Squared singular values, nonincreasing.
    pub energies: Vec<f64>,
    pub numerical_rank: usize,
    pub requested: usize,
}

impl PodBasis {
    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }

    /// Set when the request exceeded the numerical rank, whether the extra
    /// modes were kept or clipped.
    pub fn rank_warning(&self) -> bool {
        self.requested > self.numerical_rank
    }

    /// Keeps only the first `r` modes.
    pub fn truncated(&self, r: usize) -> Self {
        let r = r.min(self.n_modes());
        Self {
            modes: self.modes.columns(0, r).into_owned(),
            energies: self.energies[..r].to_vec(),
            numerical_rank: self.numerical_rank.min(r),
            requested: r,
        }
    }
}

/// Top-`r` left singular vectors of the mean-adjusted snapshot matrix.
pub fn pod_basis(snapshots: &SnapshotSet, r: usize, policy: RankPolicy) -> Result<PodBasis> {
    let (n, m) = (snapshots.n_nodes(), snapshots.n_snapshots());
    if m < 2 {
        return Err(invalid("POD needs at least 2 snapshots"));
    }
    if r == 0 || r > n.min(m) {
        return Err(invalid(format!("POD rank {r} outside 1..={}", n.min(m))));
    }
    let (x, _) = mean_adjust(snapshots)?;
    let svd = x.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let s_max = sv[order[0]];
    if s_max <= 0.0 {
        return Err(Error::DegenerateData);
    }
    let tol = n.max(m) as f64 * f64::EPSILON * s_max;
    let numerical_rank = order.iter().filter(|&&i| sv[i] > tol).count();

    let keep = match policy {
        RankPolicy::Keep => r,
        RankPolicy::Clip => r.min(numerical_rank),
    };
    let mut modes = DMatrix::zeros(n, keep);
    let mut energies = Vec::with_capacity(keep);
    for (c, &i) in order.iter().take(keep).enumerate() {
        modes.set_column(c, &u.column(i));
        energies.push(if c < numerical_rank { sv[i] * sv[i] } else { 0.0 });
    }
    // Singular vectors of zero singular values are not reliably orthogonal
    // to the rest; rebuild that part of the basis explicitly.
    if keep > numerical_rank {
        complete_orthonormal(&mut modes, numerical_rank);
    }
    for c in 0..keep {
        fix_sign(&mut modes, c);
    }
    Ok(PodBasis {
        modes,
        energies,
        numerical_rank,
        requested: r,
    })
}

/// Replaces columns `start..` with an orthonormal completion of the first
/// `start` columns: canonical vectors in index order, two-pass Gram–Schmidt.
/// The null-space singular vectors are not used because they are set by
/// rounding and differ between platforms.
fn complete_orthonormal(q: &mut DMatrix<f64>, start: usize) {
    let n = q.nrows();
    let mut candidates = (0..n).map(|j| {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        e
    });
    let mut c = start;
    while c < q.ncols() {
        let Some(mut v) = candidates.next() else {
            unreachable!("canonical vectors always complete the basis")
        };
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for k in 0..c {
                let qk = q.column(k);
                let d = qk.dot(&v);
                v.axpy(-d, &qk, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-6 * norm0 {
            q.set_column(c, &(v / norm));
            c += 1;
        }
    }
}

/// Makes the largest-magnitude entry of column `c` positive (lowest index on ties).
fn fix_sign(q: &mut DMatrix<f64>, c: usize) {
    let col = q.column(c);
    let mut best = 0;
    for j in 1..col.len() {
        if col[j].abs() > col[best].abs() {
            best = j;
        }
    }
    if col[best] < 0.0 {
        q.column_mut(c).neg_mut();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::rng::{gaussian_matrix, rng_from_seed};

    fn orthonormality_error(v: &DMatrix<f64>) -> f64 {
        let g = v.transpose() * v;
        (g - DMatrix::identity(v.ncols(), v.ncols())).amax()
    }

    #[test]
    fn rank_one_mode() {
        // snapshots ±c around zero: mean-adjusted matrix has the single direction c
        let c = DVector::from_column_slice(&[3.0, 0.0, -4.0]);
        let data = DMatrix::from_columns(&[c.clone(), -c.clone()]);
        let snaps = SnapshotSet::new(Grid::line(3), data).unwrap();
        let basis = pod_basis(&snaps, 1, RankPolicy::Clip).unwrap();
        let expected = &c / c.norm();
        let mode = basis.modes.column(0);
        assert!((mode - &expected).amax() < 1e-12 || (mode + &expected).amax() < 1e-12);
        assert_eq!(basis.numerical_rank, 1);
        assert!((basis.energies[0] - 50.0).abs() < 1e-10);
    }

    #[test]
    fn orthonormal_and_sorted() {
        let mut rng = rng_from_seed(1);
        let snaps = SnapshotSet::new(Grid::line(20), gaussian_matrix(&mut rng, 20, 12)).unwrap();
        let basis = pod_basis(&snaps, 8, RankPolicy::Keep).unwrap();
        assert!(orthonormality_error(&basis.modes) < 1e-10);
        assert!(basis.energies.windows(2).all(|w| w[0] >= w[1]));
        assert!(!basis.rank_warning());
    }

    #[test]
    fn rank_deficient_keep_and_clip() {
        let mut rng = rng_from_seed(2);
        let low = gaussian_matrix(&mut rng, 16, 2) * gaussian_matrix(&mut rng, 2, 10);
        let snaps = SnapshotSet::new(Grid::line(16), low).unwrap();
        let kept = pod_basis(&snaps, 6, RankPolicy::Keep).unwrap();
        assert_eq!(kept.n_modes(), 6);
        assert_eq!(kept.numerical_rank, 2);
        assert!(kept.rank_warning());
        assert!(orthonormality_error(&kept.modes) < 1e-10);
        assert!(kept.energies[2..].iter().all(|&e| e == 0.0));

        let clipped = pod_basis(&snaps, 6, RankPolicy::Clip).unwrap();
        assert_eq!(clipped.n_modes(), 2);
        assert!(clipped.rank_warning());
        assert!((&clipped.modes - kept.modes.columns(0, 2)).amax() < 1e-12);
    }

    #[test]
    fn completion_uses_canonical_vectors() {
        let mut rng = rng_from_seed(3);
        let mut low = DMatrix::zeros(8, 6);
        low.rows_mut(4, 4)
            .copy_from(&(gaussian_matrix(&mut rng, 4, 1) * gaussian_matrix(&mut rng, 1, 6)));
        let snaps = SnapshotSet::new(Grid::line(8), low).unwrap();
        let b = pod_basis(&snaps, 3, RankPolicy::Keep).unwrap();
        assert_eq!(b.numerical_rank, 1);
        assert!((b.modes[(0, 1)] - 1.0).abs() < 1e-12);
        assert!((b.modes[(1, 2)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rank() {
        let snaps = SnapshotSet::new(Grid::line(4), DMatrix::from_element(4, 3, 1.0)).unwrap();
        assert!(pod_basis(&snaps, 4, RankPolicy::Keep).is_err());
        assert!(matches!(
            pod_basis(&snaps, 2, RankPolicy::Keep),
            Err(Error::DegenerateData)
        ));
    }
}
