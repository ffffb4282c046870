#![allow(dead_code)]

use nalgebra::DMatrix;
use osp_core::rng::{gaussian_matrix, rng_from_seed};

/// Column pivots of Householder QR with full column-norm recomputation.
pub fn householder_pivots(a: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let (rows, cols) = a.shape();
    let mut a = a.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    for step in 0..k.min(rows).min(cols) {
        let mut best = step;
        let mut best_norm = -1.0;
        for j in step..cols {
            let s: f64 = (step..rows).map(|i| a[(i, j)] * a[(i, j)]).sum();
            if s > best_norm {
                best_norm = s;
                best = j;
            }
        }
        a.swap_columns(step, best);
        perm.swap(step, best);
        let alpha = -a[(step, step)].signum() * best_norm.sqrt();
        let mut v: Vec<f64> = (step..rows).map(|i| a[(i, step)]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        for j in step..cols {
            let dot: f64 = (step..rows).map(|i| v[i - step] * a[(i, j)]).sum();
            let f = 2.0 * dot / vv;
            for i in step..rows {
                a[(i, j)] -= f * v[i - step];
            }
        }
    }
    perm.truncate(k.min(rows).min(cols));
    perm
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(s: &DMatrix<f64>) -> Vec<f64> {
    let n = s.nrows();
    let mut a = s.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Random matrix with mean-adjusted columns (rows sum to zero).
pub fn centered_random(seed: u64, n: usize, m: usize) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let mut x = gaussian_matrix(&mut rng, n, m);
    let mean = x.column_mean();
    for mut c in x.column_iter_mut() {
        c -= &mean;
    }
    x
}
