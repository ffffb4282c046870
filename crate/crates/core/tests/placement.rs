mod common;

use common::{centered_random, householder_pivots, jacobi_eigenvalues};
use nalgebra::DMatrix;
use osp_core::placement::{
    deflation_pivots, greedy_christoffel_place, iid_christoffel_place, oed_place, pod_basis,
    random_place, OedCriterion, PlacementContext, PlacementRequest, PodBasis, RankPolicy,
    Regularization, Strategy,
};
use osp_core::rng::{gaussian_matrix, rng_from_seed};
use osp_core::{ChristoffelScore, Grid, ScoreWeighting, SnapshotSet};
use proptest::prelude::*;

fn score(scores: Vec<f64>) -> ChristoffelScore {
    ChristoffelScore {
        scores,
        n_pairs_used: 1,
        n_pairs_skipped: 0,
        exact: true,
    }
}

#[test]
fn alg1_matches_householder_pivots() {
    for case in 0..50u64 {
        let mut rng = rng_from_seed(1000 + case);
        let n = 8 + (rand::Rng::random_range(&mut rng, 0..57usize));
        let m = 2 + (rand::Rng::random_range(&mut rng, 0..31usize));
        let x = centered_random(case, n, m);
        let rank = n.min(m - 1);
        let ours = greedy_christoffel_place(&x, rank, None).unwrap().0;
        let reference = householder_pivots(&x.transpose(), rank);
        assert_eq!(ours, reference, "case {case}: N={n} M={m}");
    }
}

#[test]
fn pod_energies_match_jacobi_oracle() {
    let mut rng = rng_from_seed(21);
    let data = gaussian_matrix(&mut rng, 6, 4);
    let snaps = SnapshotSet::new(Grid::line(6), data).unwrap();
    let basis = pod_basis(&snaps, 3, RankPolicy::Clip).unwrap();
    let x = osp_core::placement::mean_adjust(&snaps).unwrap().0;
    let ev = jacobi_eigenvalues(&(&x * x.transpose()));
    for (e, o) in basis.energies.iter().zip(&ev) {
        assert!((e - o).abs() < 1e-10 * ev[0], "{e} vs {o}");
    }
    // four centered snapshots span at most three directions
    assert!(ev[3].abs() < 1e-10 * ev[0]);
}

#[test]
fn sspor_matches_pivoted_qr_on_modes() {
    for seed in 0..10 {
        let mut rng = rng_from_seed(seed);
        let snaps = SnapshotSet::new(Grid::line(30), gaussian_matrix(&mut rng, 30, 12)).unwrap();
        let ctx = PlacementContext::new(&snaps);
        let mut req = PlacementRequest::new(Strategy::Sspor, 6, 0);
        req.pod_modes = Some(8);
        let ours = ctx.place(&req).unwrap().selection.indices().to_vec();
        let basis = ctx.pod(8, RankPolicy::Keep).unwrap();
        assert_eq!(ours, householder_pivots(&basis.modes.transpose(), 6));
    }
}

fn d_value(v: &DMatrix<f64>, set: &[usize]) -> f64 {
    let rows: Vec<_> = set.iter().map(|&j| v.row(j).into_owned()).collect();
    let vs = DMatrix::from_rows(&rows);
    (vs.transpose() * vs).determinant()
}

#[test]
fn greedy_d_opt_matches_subset_search() {
    let modes = DMatrix::from_row_slice(
        4,
        2,
        &[0.9, 0.1, 0.3, 0.3, 0.1, -0.8, 0.2, 0.5],
    );
    let q = modes.clone().qr().q();
    let basis = PodBasis {
        modes: q.clone(),
        energies: vec![2.0, 1.0],
        numerical_rank: 2,
        requested: 2,
    };
    let (mut picks, _) = oed_place(&basis, 2, OedCriterion::D, None).unwrap();
    picks.sort_unstable();
    let mut best = (f64::NEG_INFINITY, vec![]);
    for a in 0..4 {
        for b in a + 1..4 {
            let d = d_value(&q, &[a, b]);
            if d > best.0 {
                best = (d, vec![a, b]);
            }
        }
    }
    assert_eq!(picks, best.1);
}

#[test]
fn iid_point_mass_and_constant() {
    let s = score(vec![1.0, 0.0, 0.0, 0.0]);
    for seed in 0..20 {
        let sel = iid_christoffel_place(&s, 1, ScoreWeighting::Raw, false, seed).unwrap();
        assert_eq!(sel.indices(), &[0]);
    }
    let flat = score(vec![0.4; 5]);
    let mut counts = [0usize; 5];
    let trials = 20_000;
    for seed in 0..trials {
        let sel = iid_christoffel_place(&flat, 1, ScoreWeighting::MuStar, false, seed).unwrap();
        counts[sel.indices()[0]] += 1;
    }
    let p = 0.2;
    let tol = 3.0 * (p * (1.0 - p) / trials as f64).sqrt();
    for c in counts {
        assert!((c as f64 / trials as f64 - p).abs() < tol);
    }
}

#[test]
fn iid_mu_star_two_nodes() {
    let s = score(vec![1.0, 0.0]);
    let trials = 100_000u64;
    let hits = (0..trials)
        .filter(|&seed| {
            iid_christoffel_place(&s, 1, ScoreWeighting::MuStar, false, seed)
                .unwrap()
                .indices()[0]
                == 0
        })
        .count();
    let p = 0.75;
    let tol = 3.0 * (p * (1.0 - p) / trials as f64).sqrt();
    assert!((hits as f64 / trials as f64 - p).abs() < tol);
}

#[test]
fn random_place_is_uniform() {
    let trials = 10_000u64;
    let mut counts = [0usize; 10];
    for seed in 0..trials {
        counts[random_place(10, 1, seed).unwrap().indices()[0]] += 1;
    }
    let p = 0.1;
    let tol = 3.0 * (p * (1.0 - p) / trials as f64).sqrt();
    for c in counts {
        assert!((c as f64 / trials as f64 - p).abs() < tol, "{counts:?}");
    }
}

#[test]
fn with_replacement_collapses_duplicates() {
    let s = score(vec![1.0, 0.0, 0.0]);
    let sel = iid_christoffel_place(&s, 3, ScoreWeighting::Raw, true, 4).unwrap();
    assert_eq!(sel.indices(), &[0]);
}

#[test]
fn rank_deficient_basis_flagged() {
    let mut rng = rng_from_seed(5);
    let low = gaussian_matrix(&mut rng, 20, 2) * gaussian_matrix(&mut rng, 2, 15);
    let snaps = SnapshotSet::new(Grid::line(20), low).unwrap();
    let ctx = PlacementContext::new(&snaps);
    let p = ctx.place(&PlacementRequest::new(Strategy::DOpt, 6, 0)).unwrap();
    assert!(p.rank_warning);
    assert_eq!(p.selection.len(), 6);
    let g = ctx
        .place(&PlacementRequest::new(Strategy::ChristoffelGreedy, 6, 0))
        .unwrap();
    assert_eq!(g.fallback_picks, 4);
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    let mut p: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alg1_distinct_and_deterministic(seed in 0u64..10_000, n in 4usize..40, m in 2usize..20) {
        let x = centered_random(seed, n, m);
        let k = n.min(6);
        let a = greedy_christoffel_place(&x, k, Some(seed)).unwrap();
        let b = greedy_christoffel_place(&x, k, Some(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        let mut sorted = a.0.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
    }

    #[test]
    fn deterministic_strategies_are_permutation_equivariant(seed in 0u64..10_000) {
        let (n, m) = (18, 9);
        let mut rng = rng_from_seed(seed);
        let data = gaussian_matrix(&mut rng, n, m);
        let snaps = SnapshotSet::new(Grid::line(n), data).unwrap();
        // perm[new] = old
        let perm = permutation(n, seed ^ 0xABCD);
        let permuted = snaps.permuted(&perm);
        let (c0, c1) = (PlacementContext::new(&snaps), PlacementContext::new(&permuted));
        for st in Strategy::ALL.into_iter().filter(|s| s.is_deterministic()) {
            let req = PlacementRequest::new(st, 5, 0);
            let a = c0.place(&req).unwrap().selection;
            let b = c1.place(&req).unwrap().selection;
            let mapped: Vec<usize> = b.indices().iter().map(|&j| perm[j]).collect();
            prop_assert_eq!(a.indices(), mapped.as_slice(), "{}", st);
        }
    }

    #[test]
    fn oed_path_is_monotone(seed in 0u64..10_000, r in 1usize..6, reg in any::<bool>()) {
        let mut rng = rng_from_seed(seed);
        let n = 16;
        let q = gaussian_matrix(&mut rng, n, r).qr().q();
        let basis = PodBasis {
            modes: q,
            energies: (0..r).map(|i| 1.0 / (i + 1) as f64).collect(),
            numerical_rank: r,
            requested: r,
        };
        let reg = reg.then_some(Regularization { eps: 1e-4, sigma_eta: 0.1 });
        for c in [OedCriterion::A, OedCriterion::D, OedCriterion::E] {
            let (_, path) = oed_place(&basis, 8, c, reg).unwrap();
            for w in path.windows(2) {
                prop_assert!(
                    w[1].rank > w[0].rank
                        || (w[1].rank == w[0].rank && w[1].value >= w[0].value - 1e-9 * w[0].value.abs().max(1.0)),
                    "{:?}: {:?} -> {:?}", c, w[0], w[1]
                );
            }
        }
    }

    #[test]
    fn deflation_never_repeats(seed in 0u64..10_000) {
        let x = centered_random(seed, 12, 4);
        let piv = deflation_pivots(&x, 12);
        prop_assert!(piv.exhausted);
        prop_assert_eq!(piv.picks.len(), 3);
    }
}
