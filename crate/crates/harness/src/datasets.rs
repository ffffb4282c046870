//! Synthetic snapshot generators.
//!
//! Each generator is a distribution over fields on a grid. Snapshot sets and
//! held-out ground-truth draws come from disjoint seed streams of the same
//! distribution.

use nalgebra::{DMatrix, DVector};
use osp_core::gmm::GaussianMixturePrior;
use osp_core::rng::{derive_seed, gaussian_matrix, rng_from_seed, standard_normal, SeededRng};
use osp_core::{Error, Field, Grid, Result, SnapshotSet};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Stream id for training snapshots.
pub const SNAPSHOT_STREAM: u64 = 1 << 48;
/// Stream base for ground-truth draws; draw `s` uses `TRUTH_STREAM + s`.
pub const TRUTH_STREAM: u64 = 2 << 48;
/// Stream id for the random structure of a generator (bases, mixture means).
pub const STRUCTURE_STREAM: u64 = 3 << 48;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn bounds(grid: &Grid) -> Vec<(f64, f64)> {
    (0..grid.dim())
        .map(|k| {
            (0..grid.len())
                .map(|i| grid.coord(i)[k])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c), hi.max(c)))
        })
        .collect()
}

/// `a · exp(−‖ξ − c‖² / 2w²)` evaluated on every node.
pub fn bump(grid: &Grid, center: &[f64], width: f64, amplitude: f64) -> Field {
    DVector::from_fn(grid.len(), |i, _| {
        let d2: f64 = grid
            .coord(i)
            .iter()
            .zip(center)
            .map(|(x, c)| (x - c) * (x - c))
            .sum();
        amplitude * (-d2 / (2.0 * width * width)).exp()
    })
}

/// Gaussian bumps with uniform centre over the grid's bounding box and
/// uniform amplitude.
#[derive(Debug, Clone)]
pub struct BumpManifold {
    grid: Grid,
    width: f64,
    amplitude: (f64, f64),
    bounds: Vec<(f64, f64)>,
}

impl BumpManifold {
    pub fn new(grid: Grid, width: f64, amplitude: (f64, f64)) -> Result<Self> {
        if grid.len() < 8 {
            return Err(invalid("bump manifold needs at least 8 nodes"));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(invalid("bump width must be positive"));
        }
        let (lo, hi) = amplitude;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid("amplitude range must be finite with lo <= hi"));
        }
        let bounds = bounds(&grid);
        Ok(Self {
            grid,
            width,
            amplitude,
            bounds,
        })
    }

    pub fn draw(&self, rng: &mut SeededRng) -> Field {
        let center: Vec<f64> = self
            .bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        let (lo, hi) = self.amplitude;
        let a = lo + (hi - lo) * rng.random::<f64>();
        bump(&self.grid, &center, self.width, a)
    }
}

/// Union of `d` random `k`-dimensional subspaces with standard normal
/// coefficients.
#[derive(Debug, Clone)]
pub struct UnionSubspaces {
    bases: Vec<DMatrix<f64>>,
}

impl UnionSubspaces {
    pub fn new(n: usize, d: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || k == 0 || k * d > n {
            return Err(invalid(format!("need d, k >= 1 and k*d <= N, got d={d} k={k} N={n}")));
        }
        let mut rng = rng_from_seed(derive_seed(seed, STRUCTURE_STREAM));
        let bases = (0..d)
            .map(|_| gaussian_matrix(&mut rng, n, k).qr().q())
            .collect();
        Ok(Self { bases })
    }

    pub fn bases(&self) -> &[DMatrix<f64>] {
        &self.bases
    }

    pub fn draw(&self, rng: &mut SeededRng) -> Field {
        let b = &self.bases[rng.random_range(0..self.bases.len())];
        let c = DVector::from_fn(b.ncols(), |_, _| standard_normal(rng));
        b * c
    }
}

fn collect(grid: Grid, m: usize, seed: u64, mut draw: impl FnMut(&mut SeededRng) -> Field) -> Result<SnapshotSet> {
    if m == 0 {
        return Err(invalid("need at least one snapshot"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, SNAPSHOT_STREAM));
    let cols: Vec<Field> = (0..m).map(|_| draw(&mut rng)).collect();
    SnapshotSet::from_columns(grid, &cols)
}

pub fn gen_bump_manifold(
    grid: &Grid,
    m: usize,
    width: f64,
    amplitude: (f64, f64),
    seed: u64,
) -> Result<SnapshotSet> {
    let gen = BumpManifold::new(grid.clone(), width, amplitude)?;
    collect(grid.clone(), m, seed, |rng| gen.draw(rng))
}

/// Snapshots on `Grid::line(n)`.
pub fn gen_union_subspaces(n: usize, m: usize, d: usize, k: usize, seed: u64) -> Result<SnapshotSet> {
    let gen = UnionSubspaces::new(n, d, k, seed)?;
    collect(Grid::line(n), m, seed, |rng| gen.draw(rng))
}

/// Shape of a synthetic mixture prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmParams {
    pub components: usize,
    /// Peak height of each component mean.
    pub separation: f64,
    /// Bump width of the component means.
    pub width: f64,
    /// Per-node standard deviation of every component.
    pub component_std: f64,
}

/// Mixture with equal weights whose means are bumps of height `separation`,
/// plus `m` prior samples.
pub fn gen_gmm_prior(
    grid: &Grid,
    params: GmmParams,
    m: usize,
    seed: u64,
) -> Result<(GaussianMixturePrior, SnapshotSet)> {
    let GmmParams {
        components,
        separation,
        width,
        component_std,
    } = params;
    if components == 0 {
        return Err(invalid("need at least one component"));
    }
    if !(component_std > 0.0 && component_std.is_finite()) {
        return Err(invalid("component_std must be positive"));
    }
    let shape = BumpManifold::new(grid.clone(), width, (separation, separation))?;
    let mut rng = rng_from_seed(derive_seed(seed, STRUCTURE_STREAM));
    let means: Vec<Vec<f64>> = (0..components)
        .map(|_| shape.draw(&mut rng).iter().copied().collect())
        .collect();
    let n = grid.len();
    let prior = GaussianMixturePrior::new(
        vec![1.0 / components as f64; components],
        means,
        vec![vec![component_std * component_std; n]; components],
    )?;
    let mut i = 0u64;
    let snaps = collect(grid.clone(), m, seed, |_| {
        i += 1;
        prior.sample(derive_seed(seed, SNAPSHOT_STREAM + i))
    })?;
    Ok((prior, snaps))
}
