//! Grids, snapshot sets, sensor selections and the point-sensing
//! measurement model `y = S x + n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::keyed_normal;

/// Discrete state on a grid: one value per node.
pub type Field = DVector<f64>;

/// Node coordinates in one or two spatial dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    coords: Vec<f64>,
}

impl Grid {
    /// Builds a grid from node-major coordinates (`coords[i * dim + k]`).
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(invalid(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if coords.is_empty() || coords.len() % dim != 0 {
            return Err(invalid(format!(
                "{} coordinates do not form a nonempty {dim}-d grid",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("grid coordinates"));
        }
        Ok(Self { dim, coords })
    }

    /// `n` equispaced nodes on `[0, 1]`.
    pub fn line(n: usize) -> Self {
        assert!(n >= 1, "a grid needs at least one node");
        let h = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
        Self {
            dim: 1,
            coords: (0..n).map(|i| i as f64 * h).collect(),
        }
    }

    /// `nx × ny` tensor grid on the unit square; node `iy * nx + ix`.
    pub fn rectangle(nx: usize, ny: usize) -> Self {
        assert!(nx >= 1 && ny >= 1, "a grid needs at least one node");
        let hx = if nx > 1 { 1.0 / (nx - 1) as f64 } else { 0.0 };
        let hy = if ny > 1 { 1.0 / (ny - 1) as f64 } else { 0.0 };
        let mut coords = Vec::with_capacity(2 * nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                coords.push(ix as f64 * hx);
                coords.push(iy as f64 * hy);
            }
        }
        Self { dim: 2, coords }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.coord(i)
            .iter()
            .zip(self.coord(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Length of the diagonal of the axis-aligned bounding box.
    pub fn bbox_diagonal(&self) -> f64 {
        (0..self.dim)
            .map(|k| {
                let (lo, hi) = self
                    .coords
                    .iter()
                    .skip(k)
                    .step_by(self.dim)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| {
                        (lo.min(c), hi.max(c))
                    });
                (hi - lo) * (hi - lo)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Grid whose node `i` is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let coords = perm
            .iter()
            .flat_map(|&p| self.coord(p).iter().copied())
            .collect();
        Self {
            dim: self.dim,
            coords,
        }
    }
}

/// `M` snapshots of the state on a common grid, stored as an `N × M`
/// matrix whose columns are snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    grid: Grid,
    data: DMatrix<f64>,
}

impl SnapshotSet {
    pub fn new(grid: Grid, data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: data.nrows(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("snapshot data"));
        }
        Ok(Self { grid, data })
    }

    pub fn from_columns(grid: Grid, columns: &[Field]) -> Result<Self> {
        if columns.is_empty() {
            return Err(invalid("a snapshot set needs at least one snapshot"));
        }
        let n = grid.len();
        if let Some(bad) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::LengthMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        Self::new(grid, DMatrix::from_columns(columns))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn n_nodes(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.data.ncols()
    }

    pub fn snapshot(&self, i: usize) -> Field {
        self.data.column(i).into_owned()
    }

    pub fn map_data(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        Self::new(self.grid.clone(), f(&self.data))
    }

    /// Reorders nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = DMatrix::from_fn(self.n_nodes(), self.n_snapshots(), |i, j| {
            self.data[(perm[i], j)]
        });
        Self {
            grid: self.grid.permuted(perm),
            data,
        }
    }
}

/// Ordered distinct node indices; the first `n_anchor` are immutable
/// anchors, the rest are mobile. Realizes the row selector `S`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSelection {
    indices: Vec<usize>,
    n_anchor: usize,
}

impl SensorSelection {
    pub fn new(indices: Vec<usize>, n_anchor: usize, n_nodes: usize) -> Result<Self> {
        let sel = Self { indices, n_anchor };
        sel.validate(n_nodes)?;
        Ok(sel)
    }

    /// Selection with no anchors.
    pub fn free(indices: Vec<usize>, n_nodes: usize) -> Result<Self> {
        Self::new(indices, 0, n_nodes)
    }

    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        if self.n_anchor > self.indices.len() {
            return Err(invalid(format!(
                "{} anchors exceed {} sensors",
                self.n_anchor,
                self.indices.len()
            )));
        }
        let mut seen = vec![false; n_nodes];
        for &i in &self.indices {
            if i >= n_nodes {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: n_nodes,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::DuplicateIndex(i));
            }
        }
        Ok(())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_anchor(&self) -> usize {
        self.n_anchor
    }

    pub fn anchors(&self) -> &[usize] {
        &self.indices[..self.n_anchor]
    }

    pub fn mobile(&self) -> &[usize] {
        &self.indices[self.n_anchor..]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.indices.contains(&node)
    }
}

/// Sensor layout plus the noise level of the readings and the likelihood
/// scale used by guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub selection: SensorSelection,
    pub sigma_noise: f64,
    pub sigma_eta: f64,
}

impl MeasurementModel {
    pub fn new(selection: SensorSelection, sigma_noise: f64, sigma_eta: f64) -> Result<Self> {
        if !(sigma_noise >= 0.0 && sigma_noise.is_finite()) {
            return Err(invalid("sigma_noise must be finite and >= 0"));
        }
        if !(sigma_eta > 0.0 && sigma_eta.is_finite()) {
            return Err(invalid("sigma_eta must be finite and > 0"));
        }
        Ok(Self {
            selection,
            sigma_noise,
            sigma_eta,
        })
    }

    pub fn measure(&self, x_star: &Field, noise_seed: u64) -> Result<Field> {
        measure(&self.selection, x_star, self.sigma_noise, noise_seed)
    }
}

/// Gathers `x` at the selected nodes, in selection order.
pub fn select(selection: &SensorSelection, x: &Field) -> Result<Field> {
    let idx = selection.indices();
    if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: x.len(),
        });
    }
    Ok(Field::from_iterator(idx.len(), idx.iter().map(|&i| x[i])))
}

/// Noisy point measurements `S x* + n`.
///
/// The noise at node `j` is `sigma_noise * z(seed, j)` with `z` a standard
/// normal keyed by the seed and the node index. Readings at distinct nodes
/// are independent, and a node re-read under the same seed returns the same
/// value.
pub fn measure(
    selection: &SensorSelection,
    x_star: &Field,
    sigma_noise: f64,
    noise_seed: u64,
) -> Result<Field> {
    if !(sigma_noise >= 0.0 && sigma_noise.is_finite()) {
        return Err(invalid("sigma_noise must be finite and >= 0"));
    }
    let mut y = select(selection, x_star)?;
    if sigma_noise > 0.0 {
        for (v, &node) in y.iter_mut().zip(selection.indices()) {
            *v += sigma_noise * keyed_normal(noise_seed, node as u64);
        }
    }
    Ok(y)
}

/// `‖x̂ − x*‖₂ / ‖x*‖₂`.
pub fn relative_l2(x_hat: &Field, x_star: &Field) -> Result<f64> {
    if x_hat.len() != x_star.len() {
        return Err(Error::LengthMismatch {
            expected: x_star.len(),
            got: x_hat.len(),
        });
    }
    let denom = x_star.norm();
    if denom == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((x_hat - x_star).norm() / denom)
}
