//! Offline sensor placement strategies.
//!
//! Every strategy maps a snapshot set and a budget `m` to an ordered
//! [`SensorSelection`]. Deterministic strategies ignore the seed except
//! for fallback picks.

mod greedy;
mod oed;
mod pod;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use greedy::{
    deflation_pivots, fill_picks, greedy_christoffel_place, sspor_place, Fill, Pivots,
    EXHAUSTION_TOL,
};
pub use oed::{oed_objective, oed_place, prior_precision, OedCriterion, OedObjective, Regularization};
pub use pod::{pod_basis, PodBasis, RankPolicy};

use crate::christoffel::{
    empirical_christoffel, ensemble_std_score, weighted_sample, ChristoffelScore, ScoreWeighting,
    DEFAULT_PAIR_CAP,
};
use crate::error::{invalid, Error, Result};
use crate::grid::{Field, SensorSelection, SnapshotSet};

/// Subtracts the snapshot mean from every column.
pub fn mean_adjust(snapshots: &SnapshotSet) -> Result<(DMatrix<f64>, Field)> {
    let m = snapshots.n_snapshots();
    if m < 2 {
        return Err(invalid("mean adjustment needs at least 2 snapshots"));
    }
    let data = snapshots.data();
    let mean = data.column_mean();
    let mut x = data.clone();
    for mut col in x.column_iter_mut() {
        col -= &mean;
    }
    Ok((x, mean))
}

/// `m` distinct nodes drawn uniformly without replacement.
pub fn random_place(n: usize, m: usize, seed: u64) -> Result<SensorSelection> {
    if m > n {
        return Err(invalid(format!("budget {m} exceeds {n} nodes")));
    }
    SensorSelection::free(weighted_sample(&vec![1.0; n], m, false, seed)?, n)
}

/// Draws `m` nodes from the Christoffel score. With replacement, repeated
/// draws are collapsed so the selection may hold fewer than `m` nodes.
pub fn iid_christoffel_place(
    score: &ChristoffelScore,
    m: usize,
    weighting: ScoreWeighting,
    replacement: bool,
    seed: u64,
) -> Result<SensorSelection> {
    let n = score.len();
    if m > n {
        return Err(invalid(format!("budget {m} exceeds {n} nodes")));
    }
    let weights = weighting.weights(&score.scores)?;
    let mut picks = weighted_sample(&weights, m, replacement, seed)?;
    if replacement {
        let mut seen = vec![false; n];
        picks.retain(|&j| !std::mem::replace(&mut seen[j], true));
    }
    SensorSelection::free(picks, n)
}

/// Placement strategy roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    ChristoffelIid,
    ChristoffelGreedy,
    Sspor,
    AOpt,
    DOpt,
    EOpt,
    DOptReg,
    EOptReg,
    EnsembleStd,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::Random,
        Strategy::ChristoffelIid,
        Strategy::ChristoffelGreedy,
        Strategy::Sspor,
        Strategy::AOpt,
        Strategy::DOpt,
        Strategy::EOpt,
        Strategy::DOptReg,
        Strategy::EOptReg,
        Strategy::EnsembleStd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::ChristoffelIid => "christoffel_iid",
            Strategy::ChristoffelGreedy => "christoffel_greedy",
            Strategy::Sspor => "sspor",
            Strategy::AOpt => "a_opt",
            Strategy::DOpt => "d_opt",
            Strategy::EOpt => "e_opt",
            Strategy::DOptReg => "d_opt_reg",
            Strategy::EOptReg => "e_opt_reg",
            Strategy::EnsembleStd => "ensemble_std",
        }
    }

    pub fn is_regularized(self) -> bool {
        matches!(self, Strategy::DOptReg | Strategy::EOptReg)
    }

    /// True when the output does not depend on the seed (barring fallbacks).
    pub fn is_deterministic(self) -> bool {
        !matches!(
            self,
            Strategy::Random | Strategy::ChristoffelIid | Strategy::EnsembleStd
        )
    }

    pub fn uses_pod(self) -> bool {
        matches!(
            self,
            Strategy::Sspor
                | Strategy::AOpt
                | Strategy::DOpt
                | Strategy::EOpt
                | Strategy::DOptReg
                | Strategy::EOptReg
        )
    }

    fn criterion(self) -> Option<OedCriterion> {
        match self {
            Strategy::AOpt => Some(OedCriterion::A),
            Strategy::DOpt | Strategy::DOptReg => Some(OedCriterion::D),
            Strategy::EOpt | Strategy::EOptReg => Some(OedCriterion::E),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid(format!("unknown strategy `{s}`")))
    }
}

/// One placement job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRequest {
    pub strategy: Strategy,
    pub m: usize,
    pub seed: u64,
    /// Tikhonov `ε` of the regularized OED prior.
    pub eps_reg: f64,
    /// Noise scale in the regularized information matrix.
    pub sigma_eta: f64,
    /// POD modes for basis strategies; `None` means `m`.
    pub pod_modes: Option<usize>,
    pub rank_policy: RankPolicy,
    pub weighting: ScoreWeighting,
    pub replacement: bool,
}

impl PlacementRequest {
    pub fn new(strategy: Strategy, m: usize, seed: u64) -> Self {
        Self {
            strategy,
            m,
            seed,
            eps_reg: 1e-4,
            sigma_eta: 0.1,
            pod_modes: None,
            rank_policy: RankPolicy::Keep,
            weighting: ScoreWeighting::MuStar,
            replacement: false,
        }
    }

    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        if self.m == 0 || self.m > n_nodes {
            return Err(invalid(format!("budget {} outside 1..={n_nodes}", self.m)));
        }
        if self.strategy.is_regularized() && !(self.eps_reg > 0.0) {
            return Err(invalid("eps_reg must be positive"));
        }
        if !(self.sigma_eta > 0.0) {
            return Err(invalid("sigma_eta must be positive"));
        }
        if self.pod_modes == Some(0) {
            return Err(invalid("pod_modes must be positive"));
        }
        Ok(())
    }
}

/// A selection plus diagnostics about how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub selection: SensorSelection,
    /// Picks made by a fallback rule after rank exhaustion.
    pub fallback_picks: usize,
    /// The POD basis request exceeded the data's numerical rank.
    pub rank_warning: bool,
}

/// Snapshot-derived quantities shared by many placement requests.
/// Each is computed once on first use; safe to share across threads.
pub struct PlacementContext<'a> {
    snapshots: &'a SnapshotSet,
    pair_cap: usize,
    score_seed: u64,
    centered: OnceLock<Result<DMatrix<f64>>>,
    score: OnceLock<Result<ChristoffelScore>>,
    std_score: OnceLock<Result<Vec<f64>>>,
    basis: OnceLock<Result<PodBasis>>,
}

fn cached<T: Clone>(cell: &OnceLock<Result<T>>, f: impl FnOnce() -> Result<T>) -> Result<&T> {
    cell.get_or_init(f).as_ref().map_err(clone_error)
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::DegenerateData => Error::DegenerateData,
        Error::DegenerateScore => Error::DegenerateScore,
        other => Error::InvalidArgument(other.to_string()),
    }
}

impl<'a> PlacementContext<'a> {
    pub fn new(snapshots: &'a SnapshotSet) -> Self {
        Self::with_pair_cap(snapshots, DEFAULT_PAIR_CAP, 0)
    }

    /// `score_seed` drives the secant subsample when the pair count exceeds
    /// `pair_cap`.
    pub fn with_pair_cap(snapshots: &'a SnapshotSet, pair_cap: usize, score_seed: u64) -> Self {
        Self {
            snapshots,
            pair_cap,
            score_seed,
            centered: OnceLock::new(),
            score: OnceLock::new(),
            std_score: OnceLock::new(),
            basis: OnceLock::new(),
        }
    }

    pub fn snapshots(&self) -> &SnapshotSet {
        self.snapshots
    }

    pub fn centered(&self) -> Result<&DMatrix<f64>> {
        cached(&self.centered, || mean_adjust(self.snapshots).map(|(x, _)| x))
    }

    pub fn christoffel_score(&self) -> Result<&ChristoffelScore> {
        cached(&self.score, || {
            empirical_christoffel(self.snapshots, self.pair_cap, self.score_seed)
        })
    }

    pub fn std_score(&self) -> Result<&[f64]> {
        let cols: Vec<Field> = (0..self.snapshots.n_snapshots())
            .map(|i| self.snapshots.snapshot(i))
            .collect();
        cached(&self.std_score, || ensemble_std_score(&cols)).map(Vec::as_slice)
    }

    /// POD basis with `r` modes under `policy`.
    pub fn pod(&self, r: usize, policy: RankPolicy) -> Result<PodBasis> {
        let n = self.snapshots.n_nodes().min(self.snapshots.n_snapshots());
        if r == 0 || r > n {
            return Err(invalid(format!("POD rank {r} outside 1..={n}")));
        }
        let full = cached(&self.basis, || pod_basis(self.snapshots, n, RankPolicy::Keep))?;
        let mut b = full.truncated(r);
        if policy == RankPolicy::Clip {
            b = b.truncated(b.numerical_rank);
            b.requested = r;
        }
        Ok(b)
    }

    pub fn place(&self, req: &PlacementRequest) -> Result<Placement> {
        let n = self.snapshots.n_nodes();
        req.validate(n)?;
        let mut fallback_picks = 0;
        let mut rank_warning = false;
        let selection = match req.strategy {
            Strategy::Random => random_place(n, req.m, req.seed)?,
            Strategy::ChristoffelIid => iid_christoffel_place(
                self.christoffel_score()?,
                req.m,
                req.weighting,
                req.replacement,
                req.seed,
            )?,
            Strategy::EnsembleStd => {
                let picks = weighted_sample(self.std_score()?, req.m, req.replacement, req.seed)?;
                let mut seen = vec![false; n];
                let picks = picks
                    .into_iter()
                    .filter(|&j| !std::mem::replace(&mut seen[j], true))
                    .collect();
                SensorSelection::free(picks, n)?
            }
            Strategy::ChristoffelGreedy => {
                let (picks, filled) =
                    greedy_christoffel_place(self.centered()?, req.m, Some(req.seed))?;
                fallback_picks = filled;
                SensorSelection::free(picks, n)?
            }
            st => {
                let max_r = n.min(self.snapshots.n_snapshots());
                let r = req.pod_modes.unwrap_or(req.m).min(max_r);
                let basis = self.pod(r, req.rank_policy)?;
                rank_warning = basis.rank_warning();
                let picks = match st.criterion() {
                    None => {
                        let (picks, filled) =
                            sspor_place(&basis, req.m, Fill::RowNorms(self.centered()?))?;
                        fallback_picks = filled;
                        picks
                    }
                    Some(c) => {
                        let reg = st.is_regularized().then_some(Regularization {
                            eps: req.eps_reg,
                            sigma_eta: req.sigma_eta,
                        });
                        oed_place(&basis, req.m, c, reg)?.0
                    }
                };
                SensorSelection::free(picks, n)?
            }
        };
        Ok(Placement {
            selection,
            fallback_picks,
            rank_warning,
        })
    }
}

/// Runs one request against a snapshot set.
pub fn place(snapshots: &SnapshotSet, req: &PlacementRequest) -> Result<Placement> {
    PlacementContext::new(snapshots).place(req)
}
