//! Online ensemble Christoffel-DPS (anchored + drifting sensors).
//!
//! An ensemble of guided chains shares one sensor layout. At each drift
//! event the chains' Tweedie estimates are scored, mobile sensors move to
//! nearby high-score nodes, fresh readings are taken and chains with a
//! large likelihood gap are pruned. The surviving ensemble is collapsed at
//! the end of the reverse pass.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::christoffel::{
    ensemble_christoffel, ensemble_std_score, sample_without_replacement, ScoreWeighting,
};
use crate::dps::{reverse_step, ChainState, Guidance, SamplerConfig, SigmaSchedule};
use crate::error::{invalid, Error, Result};
use crate::gmm::Denoiser;
use crate::grid::{measure, select, Field, Grid, SensorSelection};
use crate::rng::{derive_seed, rng_from_seed};

const NOISE_STREAM: u64 = 1 << 40;
const PLACEMENT_STREAM: u64 = 2 << 40;
const EVENT_STREAM: u64 = 3 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CollapseMode {
    #[default]
    BestLikelihood,
    MeanSurvivors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Christoffel,
    EnsembleStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// Every mobile sensor relocates at every event.
    #[default]
    RelocateAll,
    /// Mobile sensors are introduced in equal batches, one batch per event,
    /// and stay where they are placed.
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    pub n_ensemble: usize,
    pub n_drift_events: usize,
    /// Schedule indices of the drift events; `None` spaces them
    /// logarithmically in σ between `σ_max / 10` and `2 σ_η`.
    pub drift_levels: Option<Vec<usize>>,
    pub n_anchor: usize,
    pub n_mobile: usize,
    /// Drift radius in grid units; `None` means 25% of the bounding-box diagonal.
    pub r_drift: Option<f64>,
    /// Likelihood gap per sensor; `None` disables pruning.
    pub prune_gap: Option<f64>,
    pub n_min: usize,
    pub collapse: CollapseMode,
    pub score_mode: ScoreMode,
    /// Relocation weights derived from the score.
    pub weighting: ScoreWeighting,
    /// Reading noise; `None` means the sampler's `σ_η`.
    pub sigma_noise: Option<f64>,
    /// A mobile sensor may stay on its current node.
    pub allow_stay: bool,
    pub allocation: Allocation,
    /// Store every event's Tweedie estimates in the trace.
    pub trace_estimates: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            n_ensemble: 20,
            n_drift_events: 10,
            drift_levels: None,
            n_anchor: 3,
            n_mobile: 3,
            r_drift: None,
            prune_gap: Some(1.0),
            n_min: 1,
            collapse: CollapseMode::BestLikelihood,
            score_mode: ScoreMode::Christoffel,
            weighting: ScoreWeighting::Raw,
            sigma_noise: None,
            allow_stay: true,
            allocation: Allocation::RelocateAll,
            trace_estimates: false,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ensemble == 0 {
            return Err(invalid("ensemble must have at least one chain"));
        }
        if self.n_min == 0 || self.n_min > self.n_ensemble {
            return Err(invalid("need 1 <= n_min <= n_ensemble"));
        }
        if self.n_anchor + self.n_mobile == 0 {
            return Err(invalid("need at least one sensor"));
        }
        if let Some(levels) = &self.drift_levels {
            if levels.len() != self.n_drift_events {
                return Err(invalid("drift_levels length must equal n_drift_events"));
            }
        }
        if let Some(r) = self.r_drift {
            if !(r > 0.0) {
                return Err(invalid("r_drift must be positive"));
            }
        }
        if let Some(g) = self.prune_gap {
            if !(g >= 0.0) {
                return Err(invalid("prune_gap must be nonnegative"));
            }
        }
        if let Some(s) = self.sigma_noise {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid("sigma_noise must be finite and nonnegative"));
            }
        }
        if self.allocation == Allocation::Incremental
            && self.n_mobile > 0
            && self.n_drift_events == 0
        {
            return Err(invalid("incremental allocation needs drift events"));
        }
        Ok(())
    }

    /// Schedule indices (into the positive levels, excluding 0) of the events.
    pub fn resolve_drift_levels(&self, schedule: &SigmaSchedule, sigma_eta: f64) -> Result<Vec<usize>> {
        let k = schedule.n_steps();
        let levels = match &self.drift_levels {
            Some(l) => l.clone(),
            None => default_drift_levels(schedule, self.n_drift_events, sigma_eta)?,
        };
        if levels.iter().any(|&i| i == 0 || i >= k) {
            return Err(invalid(format!("drift levels must lie in 1..{k}")));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("drift levels must be strictly decreasing in sigma"));
        }
        Ok(levels)
    }
}

/// `d` levels log-spaced from `σ_max/10` to `2σ_η`, snapped to the nearest
/// schedule level and made strictly increasing in index.
pub fn default_drift_levels(schedule: &SigmaSchedule, d: usize, sigma_eta: f64) -> Result<Vec<usize>> {
    if d == 0 {
        return Ok(vec![]);
    }
    let sig = schedule.sigmas();
    let k = schedule.n_steps();
    if d > k - 1 {
        return Err(invalid(format!("{d} drift events exceed {} interior levels", k - 1)));
    }
    let (hi, lo) = ((schedule.sigma_max() / 10.0).ln(), (2.0 * sigma_eta).ln());
    let mut out: Vec<usize> = Vec::with_capacity(d);
    for e in 0..d {
        let t = if d == 1 { 0.0 } else { e as f64 / (d - 1) as f64 };
        let target = hi + t * (lo - hi);
        let nearest = (1..k)
            .min_by(|&a, &b| {
                (sig[a].ln() - target)
                    .abs()
                    .total_cmp(&(sig[b].ln() - target).abs())
            })
            .expect("k >= 2");
        let min_allowed = out.last().map_or(1, |&p| p + 1);
        out.push(nearest.max(min_allowed));
    }
    // snapping may have pushed the tail past the last interior level
    let overflow = out.last().copied().unwrap_or(0).saturating_sub(k - 1);
    if overflow > 0 {
        for (i, v) in out.iter_mut().enumerate().rev() {
            let cap = k - d + i;
            *v = (*v).min(cap);
        }
    }
    Ok(out)
}

/// Gap rule `ℓ* − ℓ_i ≤ Δℓ · m` over `alive`, keeping the `n_min` best
/// chains if fewer survive. Returns chain indices in increasing order.
pub fn prune(alive: &[usize], log_like: &[f64], delta_ell: Option<f64>, m: usize, n_min: usize) -> Vec<usize> {
    let Some(gap) = delta_ell else {
        return alive.to_vec();
    };
    let best = alive
        .iter()
        .map(|&i| log_like[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = gap * m as f64;
    let mut kept: Vec<usize> = alive
        .iter()
        .copied()
        .filter(|&i| best - log_like[i] <= threshold)
        .collect();
    if kept.len() < n_min {
        let mut ranked = alive.to_vec();
        ranked.sort_by(|&a, &b| log_like[b].total_cmp(&log_like[a]).then(a.cmp(&b)));
        ranked.truncate(n_min.min(alive.len()));
        ranked.sort_unstable();
        kept = ranked;
    }
    kept
}

/// Collapses the alive ensemble. Returns the estimate and, in
/// best-likelihood mode, the chosen chain.
pub fn collapse(
    alive: &[usize],
    estimates: &[Field],
    log_like: &[f64],
    mode: CollapseMode,
) -> Result<(Field, Option<usize>)> {
    if alive.is_empty() {
        return Err(invalid("cannot collapse an empty ensemble"));
    }
    match mode {
        CollapseMode::BestLikelihood => {
            let mut best = alive[0];
            for &i in &alive[1..] {
                if log_like[i] > log_like[best] {
                    best = i;
                }
            }
            Ok((estimates[best].clone(), Some(best)))
        }
        CollapseMode::MeanSurvivors => {
            let mut sum = DVector::zeros(estimates[alive[0]].len());
            for &i in alive {
                sum += &estimates[i];
            }
            Ok((sum / alive.len() as f64, None))
        }
    }
}

/// `−‖S x − y‖² / (2σ_η²)`.
pub fn log_likelihood(x: &Field, selection: &SensorSelection, y: &Field, sigma_eta: f64) -> Result<f64> {
    let r = select(selection, x)? - y;
    Ok(-0.5 * r.norm_squared() / (sigma_eta * sigma_eta))
}

/// One mobile sensor's move at a drift event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relocation {
    /// Position of the sensor within the selection.
    pub slot: usize,
    pub from: usize,
    pub to: usize,
    pub distance: f64,
    /// Radius actually searched (`r_drift · 2^doublings`).
    pub radius: f64,
    pub doublings: u32,
}

/// Moves every mobile sensor of `selection` to a node drawn ∝ `weights`
/// among unoccupied nodes within `r_drift` of its current node.
///
/// Sensors move in slot order. A node is occupied if it holds an anchor,
/// the new position of an earlier sensor, or the current position of a
/// later sensor. When no candidate is in range the radius is doubled
/// until one is, and the doublings are recorded.
pub fn drift_event(
    selection: &SensorSelection,
    weights: &[f64],
    r_drift: f64,
    grid: &Grid,
    allow_stay: bool,
    seed: u64,
) -> Result<(SensorSelection, Vec<Relocation>)> {
    let n = grid.len();
    if weights.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    if !(r_drift > 0.0) {
        return Err(invalid("r_drift must be positive"));
    }
    selection.validate(n)?;
    let mut rng = rng_from_seed(seed);
    let mut occupied = vec![false; n];
    for &j in selection.indices() {
        occupied[j] = true;
    }
    let mut indices = selection.indices().to_vec();
    let mut moves = Vec::with_capacity(selection.mobile().len());
    for slot in selection.n_anchor()..indices.len() {
        let from = indices[slot];
        occupied[from] = !allow_stay;
        let mut radius = r_drift;
        let mut doublings = 0;
        let excluded = loop {
            let excluded: Vec<bool> = (0..n)
                .map(|j| occupied[j] || grid.distance(from, j) > radius)
                .collect();
            if excluded.iter().any(|e| !e) {
                break excluded;
            }
            if occupied.iter().all(|&o| o) {
                return Err(invalid("no free node left for a mobile sensor"));
            }
            radius *= 2.0;
            doublings += 1;
        };
        let to = sample_without_replacement(weights, 1, &excluded, &mut rng)?[0];
        occupied[from] = false;
        occupied[to] = true;
        indices[slot] = to;
        moves.push(Relocation {
            slot,
            from,
            to,
            distance: grid.distance(from, to),
            radius,
            doublings,
        });
    }
    Ok((SensorSelection::new(indices, selection.n_anchor(), n)?, moves))
}

/// Drift-event record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    /// Schedule index of the event level.
    pub level: usize,
    pub sigma: f64,
    /// Score over all nodes, before anchors and occupancy are excluded.
    pub scores: Vec<f64>,
    pub relocations: Vec<Relocation>,
    /// Sensors newly introduced (incremental allocation).
    pub added: Vec<usize>,
    pub selection: SensorSelection,
    pub y: Vec<f64>,
    /// `ℓ_i` per chain; `None` for chains pruned earlier.
    pub log_like: Vec<Option<f64>>,
    pub alive: Vec<usize>,
    /// Tweedie estimates of the alive chains (alive order), if requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimates: Option<Vec<Vec<f64>>>,
}

/// Full record of an online run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrace {
    pub seed: u64,
    /// Key of the per-node reading noise.
    pub noise_seed: u64,
    pub sigma_noise: f64,
    pub sigma_eta: f64,
    pub r_drift: f64,
    pub chain_seeds: Vec<u64>,
    pub initial_selection: SensorSelection,
    pub initial_y: Vec<f64>,
    pub events: Vec<EventTrace>,
    pub final_alive: Vec<usize>,
    pub final_log_like: Vec<Option<f64>>,
    pub chosen_chain: Option<usize>,
}

/// Seed of chain `i` for run seed `seed`; matches the DPS ensemble seeding.
pub fn chain_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, i as u64)
}

/// Runs the online algorithm against ground truth `x_star`.
///
/// `offline_score`, if given, weights the initial draw of mobile sensors
/// (through `μ*`); otherwise they start uniformly at random.
#[allow(clippy::too_many_arguments)]
pub fn run_online<D: Denoiser + ?Sized>(
    denoiser: &D,
    grid: &Grid,
    x_star: &Field,
    anchors: &[usize],
    offline_score: Option<&[f64]>,
    config: &OnlineConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(Field, OnlineTrace)> {
    config.validate()?;
    sampler.validate()?;
    let n = grid.len();
    if x_star.len() != n || denoiser.dim() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: if x_star.len() != n { x_star.len() } else { denoiser.dim() },
        });
    }
    if anchors.len() != config.n_anchor {
        return Err(invalid(format!(
            "expected {} anchors, got {}",
            config.n_anchor,
            anchors.len()
        )));
    }
    if config.n_anchor + config.n_mobile > n {
        return Err(invalid("more sensors than nodes"));
    }
    let schedule = sampler.schedule()?;
    let sig = schedule.sigmas();
    let levels = config.resolve_drift_levels(&schedule, sampler.sigma_eta)?;
    let sigma_eta = sampler.sigma_eta;
    let sigma_noise = config.sigma_noise.unwrap_or(sigma_eta);
    let r_drift = config.r_drift.unwrap_or(0.25 * grid.bbox_diagonal());
    let r_drift = if r_drift > 0.0 { r_drift } else { 1.0 };
    let noise_seed = derive_seed(seed, NOISE_STREAM);

    let mut selection = initial_selection(n, anchors, offline_score, config, seed)?;
    let mut y = measure(&selection, x_star, sigma_noise, noise_seed)?;
    let initial_selection = selection.clone();
    let initial_y = y.as_slice().to_vec();

    let chain_seeds: Vec<u64> = (0..config.n_ensemble).map(|i| chain_seed(seed, i)).collect();
    let mut chains: Vec<ChainState> = chain_seeds
        .iter()
        .map(|&s| ChainState::init(n, schedule.sigma_max(), s))
        .collect();
    let mut alive: Vec<usize> = (0..config.n_ensemble).collect();
    let mut log_like = vec![f64::NAN; config.n_ensemble];
    let mut events = Vec::with_capacity(levels.len());
    let mut next_event = 0;
    let mut pending_mobile = match config.allocation {
        Allocation::RelocateAll => 0,
        Allocation::Incremental => config.n_mobile,
    };

    for k in 0..schedule.n_steps() {
        let (s_k, s_next) = (sig[k], sig[k + 1]);
        let alpha = sampler.alpha(s_k);
        let guidance = Guidance {
            selection: &selection,
            y: &y,
            sigma_eta,
        };
        let guidance = (sampler.guidance == crate::dps::GuidanceMode::Dps).then_some(guidance);
        let stepped: Result<Vec<(usize, ChainState)>> = alive
            .par_iter()
            .map(|&i| {
                reverse_step(denoiser, &chains[i], s_k, s_next, guidance, alpha, sampler.heun)
                    .map(|st| (i, st))
            })
            .collect();
        for (i, st) in stepped? {
            chains[i] = st;
        }

        if next_event < levels.len() && levels[next_event] == k + 1 {
            let d = next_event;
            next_event += 1;
            let estimates: Vec<(usize, Field)> = alive
                .par_iter()
                .map(|&i| (i, denoiser.denoise(&chains[i].z, s_next)))
                .collect();
            let est_fields: Vec<Field> = estimates.iter().map(|(_, e)| e.clone()).collect();
            let scores = score_ensemble(&est_fields, config.score_mode)?;
            let mut weights = config.weighting.weights(&scores)?;
            for &a in selection.anchors() {
                weights[a] = 0.0;
            }
            let event_seed = derive_seed(seed, EVENT_STREAM + d as u64);
            let (new_sel, relocations, added) = match config.allocation {
                Allocation::RelocateAll => {
                    let (s, r) = drift_event(&selection, &weights, r_drift, grid, config.allow_stay, event_seed)?;
                    (s, r, vec![])
                }
                Allocation::Incremental => {
                    let remaining_events = levels.len() - d;
                    let batch = pending_mobile.div_ceil(remaining_events);
                    pending_mobile -= batch;
                    let mut excluded = vec![false; n];
                    for &j in selection.indices() {
                        excluded[j] = true;
                    }
                    let mut rng = rng_from_seed(event_seed);
                    let added = sample_without_replacement(&weights, batch, &excluded, &mut rng)?;
                    let mut idx = selection.indices().to_vec();
                    idx.extend_from_slice(&added);
                    (SensorSelection::new(idx, selection.n_anchor(), n)?, vec![], added)
                }
            };
            selection = new_sel;
            y = measure(&selection, x_star, sigma_noise, noise_seed)?;
            for (i, e) in &estimates {
                log_like[*i] = log_likelihood(e, &selection, &y, sigma_eta)?;
            }
            alive = prune(&alive, &log_like, config.prune_gap, selection.len(), config.n_min);
            events.push(EventTrace {
                level: k + 1,
                sigma: s_next,
                scores,
                relocations,
                added,
                selection: selection.clone(),
                y: y.as_slice().to_vec(),
                log_like: masked(&log_like, &estimates.iter().map(|(i, _)| *i).collect::<Vec<_>>()),
                alive: alive.clone(),
                estimates: config
                    .trace_estimates
                    .then(|| est_fields.iter().map(|e| e.as_slice().to_vec()).collect()),
            });
        }
    }

    let finals: Vec<Field> = chains.iter().map(|c| c.z.clone()).collect();
    for &i in &alive {
        log_like[i] = log_likelihood(&finals[i], &selection, &y, sigma_eta)?;
    }
    let (x_hat, chosen_chain) = collapse(&alive, &finals, &log_like, config.collapse)?;
    let trace = OnlineTrace {
        seed,
        noise_seed,
        sigma_noise,
        sigma_eta,
        r_drift,
        chain_seeds,
        initial_selection,
        initial_y,
        events,
        final_log_like: masked(&log_like, &alive),
        final_alive: alive,
        chosen_chain,
    };
    Ok((x_hat, trace))
}

fn masked(values: &[f64], keep: &[usize]) -> Vec<Option<f64>> {
    let mut out = vec![None; values.len()];
    for &i in keep {
        out[i] = Some(values[i]);
    }
    out
}

fn score_ensemble(estimates: &[Field], mode: ScoreMode) -> Result<Vec<f64>> {
    let n = estimates.first().map_or(0, |e| e.len());
    if estimates.len() < 2 {
        return Ok(vec![0.0; n]);
    }
    match mode {
        ScoreMode::Christoffel => match ensemble_christoffel(estimates) {
            Ok(s) => Ok(s.scores),
            Err(Error::DegenerateEnsemble) => Ok(vec![0.0; n]),
            Err(e) => Err(e),
        },
        ScoreMode::EnsembleStd => ensemble_std_score(estimates),
    }
}

fn initial_selection(
    n: usize,
    anchors: &[usize],
    offline_score: Option<&[f64]>,
    config: &OnlineConfig,
    seed: u64,
) -> Result<SensorSelection> {
    let mut excluded = vec![false; n];
    for &a in anchors {
        if a >= n {
            return Err(Error::IndexOutOfRange { index: a, len: n });
        }
        excluded[a] = true;
    }
    let n_initial = match config.allocation {
        Allocation::RelocateAll => config.n_mobile,
        Allocation::Incremental => 0,
    };
    let weights = match offline_score {
        Some(s) if s.len() == n => ScoreWeighting::MuStar.weights(s)?,
        Some(s) => {
            return Err(Error::LengthMismatch {
                expected: n,
                got: s.len(),
            })
        }
        None => vec![1.0; n],
    };
    let mut rng = rng_from_seed(derive_seed(seed, PLACEMENT_STREAM));
    let mobile = sample_without_replacement(&weights, n_initial, &excluded, &mut rng)?;
    let mut idx = anchors.to_vec();
    idx.extend(mobile);
    SensorSelection::new(idx, anchors.len(), n)
}
