//! Sweeps over (strategy × m × seed) and their CSV reports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use osp_core::dps::{dps_ensemble, dps_reconstruct_traced, StepTrace};
use osp_core::gmm::GaussianMixturePrior;
use osp_core::io::CSV_VERSION_LINE;
use osp_core::online::{run_online, OnlineTrace};
use osp_core::placement::{PlacementContext, Strategy};
use osp_core::rng::{derive_seed, rng_from_seed};
use osp_core::{measure, relative_l2, Field, Grid, SensorSelection, SnapshotSet};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{BenchStrategy, DatasetSpec, ExperimentConfig, Generator};
use crate::datasets::{
    gen_gmm_prior, BumpManifold, GmmParams, UnionSubspaces, SNAPSHOT_STREAM, TRUTH_STREAM,
};
use crate::error::HarnessError;

/// Stream bases of the per-seed cell randomness, keyed off the config seed.
pub const PLACEMENT_STREAM: u64 = 11 << 40;
pub const NOISE_STREAM: u64 = 12 << 40;
pub const CHAIN_STREAM: u64 = 13 << 40;

/// Snapshot-mixture bandwidth as a fraction of the RMS snapshot entry.
pub const DEFAULT_BANDWIDTH_FRACTION: f64 = 0.1;

enum Truth {
    Bump(BumpManifold),
    Union(UnionSubspaces),
    Prior,
}

/// A generated dataset: training snapshots, the reconstruction prior and a
/// source of held-out ground truth.
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub snapshots: SnapshotSet,
    pub prior: GaussianMixturePrior,
    truth: Truth,
}

fn grid_of(spec: &DatasetSpec) -> Grid {
    match spec.grid[..] {
        [n] => Grid::line(n),
        [nx, ny] => Grid::rectangle(nx, ny),
        _ => unreachable!("validated grid shape"),
    }
}

/// `fraction · sqrt(mean x²)` over all snapshot entries.
pub fn default_bandwidth(snapshots: &SnapshotSet) -> f64 {
    let d = snapshots.data();
    DEFAULT_BANDWIDTH_FRACTION * (d.norm_squared() / d.len() as f64).sqrt()
}

impl Dataset {
    pub fn build(spec: &DatasetSpec) -> Result<Self, HarnessError> {
        let grid = grid_of(spec);
        let m = spec.n_snapshots;
        let snapshot_rng = || rng_from_seed(derive_seed(spec.seed, SNAPSHOT_STREAM));
        let (snapshots, prior, truth) = match spec.generator {
            Generator::Bump { width, amplitude } => {
                let gen = BumpManifold::new(grid.clone(), width, (amplitude[0], amplitude[1]))?;
                let mut rng = snapshot_rng();
                let cols: Vec<Field> = (0..m).map(|_| gen.draw(&mut rng)).collect();
                let snaps = SnapshotSet::from_columns(grid, &cols)?;
                let prior = snapshot_prior(&snaps, spec.bandwidth)?;
                (snaps, prior, Truth::Bump(gen))
            }
            Generator::UnionSubspaces {
                n_subspaces,
                dim_per,
            } => {
                let gen = UnionSubspaces::new(grid.len(), n_subspaces, dim_per, spec.seed)?;
                let mut rng = snapshot_rng();
                let cols: Vec<Field> = (0..m).map(|_| gen.draw(&mut rng)).collect();
                let snaps = SnapshotSet::from_columns(grid, &cols)?;
                let prior = snapshot_prior(&snaps, spec.bandwidth)?;
                (snaps, prior, Truth::Union(gen))
            }
            Generator::Gmm {
                components,
                separation,
                width,
                component_std,
            } => {
                let params = GmmParams {
                    components,
                    separation,
                    width,
                    component_std,
                };
                let (prior, snaps) = gen_gmm_prior(&grid, params, m, spec.seed)?;
                (snaps, prior, Truth::Prior)
            }
        };
        Ok(Self {
            name: spec.name.clone(),
            seed: spec.seed,
            snapshots,
            prior,
            truth,
        })
    }

    /// Held-out ground truth number `s`.
    pub fn truth(&self, s: u64) -> Field {
        let seed = derive_seed(self.seed, TRUTH_STREAM + s);
        match &self.truth {
            Truth::Bump(g) => g.draw(&mut rng_from_seed(seed)),
            Truth::Union(g) => g.draw(&mut rng_from_seed(seed)),
            Truth::Prior => self.prior.sample(seed),
        }
    }
}

fn snapshot_prior(snaps: &SnapshotSet, bandwidth: Option<f64>) -> osp_core::Result<GaussianMixturePrior> {
    GaussianMixturePrior::from_snapshots(snaps, bandwidth.unwrap_or_else(|| default_bandwidth(snaps)))
}

/// One benchmark row. Failed cells carry no error value and an `error`
/// entry in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub dataset: String,
    pub strategy: String,
    pub m: usize,
    pub seed: u64,
    pub rel_l2: Option<f64>,
    pub wall_time_ms: u64,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub strategy: String,
    pub m: usize,
    pub mean_rel_l2: f64,
    /// Sample standard deviation (`n − 1` denominator; 0 for one seed).
    pub std_rel_l2: f64,
    pub n_seeds: usize,
}

/// Result of one (strategy, m, seed) cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub x_star: Field,
    pub x_hat: Field,
    pub selection: SensorSelection,
    pub rel_l2: f64,
    pub extra: Map<String, Value>,
    pub steps: Option<Vec<StepTrace>>,
    pub online: Option<OnlineTrace>,
}

/// Everything needed to run cells against one dataset.
pub struct Experiment<'a> {
    pub config: &'a ExperimentConfig,
    pub dataset: &'a Dataset,
    pub context: PlacementContext<'a>,
}

impl<'a> Experiment<'a> {
    pub fn new(config: &'a ExperimentConfig, dataset: &'a Dataset) -> Self {
        let context = PlacementContext::with_pair_cap(
            &dataset.snapshots,
            config.placement.pair_cap,
            derive_seed(dataset.seed, SNAPSHOT_STREAM),
        );
        Self {
            config,
            dataset,
            context,
        }
    }

    fn place(&self, strategy: Strategy, m: usize, s: u64) -> osp_core::Result<osp_core::placement::Placement> {
        let req = self.config.placement.request(
            strategy,
            m,
            derive_seed(self.config.seed, PLACEMENT_STREAM + s),
            self.config.sampler.sigma_eta,
        );
        self.context.place(&req)
    }

    /// Runs one cell. `keep_trace` retains the offline step trace; online
    /// traces are always returned.
    pub fn run_cell(&self, strategy: BenchStrategy, m: usize, s: u64, keep_trace: bool) -> osp_core::Result<CellOutcome> {
        let cfg = self.config;
        let x_star = self.dataset.truth(s);
        let chain_seed = derive_seed(cfg.seed, CHAIN_STREAM + s);
        let mut extra = Map::new();
        extra.insert("snapshot_stream".into(), json!(SNAPSHOT_STREAM));
        extra.insert("truth_stream".into(), json!(TRUTH_STREAM + s));
        let (x_hat, selection, steps, online) = match strategy {
            BenchStrategy::Offline(st) => {
                let placed = self.place(st, m, s)?;
                extra.insert("fallback_picks".into(), json!(placed.fallback_picks));
                extra.insert("rank_warning".into(), json!(placed.rank_warning));
                let sel = placed.selection;
                let noise_seed = derive_seed(cfg.seed, NOISE_STREAM + s);
                let y = measure(&sel, &x_star, cfg.noise_std(), noise_seed)?;
                let (x_hat, steps) = if cfg.n_chains == 1 {
                    let (x, t) = dps_reconstruct_traced(&self.dataset.prior, &sel, &y, chain_seed, &cfg.sampler)?;
                    (x, keep_trace.then_some(t))
                } else {
                    let xs = dps_ensemble(&self.dataset.prior, &sel, &y, chain_seed, &cfg.sampler, cfg.n_chains)?;
                    let mean = xs.iter().fold(Field::zeros(x_star.len()), |a, x| a + x) / xs.len() as f64;
                    (mean, None)
                };
                (x_hat, sel, steps, None)
            }
            BenchStrategy::Online(mode) => {
                let mut oc = cfg.online_config();
                oc.score_mode = mode;
                oc.n_anchor = oc.n_anchor.min(m);
                oc.n_mobile = m - oc.n_anchor;
                if oc.sigma_noise.is_none() {
                    oc.sigma_noise = Some(cfg.noise_std());
                }
                let anchors = if oc.n_anchor > 0 {
                    self.place(Strategy::ChristoffelGreedy, oc.n_anchor, s)?
                        .selection
                        .indices()
                        .to_vec()
                } else {
                    Vec::new()
                };
                let offline = self.context.christoffel_score()?.scores.clone();
                let (x_hat, trace) = run_online(
                    &self.dataset.prior,
                    self.dataset.snapshots.grid(),
                    &x_star,
                    &anchors,
                    Some(&offline),
                    &oc,
                    &cfg.sampler,
                    chain_seed,
                )?;
                let sel = trace
                    .events
                    .last()
                    .map_or(&trace.initial_selection, |e| &e.selection)
                    .clone();
                let fallbacks = trace
                    .events
                    .iter()
                    .flat_map(|e| &e.relocations)
                    .filter(|r| r.doublings > 0)
                    .count();
                extra.insert("radius_fallbacks".into(), json!(fallbacks));
                extra.insert("final_alive".into(), json!(trace.final_alive.len()));
                (x_hat, sel, None, Some(trace))
            }
        };
        let rel_l2 = relative_l2(&x_hat, &x_star)?;
        if !rel_l2.is_finite() {
            return Err(osp_core::Error::NonFinite("reconstruction"));
        }
        extra.insert("selection".into(), json!(selection.indices()));
        Ok(CellOutcome {
            x_star,
            x_hat,
            selection,
            rel_l2,
            extra,
            steps,
            online,
        })
    }
}

/// Rows and summary of a sweep, plus the online traces when the config
/// asks for them (keyed by their path relative to the output directory).
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub traces: Vec<(PathBuf, OnlineTrace)>,
}

pub fn run_benchmark(config: &ExperimentConfig) -> Result<BenchReport, HarnessError> {
    config.validate()?;
    let dataset = Dataset::build(&config.dataset)?;
    let exp = Experiment::new(config, &dataset);
    let mut strategies = config.bench_strategies()?;
    strategies.sort_by_key(|s| s.name());
    strategies.dedup();
    let mut ms = config.m_values.clone();
    ms.sort_unstable();
    ms.dedup();
    let cells: Vec<(BenchStrategy, usize, u64)> = strategies
        .iter()
        .flat_map(|&st| ms.iter().flat_map(move |&m| (0..config.n_seeds as u64).map(move |s| (st, m, s))))
        .collect();

    let results: Vec<(ResultRow, Option<(PathBuf, OnlineTrace)>)> = cells
        .par_iter()
        .map(|&(st, m, s)| {
            let start = Instant::now();
            let outcome = exp.run_cell(st, m, s, false);
            let wall_time_ms = if config.timing {
                start.elapsed().as_millis() as u64
            } else {
                0
            };
            let mut row = ResultRow {
                dataset: dataset.name.clone(),
                strategy: st.name().to_string(),
                m,
                seed: s,
                rel_l2: None,
                wall_time_ms,
                extra: Map::new(),
            };
            let mut trace = None;
            match outcome {
                Ok(out) => {
                    row.rel_l2 = Some(out.rel_l2);
                    row.extra = out.extra;
                    if let (true, Some(t)) = (config.output.traces, out.online) {
                        let path = PathBuf::from("traces").join(format!("{}_m{m}_s{s}.json", st.name()));
                        row.extra.insert("trace".into(), json!(path.to_string_lossy()));
                        trace = Some((path, t));
                    }
                }
                Err(e) => {
                    row.extra.insert("error".into(), json!(e.to_string()));
                }
            }
            (row, trace)
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for (row, trace) in results {
        rows.push(row);
        traces.extend(trace);
    }
    let summary = summarize(&rows);
    Ok(BenchReport {
        rows,
        summary,
        traces,
    })
}

/// Groups successful rows by (dataset, strategy, m); input must be sorted
/// by those keys.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for group in rows.chunk_by(|a, b| (&a.dataset, &a.strategy, a.m) == (&b.dataset, &b.strategy, b.m)) {
        let vals: Vec<f64> = group.iter().filter_map(|r| r.rel_l2).collect();
        let n = vals.len();
        let (mean, std) = if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        out.push(SummaryRow {
            dataset: group[0].dataset.clone(),
            strategy: group[0].strategy.clone(),
            m: group[0].m,
            mean_rel_l2: mean,
            std_rel_l2: std,
            n_seeds: n,
        });
    }
    out
}

fn csv_writer<W: Write>(mut w: W) -> std::io::Result<csv::Writer<W>> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    Ok(csv::Writer::from_writer(w))
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Core(e.into())
}

pub fn write_rows_csv<W: Write>(w: W, rows: &[ResultRow]) -> Result<(), HarnessError> {
    let mut w = csv_writer(w).map_err(|e| HarnessError::Core(e.into()))?;
    w.write_record(["dataset", "strategy", "m", "seed", "rel_l2", "wall_time_ms", "extra"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.strategy.clone(),
            r.m.to_string(),
            r.seed.to_string(),
            r.rel_l2.map_or_else(String::new, |v| v.to_string()),
            r.wall_time_ms.to_string(),
            Value::Object(r.extra.clone()).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::Core(e.into()))
}

pub fn write_summary_csv<W: Write>(w: W, summary: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut w = csv_writer(w).map_err(|e| HarnessError::Core(e.into()))?;
    w.write_record(["dataset", "strategy", "m", "mean_rel_l2", "std_rel_l2", "n_seeds"])
        .map_err(csv_err)?;
    for r in summary {
        w.write_record([
            r.dataset.clone(),
            r.strategy.clone(),
            r.m.to_string(),
            r.mean_rel_l2.to_string(),
            r.std_rel_l2.to_string(),
            r.n_seeds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::Core(e.into()))
}

pub const ROWS_FILE: &str = "rows.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Writes `rows.csv`, `summary.csv` and any traces under `dir`.
pub fn write_report(report: &BenchReport, dir: &Path) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::Core(e.into());
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut buf = Vec::new();
    write_rows_csv(&mut buf, &report.rows)?;
    std::fs::write(dir.join(ROWS_FILE), &buf).map_err(io)?;
    buf.clear();
    write_summary_csv(&mut buf, &report.summary)?;
    std::fs::write(dir.join(SUMMARY_FILE), &buf).map_err(io)?;
    for (rel, trace) in &report.traces {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let text = serde_json::to_string_pretty(trace).map_err(|e| HarnessError::Other(e.to_string()))?;
        std::fs::write(path, text).map_err(io)?;
    }
    Ok(())
}
