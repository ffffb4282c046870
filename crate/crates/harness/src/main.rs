use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use osp_core::dps::{sample_unconditional, GuidanceMode, SamplerConfig};
use osp_core::gmm::GaussianMixturePrior;
use osp_core::io::{load_snapshots, read_scores_csv, save_snapshots, write_scores_csv, write_selection_csv, write_snapshots_csv};
use osp_core::placement::{iid_christoffel_place, PlacementContext, Strategy};
use osp_core::rng::derive_seed;
use osp_core::{ChristoffelScore, Grid, SnapshotSet};
use osp_harness::bench::{run_benchmark, write_report, Dataset, Experiment, SUMMARY_FILE};
use osp_harness::config::{BenchStrategy, ExperimentConfig, PlacementSettings};
use osp_harness::HarnessError;
use serde_json::json;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure
  2  usage error (bad or missing arguments)
  3  unknown strategy
  4  malformed config
  5  missing input file
  6  data or I/O error (bad file contents, degenerate data, write failure)

On failure a single JSON object {\"error\", \"message\", \"exit_code\"} is printed to stderr.";

#[derive(Parser)]
#[command(name = "christoffel-osp", version, about = "Christoffel sensor placement and diffusion posterior sampling", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and save it as CSNAP1 (or CSV for a .csv path).
    Gen(GenArgs),
    /// Empirical Christoffel score of a snapshot file.
    Score(ScoreArgs),
    /// Place sensors on a snapshot file.
    Place(PlaceArgs),
    /// One placement plus reconstruction, written as JSON with its trace.
    Reconstruct(ReconstructArgs),
    /// Full (strategy × m × seed) sweep.
    Bench(BenchArgs),
    /// Unconditional samples of a prior, as a snapshot CSV.
    SamplePrior(SamplePriorArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the reconstruction prior as JSON.
    #[arg(long)]
    prior_out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long, default_value_t = 200_000)]
    pair_cap: usize,
    /// Seed of the secant subsample when the pair count exceeds the cap.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlaceArgs {
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long)]
    strategy: String,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score CSV to sample from (christoffel_iid only).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Experiment config supplying placement settings and sigma_eta.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: String,
    #[arg(long)]
    m: usize,
    /// Seed index of the cell, as in `bench` rows.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SamplePriorArgs {
    /// Experiment config; its dataset prior and sampler are used.
    #[arg(long, conflicts_with = "prior", required_unless_present = "prior")]
    config: Option<PathBuf>,
    /// Prior JSON (weights, means, variances); samples go on a unit line grid.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn core_io(e: io::Error) -> HarnessError {
    HarnessError::Core(e.into())
}

fn require(path: &Path) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingFile(path.to_path_buf()))
    }
}

/// Writes to `out` or stdout.
fn emit(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<(), HarnessError>) -> Result<(), HarnessError> {
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(core_io)?);
            f(&mut w)?;
            w.flush().map_err(core_io)
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush().map_err(core_io)
        }
    }
}

fn load(path: &Path) -> Result<SnapshotSet, HarnessError> {
    require(path)?;
    Ok(load_snapshots(path)?)
}

fn parse_strategy(s: &str) -> Result<BenchStrategy, HarnessError> {
    s.parse()
}

fn gen(a: GenArgs) -> Result<(), HarnessError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.dataset.seed = seed;
    }
    let ds = Dataset::build(&cfg.dataset)?;
    let is_csv = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        emit(Some(&a.out), |w| Ok(write_snapshots_csv(w, &ds.snapshots)?))?;
    } else {
        save_snapshots(&ds.snapshots, &a.out)?;
    }
    if let Some(p) = &a.prior_out {
        let text = serde_json::to_string_pretty(&ds.prior).map_err(|e| HarnessError::Other(e.to_string()))?;
        std::fs::write(p, text).map_err(core_io)?;
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<(), HarnessError> {
    let snaps = load(&a.snapshots)?;
    let ctx = PlacementContext::with_pair_cap(&snaps, a.pair_cap, a.seed);
    let s = ctx.christoffel_score()?;
    emit(a.out.as_deref(), |w| Ok(write_scores_csv(w, &s.scores)?))
}

fn place(a: PlaceArgs) -> Result<(), HarnessError> {
    let strategy = match parse_strategy(&a.strategy)? {
        BenchStrategy::Offline(s) => s,
        BenchStrategy::Online(_) => {
            return Err(HarnessError::Other(format!(
                "`{}` relocates sensors during reconstruction; use `reconstruct`",
                a.strategy
            )))
        }
    };
    let (settings, sigma_eta) = match &a.config {
        Some(p) => {
            let c = ExperimentConfig::load(p)?;
            (c.placement, c.sampler.sigma_eta)
        }
        None => (PlacementSettings::default(), SamplerConfig::default().sigma_eta),
    };
    let snaps = load(&a.snapshots)?;
    let selection = match (&a.scores, strategy) {
        (Some(path), Strategy::ChristoffelIid) => {
            require(path)?;
            let scores = read_scores_csv(File::open(path).map_err(|e| HarnessError::from_io(e, path))?)?;
            if scores.len() != snaps.n_nodes() {
                return Err(osp_core::Error::LengthMismatch {
                    expected: snaps.n_nodes(),
                    got: scores.len(),
                }
                .into());
            }
            let score = ChristoffelScore {
                scores,
                n_pairs_used: 0,
                n_pairs_skipped: 0,
                exact: true,
            };
            iid_christoffel_place(&score, a.m, settings.weighting, settings.replacement, a.seed)?
        }
        (Some(_), _) => {
            return Err(HarnessError::Other("--scores applies to christoffel_iid only".into()));
        }
        (None, _) => {
            let ctx = PlacementContext::with_pair_cap(&snaps, settings.pair_cap, a.seed);
            ctx.place(&settings.request(strategy, a.m, a.seed, sigma_eta))?.selection
        }
    };
    emit(a.out.as_deref(), |w| Ok(write_selection_csv(w, &selection)?))
}

fn reconstruct(a: ReconstructArgs) -> Result<(), HarnessError> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let strategy = parse_strategy(&a.strategy)?;
    let n = cfg.dataset.n_nodes();
    if a.m == 0 || a.m > n {
        return Err(HarnessError::Config(format!("m = {} outside 1..={n}", a.m)));
    }
    let ds = Dataset::build(&cfg.dataset)?;
    let exp = Experiment::new(&cfg, &ds);
    let out = exp.run_cell(strategy, a.m, a.seed, true)?;
    let doc = json!({
        "dataset": ds.name,
        "strategy": strategy.name(),
        "m": a.m,
        "seed": a.seed,
        "rel_l2": out.rel_l2,
        "selection": out.selection.indices(),
        "x_star": out.x_star.as_slice(),
        "x_hat": out.x_hat.as_slice(),
        "extra": out.extra,
        "steps": out.steps,
        "online_trace": out.online,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| HarnessError::Other(e.to_string()))?;
    emit(a.out.as_deref(), |w| writeln!(w, "{text}").map_err(core_io))
}

fn bench(a: BenchArgs) -> Result<(), HarnessError> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let dir = a.out.unwrap_or_else(|| cfg.output.dir.clone());
    let report = run_benchmark(&cfg)?;
    write_report(&report, &dir)?;
    let failed = report.rows.iter().filter(|r| r.rel_l2.is_none()).count();
    println!(
        "{}",
        json!({
            "rows": report.rows.len(),
            "failed": failed,
            "summary": dir.join(SUMMARY_FILE).to_string_lossy(),
        })
    );
    Ok(())
}

fn sample_prior(a: SamplePriorArgs) -> Result<(), HarnessError> {
    if a.n == 0 {
        return Err(HarnessError::Other("--n must be at least 1".into()));
    }
    let (prior, grid, sampler) = match (&a.config, &a.prior) {
        (Some(c), _) => {
            let cfg = ExperimentConfig::load(c)?;
            let ds = Dataset::build(&cfg.dataset)?;
            let grid = ds.snapshots.grid().clone();
            (ds.prior, grid, cfg.sampler)
        }
        (None, Some(p)) => {
            require(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::from_io(e, p))?;
            let prior: GaussianMixturePrior =
                serde_json::from_str(&text).map_err(|e| HarnessError::Core(osp_core::Error::InvalidArgument(e.to_string())))?;
            let grid = Grid::line(prior.means()[0].len());
            (prior, grid, SamplerConfig::default())
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let sampler = SamplerConfig {
        guidance: GuidanceMode::None,
        ..sampler
    };
    let cols = (0..a.n as u64)
        .map(|i| sample_unconditional(&prior, &sampler, derive_seed(a.seed, i)))
        .collect::<osp_core::Result<Vec<_>>>()?;
    let set = SnapshotSet::from_columns(grid, &cols)?;
    emit(a.out.as_deref(), |w| Ok(write_snapshots_csv(w, &set)?))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Score(a) => score(a),
        Command::Place(a) => place(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Bench(a) => bench(a),
        Command::SamplePrior(a) => sample_prior(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": "usage", "message": e.to_string().trim_end(), "exit_code": 2 })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
