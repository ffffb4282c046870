//! Christoffel-function sensor placement for diffusion posterior sampling.
//!
//! The crate covers the whole offline/online pipeline on a finite grid:
//!
//! * [`grid`]: grids, snapshot sets, sensor selections, point measurements;
//! * [`christoffel`]: empirical Christoffel scores and the sampling measure;
//! * [`placement`]: greedy/i.i.d. Christoffel, random, SSPOR and A/D/E-optimal
//!   placement on a POD basis;
//! * [`gmm`]: Gaussian-mixture prior with an exact Tweedie denoiser;
//! * [`dps`]: variance-exploding reverse diffusion with measurement guidance;
//! * [`online`]: ensemble Christoffel-DPS with drifting sensors;
//! * [`io`]: CSNAP1 snapshot files and CSV exports.

pub mod christoffel;
pub mod dps;
pub mod error;
pub mod gmm;
pub mod grid;
pub mod io;
pub mod online;
pub mod placement;
pub mod rng;

pub use christoffel::{
    christoffel_sampling_measure, empirical_christoffel, ensemble_christoffel,
    ensemble_std_score, weighted_sample, ChristoffelScore, SamplingMeasure, ScoreWeighting,
};
pub use error::{Error, FormatError, Result};
pub use grid::{measure, relative_l2, select, Field, Grid, MeasurementModel, SensorSelection, SnapshotSet};
