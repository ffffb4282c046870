//! Variance-exploding reverse diffusion with measurement guidance.
//!
//! Chains follow the probability-flow ODE `dz/dσ = (z − D(z, σ)) / σ`
//! discretized with Heun (or Euler) steps on a Karras schedule. DPS
//! guidance pulls each step along `−∇_z Φ(D(z, σ), y)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gmm::{guidance_gradient, misfit, Denoiser};
use crate::grid::{Field, SensorSelection};
use crate::rng::{derive_seed, rng_from_seed, standard_normal};

/// Decreasing noise levels `σ_0 > … > σ_{K−1} > 0` followed by a terminal 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    /// Levels including the terminal 0.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Number of positive levels, i.e. reverse steps.
    pub fn n_steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }
}

/// `σ_i = (σ_max^{1/ρ} + i/(n−1) (σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ`, `i < n`.
pub fn karras_schedule(n_steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<SigmaSchedule> {
    if n_steps < 2 {
        return Err(invalid("schedule needs at least 2 steps"));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(invalid("need 0 < sigma_min < sigma_max"));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(invalid("rho must be positive"));
    }
    let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let last = (n_steps - 1) as f64;
    let mut sigmas: Vec<f64> = (0..n_steps)
        .map(|i| (a + i as f64 / last * (b - a)).powf(rho))
        .collect();
    sigmas[0] = sigma_max;
    sigmas[n_steps - 1] = sigma_min;
    if sigmas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("schedule is not strictly decreasing"));
    }
    sigmas.push(0.0);
    Ok(SigmaSchedule { sigmas })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    Dps,
    None,
}

/// Reverse sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub guidance: GuidanceMode,
    pub sigma_eta: f64,
    pub heun: bool,
    /// Upper clip of the guidance weight `α_k = σ_k / σ_η`.
    pub alpha_max: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            guidance: GuidanceMode::Dps,
            sigma_eta: 0.1,
            heun: true,
            alpha_max: 10.0,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> Result<SigmaSchedule> {
        karras_schedule(self.n_steps, self.sigma_min, self.sigma_max, self.rho)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if !(self.sigma_eta > 0.0 && self.sigma_eta.is_finite()) {
            return Err(invalid("sigma_eta must be positive"));
        }
        if !(self.alpha_max >= 0.0) {
            return Err(invalid("alpha_max must be nonnegative"));
        }
        Ok(())
    }

    /// Guidance weight at noise level `sigma`.
    pub fn alpha(&self, sigma: f64) -> f64 {
        guidance_weight(sigma, self.sigma_eta, self.alpha_max)
    }
}

/// `α = σ / σ_η` clipped to `[0, α_max]`: linear in σ, unit at `σ = σ_η`.
pub fn guidance_weight(sigma: f64, sigma_eta: f64, alpha_max: f64) -> f64 {
    (sigma / sigma_eta).clamp(0.0, alpha_max)
}

/// Sensor layout and readings that guide a chain.
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    pub selection: &'a SensorSelection,
    pub y: &'a Field,
    pub sigma_eta: f64,
}

/// One chain of the reverse process.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub z: Field,
    /// Index into the schedule of the level `z` currently sits at.
    pub sigma_index: usize,
    /// Most recent measurement log-likelihood `−Φ(D(z, σ), y)`.
    pub log_like: f64,
    /// Denoised estimate at the current level.
    pub x0_hat: Field,
}

impl ChainState {
    /// `z ∼ N(0, σ_max² I)` drawn from `seed`.
    pub fn init(dim: usize, sigma_max: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let z = DVector::from_fn(dim, |_, _| sigma_max * standard_normal(&mut rng));
        Self {
            x0_hat: z.clone(),
            z,
            sigma_index: 0,
            log_like: 0.0,
        }
    }
}

/// Step fraction of the guidance update `z ← z − λ σ_η² ∇Φ`.
///
/// `α_k² (σ_k − σ_next) / σ_k` is the probability-flow weight of the
/// likelihood term with `σ_k / σ_η` replaced by the clipped `α_k`. It is
/// capped at `‖r‖² / ‖g‖²` (`r = S D − y`, `g = σ_η² ∇Φ = Jᵀ Sᵀ r`), the
/// step at which the linearized residual along `g` would reach zero.
pub fn guidance_step(alpha_k: f64, sigma_k: f64, sigma_next: f64, residual_sq: f64, g_norm: f64) -> f64 {
    let flow = alpha_k * alpha_k * (sigma_k - sigma_next) / sigma_k;
    if g_norm > 0.0 {
        flow.min(residual_sq / (g_norm * g_norm))
    } else {
        0.0
    }
}

/// One reverse step from `sigma_k` to `sigma_next`.
///
/// The probability-flow predictor is followed by the guidance update
/// `z ← z − λ_k σ_η² ∇Φ` with `∇Φ` taken at `(z, σ_k)` and `λ_k` from
/// [`guidance_step`]. The weight passed there is
/// `min(α_k, σ_k / √(σ_η² + τ²))`, where `τ²` is the denoiser's within-mode
/// variance averaged over the sensors (0 if it provides none): the readings
/// are trusted in proportion to how much the noise level still hides. For
/// a single Gaussian and unclipped `α_k` this is the exact posterior flow.
pub fn reverse_step<D: Denoiser + ?Sized>(
    denoiser: &D,
    state: &ChainState,
    sigma_k: f64,
    sigma_next: f64,
    guidance: Option<Guidance<'_>>,
    alpha_k: f64,
    heun: bool,
) -> Result<ChainState> {
    if !(sigma_k > sigma_next && sigma_next >= 0.0) {
        return Err(invalid(format!("need sigma_k > sigma_next >= 0, got {sigma_k} -> {sigma_next}")));
    }
    let z = &state.z;
    if z.len() != denoiser.dim() {
        return Err(Error::LengthMismatch {
            expected: denoiser.dim(),
            got: z.len(),
        });
    }
    let (d0, grad, log_like) = match guidance {
        Some(g) => {
            let (d0, grad) = guidance_gradient(denoiser, z, sigma_k, g.selection, g.y, g.sigma_eta)?;
            let ll = -misfit(&d0, g.selection, g.y, g.sigma_eta)?;
            (d0, Some((grad, g)), ll)
        }
        None => (denoiser.denoise(z, sigma_k), None, 0.0),
    };
    let h = sigma_next - sigma_k;
    let slope = (z - &d0) / sigma_k;
    let mut next = z + h * &slope;
    if heun && sigma_next > 0.0 {
        let slope2 = (&next - denoiser.denoise(&next, sigma_next)) / sigma_next;
        next = z + (0.5 * h) * (slope + slope2);
    }
    if let Some((grad, g)) = grad {
        let eta = g.sigma_eta;
        let idx = g.selection.indices();
        let tau2 = match denoiser.within_mode_variance(z, sigma_k) {
            Some(w) if !idx.is_empty() => idx.iter().map(|&j| w[j]).sum::<f64>() / idx.len() as f64,
            _ => 0.0,
        };
        let alpha = alpha_k.min(sigma_k / (eta * eta + tau2).sqrt());
        let lambda = guidance_step(
            alpha,
            sigma_k,
            sigma_next,
            -2.0 * log_like * eta * eta,
            eta * eta * grad.norm(),
        );
        next.axpy(-lambda * eta * eta, &grad, 1.0);
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reverse step"));
    }
    Ok(ChainState {
        z: next,
        sigma_index: state.sigma_index + 1,
        log_like,
        x0_hat: d0,
    })
}

/// Per-step diagnostics of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub sigma: f64,
    /// `‖S D(z, σ) − y‖` before the step (0 without guidance).
    pub residual_norm: f64,
}

fn check_guidance(dim: usize, guidance: Option<Guidance<'_>>) -> Result<()> {
    if let Some(g) = guidance {
        g.selection.validate(dim)?;
        if g.y.len() != g.selection.len() {
            return Err(Error::LengthMismatch {
                expected: g.selection.len(),
                got: g.y.len(),
            });
        }
        if !(g.sigma_eta > 0.0) {
            return Err(invalid("sigma_eta must be positive"));
        }
    }
    Ok(())
}

/// Runs a full reverse pass from `z ∼ N(0, σ_max² I)` and returns the
/// terminal estimate with per-step traces.
pub fn run_chain<D: Denoiser + ?Sized>(
    denoiser: &D,
    config: &SamplerConfig,
    guidance: Option<Guidance<'_>>,
    seed: u64,
) -> Result<(Field, Vec<StepTrace>)> {
    config.validate()?;
    check_guidance(denoiser.dim(), guidance)?;
    let schedule = config.schedule()?;
    let sig = schedule.sigmas();
    let mut state = ChainState::init(denoiser.dim(), schedule.sigma_max(), seed);
    let mut trace = Vec::with_capacity(schedule.n_steps());
    for k in 0..schedule.n_steps() {
        state = reverse_step(denoiser, &state, sig[k], sig[k + 1], guidance, config.alpha(sig[k]), config.heun)?;
        let residual_norm = guidance.map_or(0.0, |g| (2.0 * -state.log_like).sqrt() * g.sigma_eta);
        trace.push(StepTrace {
            sigma: sig[k],
            residual_norm,
        });
    }
    Ok((state.z, trace))
}

/// Draws an (approximate) prior sample by the unguided reverse pass.
pub fn sample_unconditional<D: Denoiser + ?Sized>(
    denoiser: &D,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Field> {
    run_chain(denoiser, config, None, seed).map(|(x, _)| x)
}

/// Guided reverse pass. With `GuidanceMode::None` the readings are ignored.
pub fn dps_reconstruct<D: Denoiser + ?Sized>(
    denoiser: &D,
    selection: &SensorSelection,
    y: &Field,
    seed: u64,
    config: &SamplerConfig,
) -> Result<Field> {
    dps_reconstruct_traced(denoiser, selection, y, seed, config).map(|(x, _)| x)
}

pub fn dps_reconstruct_traced<D: Denoiser + ?Sized>(
    denoiser: &D,
    selection: &SensorSelection,
    y: &Field,
    seed: u64,
    config: &SamplerConfig,
) -> Result<(Field, Vec<StepTrace>)> {
    let guidance = Guidance {
        selection,
        y,
        sigma_eta: config.sigma_eta,
    };
    check_guidance(denoiser.dim(), Some(guidance))?;
    let guidance = match config.guidance {
        GuidanceMode::Dps => Some(guidance),
        GuidanceMode::None => None,
    };
    run_chain(denoiser, config, guidance, seed)
}

/// `n_chains` independent reconstructions; chain `i` uses seed
/// `derive_seed(seed, i)`. The output order is independent of threading.
pub fn dps_ensemble<D: Denoiser + ?Sized>(
    denoiser: &D,
    selection: &SensorSelection,
    y: &Field,
    seed: u64,
    config: &SamplerConfig,
    n_chains: usize,
) -> Result<Vec<Field>> {
    (0..n_chains as u64)
        .into_par_iter()
        .map(|i| dps_reconstruct(denoiser, selection, y, derive_seed(seed, i), config))
        .collect()
}

/// Exact posterior of `x ∼ N(μ₀, diag(var₀))` given `y = S x + η`,
/// `η ∼ N(0, σ_η² I)`. Returns the mean and the marginal variances.
pub fn gaussian_posterior_oracle(
    mean0: &Field,
    var0: &[f64],
    selection: &SensorSelection,
    y: &Field,
    sigma_eta: f64,
) -> Result<(Field, Vec<f64>)> {
    let n = mean0.len();
    if var0.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: var0.len(),
        });
    }
    if var0.iter().any(|v| !(*v > 0.0)) || !(sigma_eta > 0.0) {
        return Err(invalid("prior variances and sigma_eta must be positive"));
    }
    selection.validate(n)?;
    let m = selection.len();
    if y.len() != m {
        return Err(Error::LengthMismatch {
            expected: m,
            got: y.len(),
        });
    }
    let idx = selection.indices();
    // Σ₀Sᵀ is N × m; SΣ₀Sᵀ + σ_η² I is m × m.
    let cross = DMatrix::from_fn(n, m, |i, k| if i == idx[k] { var0[i] } else { 0.0 });
    let gram = DMatrix::from_fn(m, m, |a, b| {
        let prior = if a == b { var0[idx[a]] } else { 0.0 };
        prior + if a == b { sigma_eta * sigma_eta } else { 0.0 }
    });
    let chol = gram
        .cholesky()
        .ok_or_else(|| invalid("innovation covariance is not positive definite"))?;
    let innov = DVector::from_fn(m, |k, _| y[k] - mean0[idx[k]]);
    let mean = mean0 + &cross * chol.solve(&innov);
    let gain = chol.solve(&cross.transpose());
    let var = (0..n)
        .map(|i| var0[i] - (cross.row(i) * gain.column(i))[(0, 0)])
        .collect();
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GaussianMixturePrior;

    #[test]
    fn schedule_endpoints() {
        let s = karras_schedule(50, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(s.sigmas()[0], 80.0);
        assert_eq!(s.sigmas()[49], 0.002);
        assert_eq!(s.sigmas()[50], 0.0);
        assert_eq!(s.n_steps(), 50);
        assert!(s.sigmas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rho_one_is_linear() {
        let s = karras_schedule(5, 1.0, 9.0, 1.0).unwrap();
        let expected = [9.0, 7.0, 5.0, 3.0, 1.0, 0.0];
        for (a, b) in s.sigmas().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(karras_schedule(1, 0.1, 1.0, 7.0).is_err());
        assert!(karras_schedule(10, 1.0, 1.0, 7.0).is_err());
        assert!(karras_schedule(10, 0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn weight_is_linear_and_clipped() {
        assert_eq!(guidance_weight(0.1, 0.1, 10.0), 1.0);
        assert_eq!(guidance_weight(0.05, 0.1, 10.0), 0.5);
        assert_eq!(guidance_weight(80.0, 0.1, 10.0), 10.0);
    }

    #[test]
    fn guidance_step_flow_and_cap() {
        // α = 2, Δσ/σ = 0.25: flow weight 1, cap 4 / 1.
        assert!((guidance_step(2.0, 1.0, 0.75, 4.0, 1.0) - 1.0).abs() < 1e-15);
        // cap ‖r‖²/‖g‖² = 0.5 binds.
        assert!((guidance_step(2.0, 1.0, 0.75, 2.0, 2.0) - 0.5).abs() < 1e-15);
        assert_eq!(guidance_step(2.0, 1.0, 0.75, 0.0, 0.0), 0.0);
        assert_eq!(guidance_step(0.0, 1.0, 0.75, 1.0, 1.0), 0.0);
    }

    #[test]
    fn single_gaussian_step_follows_posterior_flow() {
        // One Euler step on N(0, v) with every node observed: the exact
        // posterior flow moves z by (Δσ/σ)(E[x₀ | z, y] − D).
        let (v, eta, sigma, next_sigma) = (0.5, 0.3, 0.2, 0.19);
        let p = GaussianMixturePrior::gaussian(vec![0.0; 2], vec![v; 2]).unwrap();
        let sel = SensorSelection::free(vec![0, 1], 2).unwrap();
        let y = Field::from_vec(vec![0.4, -0.1]);
        let g = Guidance {
            selection: &sel,
            y: &y,
            sigma_eta: eta,
        };
        let st = ChainState {
            z: Field::from_vec(vec![0.3, 0.2]),
            sigma_index: 0,
            log_like: 0.0,
            x0_hat: Field::zeros(2),
        };
        let alpha = sigma / eta;
        let guided = reverse_step(&p, &st, sigma, next_sigma, Some(g), alpha, false).unwrap();
        let free = reverse_step(&p, &st, sigma, next_sigma, None, alpha, false).unwrap();
        let c = v / (v + sigma * sigma);
        let tau2 = sigma * sigma * c;
        let q = (sigma - next_sigma) / sigma;
        for j in 0..2 {
            let d = c * st.z[j];
            let post = d + tau2 / (tau2 + eta * eta) * (y[j] - d);
            assert!((guided.z[j] - free.z[j] - q * (post - d)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_jacobian_step_stops_short_of_readings() {
        // J ≈ I at σ ≪ 1: however large α_k, the step moves toward the
        // readings by τ²/(τ² + σ_η²) and never past them.
        let p = GaussianMixturePrior::gaussian(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let sel = SensorSelection::free(vec![0, 2], 3).unwrap();
        let y = Field::from_vec(vec![1.0, -1.0]);
        let g = Guidance {
            selection: &sel,
            y: &y,
            sigma_eta: 1e-3,
        };
        let st = ChainState {
            z: Field::zeros(3),
            sigma_index: 0,
            log_like: 0.0,
            x0_hat: Field::zeros(3),
        };
        let sigma: f64 = 2e-3;
        let tau2 = sigma * sigma / (1.0 + sigma * sigma);
        let frac = tau2 / (tau2 + 1e-6);
        for alpha in [10.0, 1e6] {
            let next = reverse_step(&p, &st, sigma, 0.0, Some(g), alpha, false).unwrap();
            assert!((next.z[0] - frac).abs() < 1e-9 && (next.z[2] + frac).abs() < 1e-9);
            assert!(next.z[1].abs() < 1e-12);
        }
    }

    #[test]
    fn zero_alpha_ignores_measurements() {
        let p = GaussianMixturePrior::gaussian(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let sel = SensorSelection::free(vec![1], 3).unwrap();
        let st = ChainState::init(3, 5.0, 1);
        let a = reverse_step(&p, &st, 5.0, 3.0, None, 0.0, true).unwrap();
        for y in [-4.0, 7.0] {
            let y = DVector::from_element(1, y);
            let g = Guidance {
                selection: &sel,
                y: &y,
                sigma_eta: 0.1,
            };
            let b = reverse_step(&p, &st, 5.0, 3.0, Some(g), 0.0, true).unwrap();
            assert_eq!(a.z, b.z);
        }
    }

    #[test]
    fn final_step_lands_on_denoised_state() {
        let p = GaussianMixturePrior::gaussian(vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        let st = ChainState::init(2, 0.3, 7);
        let next = reverse_step(&p, &st, 0.3, 0.0, None, 0.0, true).unwrap();
        assert!((next.z - p.denoise(&st.z, 0.3)).amax() < 1e-14);
    }

    #[test]
    fn oracle_hand_value() {
        let sel = SensorSelection::free(vec![0], 2).unwrap();
        let (mean, var) = gaussian_posterior_oracle(
            &DVector::zeros(2),
            &[1.0, 1.0],
            &sel,
            &DVector::from_element(1, 2.0),
            1.0,
        )
        .unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-15 && mean[1] == 0.0);
        assert!((var[0] - 0.5).abs() < 1e-15 && var[1] == 1.0);
    }

    #[test]
    fn oracle_limits() {
        let sel = SensorSelection::free(vec![1, 2], 3).unwrap();
        let mu = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let y = DVector::from_vec(vec![3.0, -3.0]);
        let (m, _) = gaussian_posterior_oracle(&mu, &[1.0; 3], &sel, &y, 1e8).unwrap();
        assert!((m - &mu).amax() < 1e-12);
        let (m, _) = gaussian_posterior_oracle(&mu, &[1e-14; 3], &sel, &y, 0.1).unwrap();
        assert!((m - &mu).amax() < 1e-10);
    }

    #[test]
    fn reconstruct_checks_lengths() {
        let p = GaussianMixturePrior::gaussian(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let sel = SensorSelection::free(vec![0, 1], 3).unwrap();
        let y = DVector::zeros(3);
        assert!(dps_reconstruct(&p, &sel, &y, 0, &SamplerConfig::default()).is_err());
    }
}
