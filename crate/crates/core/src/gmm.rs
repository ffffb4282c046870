//! Diagonal Gaussian-mixture prior with an exact Tweedie denoiser.
//!
//! Under the variance-exploding forward process `x_σ = x₀ + σ ε` the noised
//! marginal of a mixture is again a mixture with variances `var_k + σ²`,
//! so the MMSE denoiser, its Jacobian and the noised score are closed form.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{select, Field, SensorSelection, SnapshotSet};
use crate::rng::{rng_from_seed, standard_normal};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A denoiser `D(x, σ) ≈ E[x₀ | x_σ = x]` with Jacobian-transpose action.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x: &Field, sigma: f64) -> Field;

    /// `(∂D/∂x)ᵀ u` at `(x, σ)`, `σ > 0`.
    fn denoise_vjp(&self, x: &Field, sigma: f64, u: &Field) -> Field;

    /// Denoised state together with `(∂D/∂x)ᵀ r(D)` for a residual map `r`.
    fn denoise_and_pullback(
        &self,
        x: &Field,
        sigma: f64,
        residual: &dyn Fn(&Field) -> Field,
    ) -> (Field, Field) {
        let d = self.denoise(x, sigma);
        let r = residual(&d);
        let g = self.denoise_vjp(x, sigma, &r);
        (d, g)
    }

    /// Per-node posterior variance of `x₀` given `x` that is not explained by
    /// the choice of mode, if the denoiser can provide it.
    fn within_mode_variance(&self, _x: &Field, _sigma: f64) -> Option<Field> {
        None
    }
}

/// JSON layout of a prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

/// `Σ_k w_k N(mean_k, diag(var_k))` on `R^N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorSpec", into = "PriorSpec")]
pub struct GaussianMixturePrior {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    dim: usize,
}

impl TryFrom<PriorSpec> for GaussianMixturePrior {
    type Error = crate::error::Error;

    fn try_from(s: PriorSpec) -> Result<Self> {
        Self::new(s.weights, s.means, s.variances)
    }
}

impl From<GaussianMixturePrior> for PriorSpec {
    fn from(p: GaussianMixturePrior) -> Self {
        PriorSpec {
            weights: p.weights,
            means: p.means,
            variances: p.variances,
        }
    }
}

/// Per-component quantities at one query point.
struct Posterior {
    /// Responsibilities γ_k.
    gamma: Vec<f64>,
    /// Noised variances `var_k + σ²`, component-major.
    s: Vec<Vec<f64>>,
    log_density: f64,
}

impl GaussianMixturePrior {
    /// Weights are renormalized when they sum to 1 within 1e-9.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(invalid("mixture needs at least one component"));
        }
        if means.len() != k || variances.len() != k {
            return Err(invalid("weights, means and variances disagree on K"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("mixture dimension must be positive"));
        }
        if means.iter().chain(&variances).any(|v| v.len() != dim) {
            return Err(invalid("component vectors disagree on dimension"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("weights sum to {total}, expected 1")));
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(invalid("means must be finite"));
        }
        if variances.iter().flatten().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(invalid("variances must be finite and positive"));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            means,
            variances,
            dim,
        })
    }

    /// A single Gaussian `N(mean, diag(var))`.
    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![var])
    }

    /// Equal-weight mixture centred on every snapshot with isotropic
    /// variance `bandwidth²`.
    pub fn from_snapshots(snapshots: &SnapshotSet, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(invalid("bandwidth must be positive and finite"));
        }
        let k = snapshots.n_snapshots();
        let n = snapshots.n_nodes();
        let means = snapshots
            .data()
            .column_iter()
            .map(|c| c.iter().copied().collect())
            .collect();
        Self::new(
            vec![1.0 / k as f64; k],
            means,
            vec![vec![bandwidth * bandwidth; n]; k],
        )
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// `Σ_k w_k mean_k`.
    pub fn mean(&self) -> Field {
        let mut out = DVector::zeros(self.dim);
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Draws `x₀ ∼ P`.
    pub fn sample(&self, seed: u64) -> Field {
        let mut rng = rng_from_seed(seed);
        let k = if self.n_components() == 1 {
            0
        } else {
            WeightedIndex::new(&self.weights)
                .expect("validated weights")
                .sample(&mut rng)
        };
        DVector::from_iterator(
            self.dim,
            self.means[k]
                .iter()
                .zip(&self.variances[k])
                .map(|(m, v)| m + v.sqrt() * standard_normal(&mut rng)),
        )
    }

    fn check(&self, x: &Field, sigma: f64) {
        assert_eq!(x.len(), self.dim, "query dimension mismatch");
        assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be finite and nonnegative");
    }

    fn posterior(&self, x: &Field, sigma: f64) -> Posterior {
        let s2 = sigma * sigma;
        let mut logs = Vec::with_capacity(self.n_components());
        let mut s_all = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let s: Vec<f64> = self.variances[k].iter().map(|v| v + s2).collect();
            let mut acc = 0.0;
            for ((xj, mj), sj) in x.iter().zip(&self.means[k]).zip(&s) {
                let d = xj - mj;
                acc += d * d / sj + sj.ln();
            }
            logs.push(self.log_weights[k] - 0.5 * (acc + self.dim as f64 * LN_2PI));
            s_all.push(s);
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut gamma: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = gamma.iter().sum();
        gamma.iter_mut().for_each(|g| *g /= z);
        Posterior {
            gamma,
            s: s_all,
            log_density: max + z.ln(),
        }
    }

    /// Responsibilities `γ_k(x)` under the noised mixture.
    pub fn responsibilities(&self, x: &Field, sigma: f64) -> Vec<f64> {
        self.check(x, sigma);
        self.posterior(x, sigma).gamma
    }

    /// `log p_σ(x)` for `p_σ = Σ_k w_k N(mean_k, diag(var_k) + σ²I)`.
    pub fn log_density_noised(&self, x: &Field, sigma: f64) -> f64 {
        self.check(x, sigma);
        self.posterior(x, sigma).log_density
    }

    /// `∇_x log p_σ(x)`.
    pub fn score(&self, x: &Field, sigma: f64) -> Field {
        self.check(x, sigma);
        let post = self.posterior(x, sigma);
        let mut out = DVector::zeros(self.dim);
        for (k, g) in post.gamma.iter().enumerate().filter(|(_, g)| **g > 0.0) {
            for j in 0..self.dim {
                out[j] -= g * (x[j] - self.means[k][j]) / post.s[k][j];
            }
        }
        out
    }

    /// Component posterior means `(x var_k + σ² mean_k) / (var_k + σ²)`.
    fn component_means(&self, x: &Field, sigma: f64, post: &Posterior) -> Vec<Field> {
        let s2 = sigma * sigma;
        (0..self.n_components())
            .map(|k| {
                DVector::from_fn(self.dim, |j, _| {
                    (x[j] * self.variances[k][j] + s2 * self.means[k][j]) / post.s[k][j]
                })
            })
            .collect()
    }

    fn combine(&self, post: &Posterior, parts: &[Field]) -> Field {
        let mut out = DVector::zeros(self.dim);
        for (g, m) in post.gamma.iter().zip(parts) {
            if *g > 0.0 {
                out.axpy(*g, m, 1.0);
            }
        }
        out
    }

    /// Score differences `g_k − ḡ` with `g_k = −(x − mean_k)/(var_k + σ²)`.
    fn centered_scores(&self, x: &Field, post: &Posterior) -> Vec<Field> {
        let g: Vec<Field> = (0..self.n_components())
            .map(|k| DVector::from_fn(self.dim, |j, _| -(x[j] - self.means[k][j]) / post.s[k][j]))
            .collect();
        let gbar = self.combine(post, &g);
        g.into_iter().map(|gk| gk - &gbar).collect()
    }

    /// `(∂D/∂x) v`.
    pub fn denoiser_jvp(&self, x: &Field, sigma: f64, v: &Field) -> Field {
        self.jacobian_action(x, sigma, v, false)
    }

    fn jacobian_action(&self, x: &Field, sigma: f64, v: &Field, transpose: bool) -> Field {
        self.check(x, sigma);
        assert!(sigma > 0.0, "Jacobian action needs sigma > 0");
        assert_eq!(v.len(), self.dim, "direction dimension mismatch");
        let post = self.posterior(x, sigma);
        let m = self.component_means(x, sigma, &post);
        let d = self.combine(&post, &m);
        let dg = self.centered_scores(x, &post);
        let mut out = DVector::zeros(self.dim);
        for k in (0..self.n_components()).filter(|&k| post.gamma[k] > 0.0) {
            let g = post.gamma[k];
            for j in 0..self.dim {
                out[j] += g * self.variances[k][j] / post.s[k][j] * v[j];
            }
            // Σ_k γ_k (g_k − ḡ) = 0, so centring m_k at D only improves conditioning.
            let mk = &m[k] - &d;
            if transpose {
                out.axpy(g * mk.dot(v), &dg[k], 1.0);
            } else {
                out.axpy(g * dg[k].dot(v), &mk, 1.0);
            }
        }
        out
    }

    /// `∇_x Φ(D(x, σ), y)` with `Φ(x₀, y) = ½ σ_η⁻² ‖S x₀ − y‖²`.
    pub fn guidance_gradient(
        &self,
        x: &Field,
        sigma: f64,
        selection: &SensorSelection,
        y: &Field,
        sigma_eta: f64,
    ) -> Result<Field> {
        guidance_gradient(self, x, sigma, selection, y, sigma_eta).map(|(_, g)| g)
    }
}

impl Denoiser for GaussianMixturePrior {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Exact posterior mean; the identity at `σ = 0`.
    fn denoise(&self, x: &Field, sigma: f64) -> Field {
        self.check(x, sigma);
        if sigma == 0.0 {
            return x.clone();
        }
        let post = self.posterior(x, sigma);
        let m = self.component_means(x, sigma, &post);
        self.combine(&post, &m)
    }

    fn denoise_vjp(&self, x: &Field, sigma: f64, u: &Field) -> Field {
        self.jacobian_action(x, sigma, u, true)
    }

    /// `Σ_k γ_k σ² var_k / (var_k + σ²)`.
    fn within_mode_variance(&self, x: &Field, sigma: f64) -> Option<Field> {
        self.check(x, sigma);
        let s2 = sigma * sigma;
        let post = self.posterior(x, sigma);
        let mut out = DVector::zeros(self.dim);
        for (k, g) in post.gamma.iter().enumerate().filter(|(_, g)| **g > 0.0) {
            for j in 0..self.dim {
                out[j] += g * s2 * self.variances[k][j] / post.s[k][j];
            }
        }
        Some(out)
    }
}

/// Measurement misfit `Φ(x₀, y) = ½ σ_η⁻² ‖S x₀ − y‖²`.
pub fn misfit(x0: &Field, selection: &SensorSelection, y: &Field, sigma_eta: f64) -> Result<f64> {
    let r = select(selection, x0)? - y;
    Ok(0.5 * r.norm_squared() / (sigma_eta * sigma_eta))
}

/// Denoised state and `∇_x Φ(D(x, σ), y) = σ_η⁻² Jᵀ Sᵀ (S D − y)`.
pub fn guidance_gradient<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &Field,
    sigma: f64,
    selection: &SensorSelection,
    y: &Field,
    sigma_eta: f64,
) -> Result<(Field, Field)> {
    if y.len() != selection.len() {
        return Err(crate::error::Error::LengthMismatch {
            expected: selection.len(),
            got: y.len(),
        });
    }
    if !(sigma_eta > 0.0) {
        return Err(invalid("sigma_eta must be positive"));
    }
    selection.validate(denoiser.dim())?;
    let scale = 1.0 / (sigma_eta * sigma_eta);
    let residual = |d: &Field| {
        let mut r = DVector::zeros(d.len());
        for (k, &j) in selection.indices().iter().enumerate() {
            r[j] = scale * (d[j] - y[k]);
        }
        r
    };
    Ok(denoiser.denoise_and_pullback(x, sigma, &residual))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Field {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = GaussianMixturePrior::gaussian(vec![0.0], vec![1.0]).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((p.log_density_noised(&v(&[0.0]), 0.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_components_collapse() {
        let one = GaussianMixturePrior::gaussian(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let three = GaussianMixturePrior::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![1.0, -2.0]; 3],
            vec![vec![0.5, 2.0]; 3],
        )
        .unwrap();
        let x = v(&[0.3, 0.1]);
        for s in [0.0, 0.4, 3.0] {
            assert!((one.log_density_noised(&x, s) - three.log_density_noised(&x, s)).abs() < 1e-12);
            assert!((one.denoise(&x, s) - three.denoise(&x, s)).amax() < 1e-12);
        }
    }

    #[test]
    fn shrinkage_hand_value() {
        let p = GaussianMixturePrior::gaussian(vec![0.0], vec![1.0]).unwrap();
        assert!((p.denoise(&v(&[2.0]), 1.0)[0] - 1.0).abs() < 1e-15);
        assert_eq!(p.denoise(&v(&[2.0]), 0.0), v(&[2.0]));
    }

    #[test]
    fn large_sigma_returns_prior_mean() {
        let p = GaussianMixturePrior::new(
            vec![0.3, 0.7],
            vec![vec![1.0, 0.0, -1.0], vec![0.0, 1.0, 0.5]],
            vec![vec![1.0; 3], vec![0.5; 3]],
        )
        .unwrap();
        let x = v(&[0.4, -0.9, 1.3]);
        let d = p.denoise(&x, 1e3);
        assert!((d - p.mean()).norm() <= 1e-3 * x.norm());
    }

    #[test]
    fn single_gaussian_jacobian_is_diagonal() {
        let p = GaussianMixturePrior::gaussian(vec![0.5, -1.0], vec![2.0, 0.5]).unwrap();
        let x = v(&[1.0, 3.0]);
        let sigma = 0.7;
        let j0 = p.denoiser_jvp(&x, sigma, &v(&[1.0, 0.0]));
        assert!((j0[0] - 2.0 / (2.0 + 0.49)).abs() < 1e-15 && j0[1] == 0.0);
        let u = v(&[0.3, -1.1]);
        let w = v(&[-0.4, 0.8]);
        let lhs = u.dot(&p.denoiser_jvp(&x, sigma, &w));
        let rhs = p.denoiser_jvp(&x, sigma, &u).dot(&w);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn scalar_guidance_chain_rule() {
        let p = GaussianMixturePrior::gaussian(vec![0.2], vec![1.5]).unwrap();
        let sel = SensorSelection::free(vec![0], 1).unwrap();
        let (x, sigma, eta) = (v(&[0.9]), 0.8, 0.1);
        let y = v(&[0.1]);
        let g = p.guidance_gradient(&x, sigma, &sel, &y, eta).unwrap();
        let d = p.denoise(&x, sigma);
        let expected = 1.5 / (1.5 + 0.64) * (d[0] - y[0]) / (eta * eta);
        assert!((g[0] - expected).abs() < 1e-12 * expected.abs());

        let at_rest = p.guidance_gradient(&x, sigma, &sel, &v(&[d[0]]), eta).unwrap();
        assert_eq!(at_rest[0], 0.0);
    }

    #[test]
    fn responsibilities_sum_to_one_far_from_data() {
        let p = GaussianMixturePrior::new(
            vec![0.5, 0.5],
            vec![vec![0.0], vec![1.0]],
            vec![vec![1e-4], vec![1e-4]],
        )
        .unwrap();
        let g = p.responsibilities(&v(&[1e3]), 0.0);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[1], 1.0);
        assert!(p.log_density_noised(&v(&[1e3]), 0.0).is_finite());
    }

    #[test]
    fn rejects_invalid_priors() {
        assert!(GaussianMixturePrior::new(vec![0.5, 0.6], vec![vec![0.0]; 2], vec![vec![1.0]; 2]).is_err());
        assert!(GaussianMixturePrior::gaussian(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianMixturePrior::new(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = GaussianMixturePrior::new(
            vec![0.25, 0.75],
            vec![vec![0.0, 1.0], vec![2.0, -1.0]],
            vec![vec![1.0, 0.5], vec![0.1, 0.2]],
        )
        .unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"weights\""));
        let back: GaussianMixturePrior = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let bad = r#"{"weights":[1.0],"means":[[0.0]],"variances":[[-1.0]]}"#;
        assert!(serde_json::from_str::<GaussianMixturePrior>(bad).is_err());
    }
}
