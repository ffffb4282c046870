use nalgebra::DVector;
use osp_core::dps::{
    dps_ensemble, dps_reconstruct, dps_reconstruct_traced, gaussian_posterior_oracle, karras_schedule,
    reverse_step, run_chain, sample_unconditional, ChainState, GuidanceMode, SamplerConfig,
};
use osp_core::gmm::{Denoiser, GaussianMixturePrior};
use osp_core::placement::random_place;
use osp_core::{measure, relative_l2, Field, SensorSelection};

fn heun_terminal(p: &GaussianMixturePrior, n_steps: usize, z0: f64) -> f64 {
    let sched = karras_schedule(n_steps, 0.002, 80.0, 7.0).unwrap();
    let s = sched.sigmas();
    let mut st = ChainState {
        z: DVector::from_element(1, z0),
        sigma_index: 0,
        log_like: 0.0,
        x0_hat: DVector::zeros(1),
    };
    for k in 0..sched.n_steps() {
        st = reverse_step(p, &st, s[k], s[k + 1], None, 0.0, true).unwrap();
    }
    st.z[0]
}

#[test]
fn heun_is_second_order() {
    let p = GaussianMixturePrior::gaussian(vec![0.5], vec![1.0]).unwrap();
    let z0 = 80.0 * 1.3;
    let reference = heun_terminal(&p, 320, z0);
    let e10 = (heun_terminal(&p, 10, z0) - reference).abs();
    let e20 = (heun_terminal(&p, 20, z0) - reference).abs();
    let e40 = (heun_terminal(&p, 40, z0) - reference).abs();
    let (r1, r2) = (e10 / e20, e20 / e40);
    assert!((3.0..5.5).contains(&r2), "ratios {r1} {r2}");
    // exact flow of a 1D Gaussian: z(σ) − μ ∝ sqrt(v + σ²)
    let exact = 0.5 + (z0 - 0.5) * (1.0 / (1.0 + 6400.0f64)).sqrt();
    assert!((reference - exact).abs() < 1e-3, "{reference} vs {exact}");
}

#[test]
fn unconditional_moments_single_gaussian() {
    let mean = vec![1.0, -2.0, 0.5];
    let var = vec![0.5, 2.0, 1.0];
    let p = GaussianMixturePrior::gaussian(mean.clone(), var.clone()).unwrap();
    let cfg = SamplerConfig {
        guidance: GuidanceMode::None,
        ..SamplerConfig::default()
    };
    let n = 10_000;
    let xs: Vec<Field> = (0..n).map(|s| sample_unconditional(&p, &cfg, s).unwrap()).collect();
    for j in 0..3 {
        let m = xs.iter().map(|x| x[j]).sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - mean[j]).abs() < 3.0 * (var[j] / n as f64).sqrt(), "mean {j}: {m}");
        assert!((v / var[j] - 1.0).abs() < 0.1, "var {j}: {v}");
    }
    assert_eq!(sample_unconditional(&p, &cfg, 3).unwrap(), sample_unconditional(&p, &cfg, 3).unwrap());
}

#[test]
fn unconditional_mode_frequencies() {
    let p = GaussianMixturePrior::new(
        vec![0.3, 0.7],
        vec![vec![-4.0, -4.0], vec![4.0, 4.0]],
        vec![vec![0.25; 2], vec![0.25; 2]],
    )
    .unwrap();
    let cfg = SamplerConfig {
        guidance: GuidanceMode::None,
        ..SamplerConfig::default()
    };
    let n = 4000;
    let low = (0..n)
        .filter(|&s| sample_unconditional(&p, &cfg, s).unwrap()[0] < 0.0)
        .count();
    let tol = 3.0 * (0.3f64 * 0.7 / n as f64).sqrt();
    assert!((low as f64 / n as f64 - 0.3).abs() < tol, "{low}");
}

#[test]
fn fully_observed_small_noise_recovers_truth() {
    let n = 12;
    let p = GaussianMixturePrior::gaussian(vec![1.0; n], vec![1.0; n]).unwrap();
    let sel = SensorSelection::free((0..n).collect(), n).unwrap();
    let cfg = SamplerConfig {
        sigma_eta: 1e-3,
        ..SamplerConfig::default()
    };
    for seed in 0..5 {
        let x_star = p.sample(100 + seed);
        let y = measure(&sel, &x_star, 1e-3, seed).unwrap();
        let x = dps_reconstruct(&p, &sel, &y, seed, &cfg).unwrap();
        assert!(relative_l2(&x, &x_star).unwrap() < 0.02);
    }
}

#[test]
fn empty_selection_matches_unconditional() {
    let p = GaussianMixturePrior::new(
        vec![0.5, 0.5],
        vec![vec![1.0, 0.0, 2.0], vec![-1.0, 1.0, 0.0]],
        vec![vec![0.3; 3], vec![0.6; 3]],
    )
    .unwrap();
    let sel = SensorSelection::free(vec![], 3).unwrap();
    let y = DVector::zeros(0);
    let cfg = SamplerConfig::default();
    let unguided = SamplerConfig {
        guidance: GuidanceMode::None,
        ..cfg.clone()
    };
    for seed in 0..5 {
        assert_eq!(
            dps_reconstruct(&p, &sel, &y, seed, &cfg).unwrap(),
            sample_unconditional(&p, &unguided, seed).unwrap()
        );
    }
}

#[test]
fn ensemble_mean_matches_conjugate_posterior() {
    let n = 16;
    let mean: Vec<f64> = (0..n)
        .map(|j| 1.0 + (-(j as f64 - 7.5).powi(2) / 8.0).exp())
        .collect();
    let var = vec![0.04; n];
    let p = GaussianMixturePrior::gaussian(mean.clone(), var.clone()).unwrap();
    let cfg = SamplerConfig::default();
    for trial in 0..3 {
        let sel = random_place(n, 4, trial).unwrap();
        let x_star = p.sample(500 + trial);
        let y = measure(&sel, &x_star, 0.1, trial).unwrap();
        let (post, _) =
            gaussian_posterior_oracle(&DVector::from_vec(mean.clone()), &var, &sel, &y, 0.1).unwrap();
        let chains = dps_ensemble(&p, &sel, &y, trial, &cfg, 64).unwrap();
        let avg = chains.iter().fold(DVector::zeros(n), |a, x| a + x) / 64.0;
        let err = relative_l2(&avg, &post).unwrap();
        assert!(err < 0.05, "trial {trial}: {err}");
    }
}

#[test]
fn ensemble_is_thread_independent() {
    let p = GaussianMixturePrior::gaussian(vec![0.0; 4], vec![1.0; 4]).unwrap();
    let sel = SensorSelection::free(vec![0, 3], 4).unwrap();
    let y = DVector::from_vec(vec![0.5, -0.5]);
    let cfg = SamplerConfig::default();
    let a = dps_ensemble(&p, &sel, &y, 11, &cfg, 8).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| dps_ensemble(&p, &sel, &y, 11, &cfg, 8).unwrap());
    assert_eq!(a, b);
}

#[test]
fn traced_residual_shrinks() {
    let n = 8;
    let p = GaussianMixturePrior::gaussian(vec![0.0; n], vec![1.0; n]).unwrap();
    let sel = SensorSelection::free(vec![1, 5], n).unwrap();
    let y = DVector::from_vec(vec![1.5, -1.0]);
    let (x, trace) = dps_reconstruct_traced(&p, &sel, &y, 2, &SamplerConfig::default()).unwrap();
    assert_eq!(trace.len(), 50);
    assert!(trace.last().unwrap().residual_norm < trace[0].residual_norm);
    let (x2, _) = run_chain(
        &p,
        &SamplerConfig::default(),
        Some(osp_core::dps::Guidance {
            selection: &sel,
            y: &y,
            sigma_eta: 0.1,
        }),
        2,
    )
    .unwrap();
    assert_eq!(x, x2);
    assert_eq!(p.dim(), n);
}

#[test]
fn guided_mean_shift_matches_posterior_shift() {
    // Projection of the ensemble-mean shift onto the exact posterior shift,
    // pooled over trials; plain likelihood guidance overshoots it.
    let n = 16;
    let mean = DVector::from_fn(n, |j, _| 1.0 + (-(j as f64 - 7.5).powi(2) / 8.0).exp());
    for v in [0.01, 0.25] {
        let var = vec![v; n];
        let p = GaussianMixturePrior::gaussian(mean.iter().copied().collect(), var.clone()).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..5 {
            let sel = random_place(n, 4, t).unwrap();
            let y = measure(&sel, &p.sample(500 + t), 0.1, t).unwrap();
            let (post, _) = gaussian_posterior_oracle(&mean, &var, &sel, &y, 0.1).unwrap();
            let chains = dps_ensemble(&p, &sel, &y, t, &SamplerConfig::default(), 64).unwrap();
            let avg = chains.iter().fold(DVector::zeros(n), |a, x| a + x) / 64.0;
            let exact = &post - &mean;
            num += (&avg - &mean).dot(&exact);
            den += exact.norm_squared();
        }
        let ratio = num / den;
        assert!((ratio - 1.0).abs() < 0.1, "variance {v}: shift ratio {ratio}");
    }
}
