use gpo_core::exact_gp::{
    cholesky_solve_oracle, init_train, nll_with_gram_grad, ExactGpError, ExactPosterior, GpProblem, InitConfig,
};
use gpo_core::grid::{Boundary, GridFunction};
use gpo_core::kernel::{gram_full, BaseKernel, KernelHyper, LatentCache};
use gpo_core::tensor::Tensor;
use gpo_core::wno::{WnoConfig, WnoParams};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_psd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / n as f64
}

fn small_config() -> WnoConfig {
    WnoConfig {
        width: 4,
        layers: 2,
        levels: 2,
        latent_channels: 2,
        ..WnoConfig::default()
    }
}

/// Smooth random inputs and a nonlinear map as targets, 1D periodic.
fn toy_set(n: usize, points: usize, seed: u64) -> (Vec<GridFunction>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    let mut rows = Vec::new();
    for _ in 0..n {
        let (a, b, p): (f64, f64, f64) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..6.0),
        );
        let f = GridFunction::from_fn(vec![points], vec![1.0], Boundary::Periodic, |x| {
            a * (std::f64::consts::TAU * x[0] + p).sin() + b * (2.0 * std::f64::consts::TAU * x[0]).cos()
        })
        .unwrap();
        rows.extend(f.values().iter().map(|v| v * v - 0.5 * v));
        inputs.push(f);
    }
    (inputs, DMatrix::from_row_slice(n, points, &rows))
}

#[test]
fn single_point_nll_is_gaussian_log_density() {
    for (s2, noise) in [(1.0, 0.1), (0.3, 2.0)] {
        let k = DMatrix::from_element(1, 1, s2);
        let (v, _) = nll_with_gram_grad(&k, noise, &DMatrix::zeros(1, 1)).unwrap();
        let want = 0.5 * (std::f64::consts::TAU * (s2 + noise)).ln();
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    }
}

#[test]
fn noise_sweep_on_pure_noise_data_has_minimum_at_sample_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u = DMatrix::from_fn(50, 4, |_, _| 1.5 * rng.sample::<f64, _>(StandardNormal));
    let var = u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64;
    let k = DMatrix::zeros(50, 50);
    let nll = |s: f64| nll_with_gram_grad(&k, s, &u).unwrap().0;
    let mut s = var / 16.0;
    let mut last = nll(s);
    while 2.0 * s <= var {
        s *= 2.0;
        let cur = nll(s);
        assert!(cur < last);
        last = cur;
    }
    assert!(nll(var) < nll(var * 0.9) && nll(var) < nll(var * 1.1));
}

#[test]
fn oracle_solves_closed_form_systems() {
    let u = DMatrix::from_fn(5, 2, |i, j| (i as f64 - 2.0) * (j as f64 + 1.0));
    let a = cholesky_solve_oracle(&DMatrix::identity(5, 5), 0.0, &u).unwrap();
    assert!((a - &u).norm() < 1e-12);
    let a = cholesky_solve_oracle(&(DMatrix::identity(5, 5) * 2.0), 1.0, &u).unwrap();
    assert!((a - &u / 3.0).norm() < 1e-12);
}

#[test]
fn oracle_residual_on_random_psd() {
    let k = random_psd(64, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = DMatrix::from_fn(64, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    for noise in [1.0, 0.1, 1e-3] {
        let a = cholesky_solve_oracle(&k, noise, &u).unwrap();
        let kn = &k + DMatrix::identity(64, 64) * noise;
        assert!((kn * a - &u).norm() / u.norm() < 1e-10);
    }
}

#[test]
fn factor_reproduces_noisy_gram() {
    let k = random_psd(32, 3);
    let post = ExactPosterior::fit(&k, 0.2, &DMatrix::zeros(32, 1)).unwrap();
    let l = post.lower();
    let kn = &k + DMatrix::identity(32, 32) * 0.2;
    assert!((&l * l.transpose() - &kn).norm() / kn.norm() < 1e-8);
}

#[test]
fn indefinite_gram_reports_jitter_error() {
    let mut k = DMatrix::identity(4, 4);
    k[(0, 0)] = -5.0;
    let err = cholesky_solve_oracle(&k, 0.0, &DMatrix::zeros(4, 1)).unwrap_err();
    assert!(matches!(err, ExactGpError::Cholesky { .. }));
}

#[test]
fn vanishing_noise_interpolates_training_targets() {
    let (inputs, u) = toy_set(8, 32, 4);
    let cfg = small_config();
    let params = WnoParams::init(&cfg, 1, &[32], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cache = LatentCache::build(&inputs, &params, &cfg, None, "toy".into(), 8).unwrap();
    let h = KernelHyper::new(0.05, 1.0, 1e-10);
    let k = gram_full(&cache, BaseKernel::Matern52, &h);
    let post = ExactPosterior::fit(&k, h.noise(), &u).unwrap();
    let pred = post.predict_mean(&k);
    assert!((pred - &u).norm() / u.norm() < 1e-6);
}

fn fd_check(kernel: BaseKernel) {
    let (inputs, u) = toy_set(8, 32, 5);
    let refs: Vec<&GridFunction> = inputs.iter().collect();
    let cfg = small_config();
    let params = WnoParams::init(&cfg, 1, &[32], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let problem = GpProblem {
        inputs: &refs,
        targets: &u,
        config: &cfg,
        kernel,
    };
    let h0 = KernelHyper::new(0.3, 1.2, 0.05);
    let eval = problem.nll(&params, &h0, true, 3).unwrap();
    let value = |p: &WnoParams, h: &KernelHyper| problem.nll(p, h, false, 8).unwrap().value;
    let eps = 1e-4;
    // Fourth-order central difference.
    let stencil = |f: &dyn Fn(f64) -> f64| (f(-2.0 * eps) - 8.0 * f(-eps) + 8.0 * f(eps) - f(2.0 * eps)) / (12.0 * eps);
    let check = |fd: f64, an: f64, what: &str| {
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
        assert!(rel < 1e-4, "{kernel} {what}: fd {fd} analytic {an}");
    };
    let fields: [fn(&mut KernelHyper) -> &mut f64; 3] = [
        |h| &mut h.log_lengthscale,
        |h| &mut h.log_variance,
        |h| &mut h.log_noise,
    ];
    let grads = [
        eval.hyper.log_lengthscale,
        eval.hyper.log_variance,
        eval.hyper.log_noise,
    ];
    for (f, g) in fields.iter().zip(grads) {
        let at = |delta: f64| {
            let mut h = h0;
            *f(&mut h) += delta;
            value(&params, &h)
        };
        check(stencil(&at), g, "hyper");
    }
    let pg = eval.params.unwrap();
    for (t, g) in pg.iter().enumerate() {
        let len = g.len();
        for i in (0..len).step_by((len / 5).max(1)) {
            let bump = |delta: f64| {
                let mut p = params.clone();
                let tensor = p.tensors_mut().swap_remove(t);
                let mut data = tensor.data().to_vec();
                data[i] += delta;
                *tensor = Tensor::new(tensor.shape().to_vec(), data).unwrap();
                value(&p, &h0)
            };
            check(stencil(&bump), g.data()[i], &format!("param {t}[{i}]"));
        }
    }
}

#[test]
fn nll_gradients_match_finite_differences_matern() {
    fd_check(BaseKernel::Matern52);
}

#[test]
fn nll_gradients_match_finite_differences_rbf() {
    fd_check(BaseKernel::Rbf);
}

#[test]
fn init_train_rejects_empty_subset() {
    let (inputs, u) = toy_set(4, 32, 6);
    let cfg = small_config();
    let params = WnoParams::init(&cfg, 1, &[32], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let init = InitConfig {
        s_init: 0,
        ..InitConfig::default()
    };
    assert!(matches!(
        init_train(&inputs, &u, &cfg, BaseKernel::Matern52, params, &init),
        Err(ExactGpError::Config(_))
    ));
}

#[test]
fn init_train_decreases_nll_and_is_deterministic() {
    let (inputs, u) = toy_set(24, 32, 8);
    let cfg = small_config();
    let params = WnoParams::init(&cfg, 1, &[32], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let init = InitConfig {
        s_init: 16,
        epochs: 30,
        lr: 0.05,
        seed: 3,
        ..InitConfig::default()
    };
    let a = init_train(&inputs, &u, &cfg, BaseKernel::Matern52, params.clone(), &init).unwrap();
    assert_eq!(a.trace.len(), 31);
    assert!(a.trace.iter().all(|r| r.loss.is_finite() && r.grad_norm.is_finite()));
    assert!(a.trace.last().unwrap().loss <= a.trace[0].loss);
    assert!(a.hyper.variance() <= 2.0 + 1e-12 && a.hyper.noise() >= 1e-3 - 1e-15);
    let b = init_train(&inputs, &u, &cfg, BaseKernel::Matern52, params, &init).unwrap();
    assert_eq!(a.hyper, b.hyper);
    assert_eq!(a.params, b.params);
    assert_eq!(a.subset, b.subset);
}
