//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{model_for, posterior_variance, rel_norm};
use gpo_core::config::{ExperimentConfig, SweepAxis};
use gpo_core::data::{make_dataset, OperatorDataset, Pde};
use gpo_core::exact_gp::{cholesky_solve_oracle, median_distance, GpProblem};
use gpo_core::grid::GridFunction;
use gpo_core::kernel::{gram_full, BaseKernel, DenseRows, KernelHyper, LatentCache};
use gpo_core::pipeline::{evaluate, slope, sweep, sweep_summary, train, EvalSettings, Evaluation};
use gpo_core::posterior::{pathwise_sample, Normalizer, SampleSolver};
use gpo_core::sdd::{sdd_solve, SddConfig};
use gpo_core::tensor::Tensor;
use gpo_core::wavelet::{dwt_packed, idwt_packed, WaveletBasis};
use gpo_core::wno::{WnoConfig, WnoParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn run(id: usize, title: &str, limit: Duration, check: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = check();
    let took = start.elapsed();
    let in_time = took <= limit;
    let pass = v.pass && in_time;
    println!(
        "criterion {id} [{}] {title}: {} ({:.1} s of {} s{})",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        took.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    pass
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Burgers inputs through an untrained preset operator, lengthscale at the
/// median latent distance.
fn sdd_matches_cholesky_on_burgers_latents() -> Verdict {
    let c = ExperimentConfig::preset(Pde::Burgers);
    let data = make_dataset(Pde::Burgers, 256, c.resolution, c.data_seed).unwrap();
    let wno = c.wno_config();
    let params = WnoParams::init(&wno, 1, &[c.resolution], &mut ChaCha8Rng::seed_from_u64(c.seed)).unwrap();
    let norm = Normalizer::fit(&data.inputs, &data.targets).unwrap();
    let normed: Vec<GridFunction> = data.inputs.iter().map(|z| norm.input(z).unwrap()).collect();
    let cache = LatentCache::build(&normed, &params, &wno, None, "burgers-256".into(), 32).unwrap();
    let l = median_distance(cache.features(), cache.len(), cache.dim());
    let noise = c.initial_noise;
    let k = gram_full(&cache, BaseKernel::Matern52, &KernelHyper::new(l, 1.0, noise));
    let u = norm.targets(&data.targets).unwrap();
    let exact = cholesky_solve_oracle(&k, noise, &u).unwrap();
    let errs: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = SddConfig {
                steps: 3000,
                batch: 32,
                beta: 1.0,
                momentum: 0.9,
                averaging: 0.9,
                seed,
            };
            let a = sdd_solve(&mut DenseRows::new(&k), noise, &u, &cfg).unwrap().weights;
            (a - &exact).norm() / exact.norm()
        })
        .collect();
    let listed: Vec<String> = errs.iter().map(|e| format!("{e:.2e}")).collect();
    let m = median(errs);
    verdict(
        m < 1e-3,
        format!(
            "median rel Frobenius error {m:.2e} over 5 seeds [{}] (< 1e-3)",
            listed.join(", ")
        ),
    )
}

fn shifted(mut d: OperatorDataset) -> OperatorDataset {
    d.targets = d
        .targets
        .iter()
        .map(|t| t.with_values(1, t.values().iter().map(|v| v + 2.0).collect()).unwrap())
        .collect();
    d
}

fn pathwise_moments_on_toy() -> Verdict {
    let data = shifted(make_dataset(Pde::Burgers, 8, 8, 9).unwrap());
    let model = model_for(&data, 0.05, 3);
    let test = shifted(make_dataset(Pde::Burgers, 2, 8, 10).unwrap());
    let set = pathwise_sample(&model, &test.inputs, 2000, 11, SampleSolver::Exact).unwrap();
    let mean = model.predict_mean(&test.inputs).unwrap();
    let var = posterior_variance(&model, &test.inputs);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for i in 0..test.len() {
        worst_mean = worst_mean.max(rel_norm(set.mean[i].values(), mean[i].values()));
        for (p, sd) in set.std[i].values().iter().enumerate() {
            let want = var[i] * model.normalizer.target_std[p].powi(2);
            worst_var = worst_var.max((sd * sd - want).abs() / want);
        }
    }
    verdict(
        worst_mean < 0.02 && worst_var < 0.1,
        format!("mean rel error {worst_mean:.4} (< 0.02), worst pointwise variance rel error {worst_var:.4} (< 0.1)"),
    )
}

/// Worst relative mismatch between analytic NLL gradients and a
/// fourth-order central difference, over every hyperparameter and operator
/// parameter. Returns the worst error and the number of components.
fn fd_worst(data: &OperatorDataset, wno: &WnoConfig, kernel: BaseKernel) -> (f64, usize) {
    let refs: Vec<&GridFunction> = data.inputs.iter().collect();
    let norm = Normalizer::fit(&data.inputs, &data.targets).unwrap();
    let u = norm.targets(&data.targets).unwrap();
    let dims = data.inputs[0].dims().to_vec();
    let params = WnoParams::init(wno, data.inputs[0].channels(), &dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let problem = GpProblem {
        inputs: &refs,
        targets: &u,
        config: wno,
        kernel,
    };
    let h0 = KernelHyper::new(0.3, 1.2, 0.05);
    let eval = problem.nll(&params, &h0, true, 3).unwrap();
    let value = |p: &WnoParams, h: &KernelHyper| problem.nll(p, h, false, 8).unwrap().value;
    let eps = 1e-4;
    let stencil = |f: &dyn Fn(f64) -> f64| (f(-2.0 * eps) - 8.0 * f(-eps) + 8.0 * f(eps) - f(2.0 * eps)) / (12.0 * eps);
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
    let mut worst: f64 = 0.0;
    let mut count = 0;
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
        worst = worst.max(rel(stencil(&at), g));
        count += 1;
    }
    for (t, g) in eval.params.unwrap().iter().enumerate() {
        for i in 0..g.len() {
            let bump = |delta: f64| {
                let mut p = params.clone();
                let tensor = p.tensors_mut().swap_remove(t);
                let mut values = tensor.data().to_vec();
                values[i] += delta;
                *tensor = Tensor::new(tensor.shape().to_vec(), values).unwrap();
                value(&p, &h0)
            };
            worst = worst.max(rel(stencil(&bump), g.data()[i]));
            count += 1;
        }
    }
    (worst, count)
}

fn gradients_and_wavelet_round_trip() -> Verdict {
    let small = WnoConfig {
        width: 4,
        layers: 2,
        levels: 2,
        latent_channels: 2,
        ..WnoConfig::default()
    };
    let burgers = make_dataset(Pde::Burgers, 8, 32, 5).unwrap();
    let darcy = make_dataset(Pde::Darcy, 8, 9, 6).unwrap();
    let darcy_wno = WnoConfig {
        levels: 1,
        pad: true,
        ..small
    };
    let mut worst_grad: f64 = 0.0;
    let mut components = 0;
    for (data, wno) in [(&burgers, &small), (&darcy, &darcy_wno)] {
        for kernel in [BaseKernel::Matern52, BaseKernel::Rbf] {
            let (w, n) = fd_worst(data, wno, kernel);
            worst_grad = worst_grad.max(w);
            components += n;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst_dwt: f64 = 0.0;
    for basis in WaveletBasis::all() {
        for levels in 1..=5 {
            for dims in [vec![128], vec![64, 64]] {
                let x: Vec<f64> = (0..dims.iter().product())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let back = idwt_packed(&dwt_packed(&x, &dims, basis, levels).unwrap(), &dims, basis, levels).unwrap();
                let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst_dwt = worst_dwt.max(err);
            }
        }
    }
    verdict(
        worst_grad < 1e-4 && worst_dwt < 1e-10,
        format!(
            "worst gradient rel error {worst_grad:.2e} over {components} components (< 1e-4), \
             worst DWT round-trip error {worst_dwt:.2e} (< 1e-10)"
        ),
    )
}

struct Run {
    config: ExperimentConfig,
    model: gpo_core::posterior::GpoModel,
    eval: Evaluation,
    train_secs: f64,
}

fn preset_run(pde: Pde, samples: usize) -> Run {
    let config = ExperimentConfig::preset(pde);
    let data = config.train_data().unwrap();
    let start = Instant::now();
    let model = train(&data, &config.train_settings()).unwrap().model;
    let train_secs = start.elapsed().as_secs_f64();
    let test = config.test_data(None).unwrap();
    let eval = evaluate(
        &model,
        &test,
        &EvalSettings {
            samples,
            ..config.eval_settings()
        },
    )
    .unwrap();
    Run {
        config,
        model,
        eval,
        train_secs,
    }
}

fn accuracy(run: &Run, bound: f64) -> Verdict {
    let c = &run.config;
    verdict(
        run.eval.mean <= bound,
        format!(
            "N={} res={} rel L2 {:.2}% ± {:.2}% (<= {}%), train {:.0} s",
            c.n_train,
            c.resolution,
            100.0 * run.eval.mean,
            100.0 * run.eval.std,
            100.0 * bound,
            run.train_secs
        ),
    )
}

fn darcy_with_superres() -> Verdict {
    let run = preset_run(Pde::Darcy, 0);
    let fine = run.config.test_data(Some(run.config.superres)).unwrap();
    let hi = evaluate(
        &run.model,
        &fine,
        &EvalSettings {
            samples: 0,
            ..EvalSettings::default()
        },
    )
    .unwrap();
    let ratio = hi.mean / run.eval.mean;
    let base = accuracy(&run, 0.12);
    verdict(
        base.pass && ratio < 2.0,
        format!(
            "{}; at res {} rel L2 {:.2}%, ratio {ratio:.3} (< 2)",
            base.detail,
            run.config.superres,
            100.0 * hi.mean
        ),
    )
}

fn sweep_trends() -> Verdict {
    let c = ExperimentConfig::preset(Pde::Advection);
    let train_set = c.train_data().unwrap();
    let test_set = c.test_data(None).unwrap();
    let seeds: Vec<u64> = (0..c.sweep_seeds as u64).collect();
    let summary = |axis| {
        let rows = sweep(
            &train_set,
            &test_set,
            &c.train_settings(),
            axis,
            &c.sweep_values,
            &seeds,
        )
        .unwrap();
        let s = sweep_summary(&rows);
        let pts: Vec<(f64, f64)> = s.iter().map(|r| (r.0 as f64, r.1)).collect();
        (s.iter().map(|r| r.1).collect::<Vec<f64>>(), slope(&pts))
    };
    let (sdd_medians, sdd_slope) = summary(SweepAxis::SSdd);
    let (init_medians, init_slope) = summary(SweepAxis::SInit);
    let monotone = sdd_medians.windows(2).all(|w| w[1] <= w[0]);
    verdict(
        monotone && sdd_slope.abs() > init_slope.abs(),
        format!(
            "values {:?}: s_sdd medians {sdd_medians:.4?} (non-increasing: {monotone}), slope {sdd_slope:.2e}; \
             s_init medians {init_medians:.4?}, slope {init_slope:.2e}",
            c.sweep_values
        ),
    )
}

/// Latent distances between pairs of test inputs, at the training grid and
/// at twice its resolution.
fn resolution_transfer(model: &gpo_core::posterior::GpoModel, c: &ExperimentConfig) -> Verdict {
    let pairs = 8;
    let coarse = make_dataset(Pde::Burgers, pairs + 1, c.resolution, c.test_seed()).unwrap();
    let fine = make_dataset(Pde::Burgers, pairs + 1, 2 * c.resolution, c.test_seed()).unwrap();
    let lc = model.embed(&coarse.inputs).unwrap();
    let lf = model.embed(&fine.inputs).unwrap();
    let worst = (0..pairs)
        .map(|i| {
            let dc = lc.distance(i, &lc, i + 1);
            let df = lf.distance(i, &lf, i + 1);
            (df - dc).abs() / dc
        })
        .fold(0.0, f64::max);
    verdict(
        worst < 0.1,
        format!(
            "{pairs} Burgers input pairs at res {} and {}: worst relative gap {worst:.4} (< 0.1)",
            c.resolution,
            2 * c.resolution
        ),
    )
}

fn main() {
    let mins = |m: u64| Duration::from_secs(60 * m);
    let mut results = Vec::new();
    results.push(run(
        1,
        "SDD vs Cholesky on 256 Burgers latents",
        Duration::from_secs(60),
        sdd_matches_cholesky_on_burgers_latents,
    ));
    results.push(run(
        2,
        "pathwise sampling moments on an 8-point toy",
        Duration::from_secs(30),
        pathwise_moments_on_toy,
    ));
    results.push(run(
        3,
        "NLL gradients and wavelet round trip",
        Duration::from_secs(60),
        gradients_and_wavelet_round_trip,
    ));

    let mut burgers = None;
    results.push(run(4, "Burgers accuracy", mins(20), || {
        let r = preset_run(Pde::Burgers, 0);
        let v = accuracy(&r, 0.10);
        burgers = Some(r);
        v
    }));
    let mut advection = None;
    results.push(run(5, "wave advection accuracy", mins(10), || {
        let r = preset_run(Pde::Advection, ExperimentConfig::preset(Pde::Advection).samples);
        let v = accuracy(&r, 0.05);
        advection = Some(r);
        v
    }));
    results.push(run(
        6,
        "Darcy accuracy and super-resolution",
        mins(30),
        darcy_with_superres,
    ));
    results.push(run(
        7,
        "S_SDD and S_init sweep trends on advection",
        mins(45),
        sweep_trends,
    ));
    results.push(run(8, "95% band coverage on advection", mins(10), || {
        let cov = advection.as_ref().and_then(|r| r.eval.coverage).unwrap_or(f64::NAN);
        verdict(
            (0.85..=0.99).contains(&cov),
            format!("coverage {:.2}% (in [85%, 99%])", 100.0 * cov),
        )
    }));
    results.push(run(9, "latent distances under grid refinement", mins(5), || {
        let r = burgers.as_ref().unwrap();
        resolution_transfer(&r.model, &r.config)
    }));

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
