mod common;

use common::{model_for, posterior_variance, rel_norm};
use gpo_core::data::{make_dataset, OperatorDataset, Pde};
use gpo_core::grid::{Boundary, GridFunction};
use gpo_core::kernel::{gram_full, DenseRows};
use gpo_core::posterior::{
    confidence_band, normal_quantile, pathwise_sample, Normalizer, PosteriorSampleSet, SampleSolver,
};
use gpo_core::sdd::{sdd_solve, SddConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn vanishing_noise_predicts_training_targets() {
    let data = make_dataset(Pde::Burgers, 10, 32, 3).unwrap();
    let model = model_for(&data, 1e-10, 0);
    let pred = model.predict_mean(&data.inputs[..4]).unwrap();
    for (p, t) in pred.iter().zip(&data.targets) {
        assert!(rel_norm(p.values(), t.values()) < 1e-5);
    }
}

#[test]
fn zero_weights_predict_the_target_mean() {
    let data = make_dataset(Pde::Burgers, 6, 32, 4).unwrap();
    let mut model = model_for(&data, 0.1, 0);
    model.weights.fill(0.0);
    let pred = model.predict_mean(&data.inputs[..2]).unwrap();
    for p in pred {
        assert_eq!(p.values(), model.normalizer.target_mean.as_slice());
    }
}

#[test]
fn mean_is_linear_in_the_weights() {
    let data = make_dataset(Pde::Advection, 8, 40, 5).unwrap();
    let model = model_for(&data, 0.1, 1);
    let test = model.embed(&data.inputs[..3]).unwrap();
    let ks = model.cross_gram(&test).unwrap();
    let a = model.weights.clone();
    let b = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
    let lhs = &ks * (&a * 2.0 + &b);
    let rhs = (&ks * &a) * 2.0 + &ks * &b;
    assert!((lhs - &rhs).norm() <= 1e-12 * rhs.norm());
}

#[test]
fn normaliser_round_trips() {
    let data = make_dataset(Pde::Darcy, 4, 9, 6).unwrap();
    let n = Normalizer::fit(&data.inputs, &data.targets).unwrap();
    let u = n.targets(&data.targets).unwrap();
    for (i, t) in data.targets.iter().enumerate() {
        let back = n.output(u.row(i).transpose().as_slice());
        assert!(rel_norm(&back, t.values()) < 1e-14);
    }
    let col_means: Vec<f64> = (0..u.ncols()).map(|j| u.column(j).mean()).collect();
    assert!(col_means.iter().all(|m| m.abs() < 1e-12));
}

#[test]
fn sdd_weights_match_cholesky_mean_on_burgers() {
    let data = make_dataset(Pde::Burgers, 64, 64, 7).unwrap();
    let exact = model_for(&data, 0.1, 2);
    let k = gram_full(&exact.cache, exact.kernel, &exact.hyper);
    let u = exact.normalizer.targets(&data.targets).unwrap();
    let cfg = SddConfig {
        steps: 4000,
        batch: 16,
        beta: 1.0,
        momentum: 0.9,
        averaging: 0.9,
        seed: 0,
    };
    let mut approx = exact.clone();
    approx.weights = sdd_solve(&mut DenseRows::new(&k), 0.1, &u, &cfg).unwrap().weights;
    let test = make_dataset(Pde::Burgers, 8, 64, 8).unwrap();
    let a = exact.predict_mean(&test.inputs).unwrap();
    let b = approx.predict_mean(&test.inputs).unwrap();
    for (x, y) in b.iter().zip(&a) {
        assert!(rel_norm(x.values(), y.values()) < 1e-3);
    }
}

#[test]
fn pathwise_moments_match_closed_form() {
    // Eight training pairs on an eight-point grid. Targets are shifted away
    // from zero so a relative tolerance on the mean is meaningful.
    let shift = |mut d: OperatorDataset| {
        d.targets = d
            .targets
            .iter()
            .map(|t| t.with_values(1, t.values().iter().map(|v| v + 2.0).collect()).unwrap())
            .collect();
        d
    };
    let data = shift(make_dataset(Pde::Burgers, 8, 8, 9).unwrap());
    let model = model_for(&data, 0.05, 3);
    let test = shift(make_dataset(Pde::Burgers, 2, 8, 10).unwrap());
    let set = pathwise_sample(&model, &test.inputs, 2000, 11, SampleSolver::Exact).unwrap();
    let mean = model.predict_mean(&test.inputs).unwrap();
    let var = posterior_variance(&model, &test.inputs);
    for i in 0..test.len() {
        assert!(rel_norm(set.mean[i].values(), mean[i].values()) < 0.02);
        for (p, sd) in set.std[i].values().iter().enumerate() {
            let want = var[i] * model.normalizer.target_std[p].powi(2);
            assert!(
                (sd * sd - want).abs() / want < 0.1,
                "input {i} point {p}: {} vs {want}",
                sd * sd
            );
        }
    }
}

#[test]
fn sampling_is_deterministic_and_checks_inputs() {
    let data = make_dataset(Pde::Burgers, 6, 16, 12).unwrap();
    let model = model_for(&data, 0.1, 4);
    let a = pathwise_sample(&model, &data.inputs[..2], 5, 1, SampleSolver::Exact).unwrap();
    let b = pathwise_sample(&model, &data.inputs[..2], 5, 1, SampleSolver::Exact).unwrap();
    assert_eq!(a.samples, b.samples);
    assert!(pathwise_sample(&model, &data.inputs[..2], 0, 1, SampleSolver::Exact).is_err());
    assert!(pathwise_sample(&model, &[], 5, 1, SampleSolver::Exact).is_err());
    let odd = make_dataset(Pde::Burgers, 1, 24, 1).unwrap();
    assert!(model.predict_mean(&odd.inputs).is_err());
}

#[test]
fn sdd_sampling_approaches_exact_sampling() {
    let data = make_dataset(Pde::Burgers, 32, 16, 13).unwrap();
    let model = model_for(&data, 0.1, 5);
    let cfg = SddConfig {
        steps: 4000,
        batch: 8,
        beta: 1.0,
        momentum: 0.9,
        averaging: 0.9,
        seed: 0,
    };
    let exact = pathwise_sample(&model, &data.inputs[..2], 50, 2, SampleSolver::Exact).unwrap();
    let approx = pathwise_sample(&model, &data.inputs[..2], 50, 2, SampleSolver::Sdd(cfg)).unwrap();
    for (a, b) in approx.samples.iter().flatten().zip(exact.samples.iter().flatten()) {
        assert!(rel_norm(a.values(), b.values()) < 1e-2);
    }
}

fn field(values: Vec<f64>) -> GridFunction {
    GridFunction::unit(vec![values.len()], Boundary::Periodic, values).unwrap()
}

#[test]
fn band_of_constant_samples_has_zero_width() {
    let draws = (0..40).map(|_| vec![field(vec![1.5, -2.0, 0.25])]).collect();
    let set = PosteriorSampleSet::from_samples(draws).unwrap();
    let band = confidence_band(&set, 0.95).unwrap();
    assert_eq!(band[0].0.values(), &[1.5, -2.0, 0.25]);
    assert_eq!(band[0].1.values(), &[1.5, -2.0, 0.25]);
}

#[test]
fn band_of_standard_normal_samples_is_about_1_96() {
    assert!((normal_quantile(0.95) - 1.959_963_984_540_054).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = (0..20_000)
        .map(|_| {
            vec![field(vec![
                rng.sample(StandardNormal),
                3.0 + rng.sample::<f64, _>(StandardNormal),
            ])]
        })
        .collect();
    let set = PosteriorSampleSet::from_samples(draws).unwrap();
    let band = confidence_band(&set, 0.95).unwrap();
    let (lo, hi) = (&band[0].0, &band[0].1);
    assert!((hi.values()[0] - 1.96).abs() < 0.05 && (lo.values()[0] + 1.96).abs() < 0.05);
    assert!((hi.values()[1] - 4.96).abs() < 0.05);
    for p in 0..2 {
        let m = set.mean[0].values()[p];
        assert!(lo.values()[p] <= m && m <= hi.values()[p]);
    }
}

#[test]
fn band_needs_enough_samples_and_a_valid_level() {
    let draws: Vec<_> = (0..29).map(|i| vec![field(vec![i as f64])]).collect();
    let set = PosteriorSampleSet::from_samples(draws.clone()).unwrap();
    assert!(confidence_band(&set, 0.95).is_err());
    let mut more = draws;
    more.push(vec![field(vec![0.0])]);
    let set = PosteriorSampleSet::from_samples(more).unwrap();
    assert!(confidence_band(&set, 0.95).is_ok());
    assert!(confidence_band(&set, 1.0).is_err());
    assert!(confidence_band(&set, 0.0).is_err());
}
