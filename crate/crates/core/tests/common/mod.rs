#![allow(dead_code)]

use gpo_core::data::OperatorDataset;
use gpo_core::exact_gp::{cholesky_solve_oracle, median_distance};
use gpo_core::grid::GridFunction;
use gpo_core::kernel::{gram, gram_full, BaseKernel, KernelHyper, LatentCache};
use gpo_core::posterior::{GpoModel, Normalizer};
use gpo_core::wno::{WnoConfig, WnoParams};
use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_wno() -> WnoConfig {
    WnoConfig {
        width: 8,
        layers: 1,
        levels: 2,
        latent_channels: 4,
        ..WnoConfig::default()
    }
}

/// Untrained operator, lengthscale at the median latent distance, unit
/// process variance and Cholesky weights.
pub fn model_for(data: &OperatorDataset, noise: f64, seed: u64) -> GpoModel {
    let config = small_wno();
    let dims = data.inputs[0].dims().to_vec();
    let params = WnoParams::init(&config, 1, &dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let normalizer = Normalizer::fit(&data.inputs, &data.targets).unwrap();
    let normed: Vec<GridFunction> = data.inputs.iter().map(|z| normalizer.input(z).unwrap()).collect();
    let cache = LatentCache::build(&normed, &params, &config, None, "toy".into(), 16).unwrap();
    let l = median_distance(cache.features(), cache.len(), cache.dim());
    let hyper = KernelHyper::new(l, 1.0, noise);
    let k = gram_full(&cache, BaseKernel::Matern52, &hyper);
    let u = normalizer.targets(&data.targets).unwrap();
    let weights = cholesky_solve_oracle(&k, noise, &u).unwrap();
    GpoModel {
        config,
        kernel: BaseKernel::Matern52,
        params,
        hyper,
        normalizer,
        cache,
        weights,
        target_template: data.targets[0].clone(),
        train_dims: dims,
    }
}

/// Closed-form posterior variance of the latent process at each test input,
/// in normalised units.
pub fn posterior_variance(model: &GpoModel, inputs: &[GridFunction]) -> Vec<f64> {
    let test = model.embed(inputs).unwrap();
    let ks = model.cross_gram(&test).unwrap();
    let n = model.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut k = gram(&model.cache, &idx, &model.cache, &idx, model.kernel, &model.hyper).unwrap();
    for i in 0..n {
        k[(i, i)] += model.hyper.noise();
    }
    let solved = Cholesky::new(k).unwrap().solve(&ks.transpose());
    (0..inputs.len())
        .map(|i| model.hyper.variance() - (ks.row(i) * solved.column(i))[(0, 0)])
        .collect()
}

pub fn rel_norm(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn zeros_like(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::zeros(m.nrows(), m.ncols())
}
