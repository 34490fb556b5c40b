//! The trained operator model: predictive means through representer
//! weights, pathwise posterior samples and Gaussian confidence bands.

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::exact_gp::jitter_for;
use crate::grid::{GridError, GridFunction};
use crate::kernel::{gram, BaseKernel, DenseRows, KernelError, KernelHyper, LatentCache};
use crate::sdd::{sdd_solve, SddConfig, SddError};
use crate::wno::{WnoConfig, WnoParams};

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("incompatible input: {0}")]
    Incompatible(String),
    #[error("joint prior covariance did not factorise (jitter {jitter:e}); increase the noise or jitter")]
    Factorisation { jitter: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SddError),
}

/// Affine maps applied to inputs and targets before the GP sees them:
/// a global scalar shift and scale for inputs, per-point mean and scale
/// for targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub input_mean: f64,
    pub input_std: f64,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(inputs: &[GridFunction], targets: &[GridFunction]) -> Result<Self, PosteriorError> {
        let first = targets
            .first()
            .ok_or_else(|| PosteriorError::Invalid("cannot normalise an empty training set".into()))?;
        let (mut s, mut s2, mut count) = (0.0, 0.0, 0usize);
        for z in inputs {
            for &v in z.values() {
                s += v;
                s2 += v * v;
            }
            count += z.values().len();
        }
        let input_mean = s / count as f64;
        let input_std = (s2 / count as f64 - input_mean * input_mean).max(0.0).sqrt();
        let d = first.values().len();
        let mut mean = vec![0.0; d];
        for u in targets {
            if u.values().len() != d {
                return Err(PosteriorError::Incompatible("targets on different grids".into()));
            }
            for (m, v) in mean.iter_mut().zip(u.values()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= targets.len() as f64);
        let mut var = vec![0.0; d];
        for u in targets {
            for ((s, v), m) in var.iter_mut().zip(u.values()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let rms = (var.iter().sum::<f64>() / (targets.len() * d) as f64).sqrt();
        let guard = |x: f64| if x > 1e-12 && x.is_finite() { x } else { 1.0 };
        let input_std = guard(input_std);
        // Points that barely vary keep a floor so rounding noise is not amplified.
        let floor = guard(rms) * 1e-6;
        let target_std = var
            .iter()
            .map(|s| (s / targets.len() as f64).sqrt().max(floor))
            .collect();
        Ok(Normalizer {
            input_mean,
            input_std,
            target_mean: mean,
            target_std,
        })
    }

    pub fn input(&self, z: &GridFunction) -> Result<GridFunction, PosteriorError> {
        let v = z
            .values()
            .iter()
            .map(|v| (v - self.input_mean) / self.input_std)
            .collect();
        Ok(z.with_values(z.channels(), v)?)
    }

    /// Normalised targets as a `[N, d_u]` matrix.
    pub fn targets(&self, targets: &[GridFunction]) -> Result<DMatrix<f64>, PosteriorError> {
        let d = self.target_mean.len();
        let mut rows = Vec::with_capacity(targets.len() * d);
        for u in targets {
            if u.values().len() != d {
                return Err(PosteriorError::Incompatible(
                    "target grid differs from training grid".into(),
                ));
            }
            rows.extend(
                u.values()
                    .iter()
                    .zip(&self.target_mean)
                    .zip(&self.target_std)
                    .map(|((v, m), s)| (v - m) / s),
            );
        }
        Ok(DMatrix::from_row_slice(targets.len(), d, &rows))
    }

    /// Inverse of [`Normalizer::targets`] for one row.
    pub fn output(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.target_mean)
            .zip(&self.target_std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

/// Everything needed to predict at new inputs. Frozen after training.
#[derive(Clone, Debug)]
pub struct GpoModel {
    pub config: WnoConfig,
    pub kernel: BaseKernel,
    pub params: WnoParams,
    pub hyper: KernelHyper,
    pub normalizer: Normalizer,
    /// Latents of the normalised training inputs.
    pub cache: LatentCache,
    /// Representer weights `[N, d_u]` in normalised target units.
    pub weights: DMatrix<f64>,
    /// A training target, used as the output-grid template.
    pub target_template: GridFunction,
    pub train_dims: Vec<usize>,
}

impl GpoModel {
    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    /// Latents of test inputs, restricted to the training grid.
    pub fn embed(&self, inputs: &[GridFunction]) -> Result<LatentCache, PosteriorError> {
        let dims = inputs.first().map(|z| z.dims().to_vec());
        for z in inputs {
            if Some(z.dims().to_vec()) != dims {
                return Err(PosteriorError::Incompatible("test inputs mix resolutions".into()));
            }
            if z.dims().len() != self.train_dims.len() || z.dims().iter().zip(&self.train_dims).any(|(t, r)| t % r != 0)
            {
                return Err(PosteriorError::Incompatible(format!(
                    "input grid {:?} is not an integer refinement of the training grid {:?}",
                    z.dims(),
                    self.train_dims
                )));
            }
        }
        let normed = inputs
            .iter()
            .map(|z| self.normalizer.input(z))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LatentCache::build(
            &normed,
            &self.params,
            &self.config,
            Some(&self.train_dims),
            self.cache.fingerprint().to_string(),
            16,
        )?)
    }

    /// Cross-covariance `[M, N]` between test latents and training latents.
    pub fn cross_gram(&self, test: &LatentCache) -> Result<DMatrix<f64>, PosteriorError> {
        let rows: Vec<usize> = (0..test.len()).collect();
        let cols: Vec<usize> = (0..self.cache.len()).collect();
        Ok(gram(test, &rows, &self.cache, &cols, self.kernel, &self.hyper)?)
    }

    /// Converts a normalised prediction row to a field on `dims`, upsampling
    /// from the training target grid when `dims` is finer.
    fn to_field(&self, row: &[f64], dims: &[usize]) -> Result<GridFunction, PosteriorError> {
        let t = &self.target_template;
        let f = t.with_values(t.channels(), self.normalizer.output(row))?;
        if dims == t.dims() {
            Ok(f)
        } else {
            Ok(f.upsample(dims)?)
        }
    }

    /// Predictive mean at each input, on the input's own grid.
    pub fn predict_mean(&self, inputs: &[GridFunction]) -> Result<Vec<GridFunction>, PosteriorError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let test = self.embed(inputs)?;
        let mean = self.cross_gram(&test)? * &self.weights;
        let dims = inputs[0].dims().to_vec();
        (0..inputs.len())
            .map(|i| self.to_field(mean.row(i).transpose().as_slice(), &dims))
            .collect()
    }
}

/// Per-point sample moments in physical units, on the requested grid.
#[derive(Clone, Debug)]
pub struct PosteriorSampleSet {
    /// `samples[s][i]`: draw `s` at test input `i`.
    pub samples: Vec<Vec<GridFunction>>,
    pub mean: Vec<GridFunction>,
    pub std: Vec<GridFunction>,
}

impl PosteriorSampleSet {
    /// Moments of `samples[s][i]` over `s`.
    pub fn from_samples(samples: Vec<Vec<GridFunction>>) -> Result<Self, PosteriorError> {
        let s = samples.len();
        let first = samples
            .first()
            .ok_or_else(|| PosteriorError::Invalid("at least one sample is required".into()))?;
        let mut mean = Vec::with_capacity(first.len());
        let mut std = Vec::with_capacity(first.len());
        for i in 0..first.len() {
            let len = first[i].values().len();
            let mut m = vec![0.0; len];
            for draw in &samples {
                m.iter_mut().zip(draw[i].values()).for_each(|(a, v)| *a += v);
            }
            m.iter_mut().for_each(|a| *a /= s as f64);
            let mut var = vec![0.0; len];
            for draw in &samples {
                var.iter_mut()
                    .zip(draw[i].values().iter().zip(&m))
                    .for_each(|(a, (v, mu))| *a += (v - mu) * (v - mu));
            }
            let denom = (s.max(2) - 1) as f64;
            let sd = var.iter().map(|v| (v / denom).sqrt()).collect();
            mean.push(first[i].with_values(first[i].channels(), m)?);
            std.push(first[i].with_values(first[i].channels(), sd)?);
        }
        Ok(PosteriorSampleSet { samples, mean, std })
    }
}

/// How the `(K + σ_n² I)⁻¹` solves of the prior draws are carried out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleSolver {
    /// Dense Cholesky, the exact reference.
    Exact,
    /// Stochastic dual descent on the identity right-hand side, giving an
    /// approximate inverse reused for every draw.
    Sdd(SddConfig),
}

/// Pathwise posterior draws at `inputs`: prior draw over training and test
/// latents jointly, plus the mean, minus the kernel-weighted solve of the
/// prior draw with added noise at the training inputs.
pub fn pathwise_sample(
    model: &GpoModel,
    inputs: &[GridFunction],
    samples: usize,
    seed: u64,
    solver: SampleSolver,
) -> Result<PosteriorSampleSet, PosteriorError> {
    if samples == 0 {
        return Err(PosteriorError::Invalid("at least one sample is required".into()));
    }
    if inputs.is_empty() {
        return Err(PosteriorError::Invalid("no test inputs".into()));
    }
    let n = model.len();
    let m = inputs.len();
    let du = model.weights.ncols();
    let test = model.embed(inputs)?;
    let k_star = model.cross_gram(&test)?;
    let mean = &k_star * &model.weights;

    // Joint prior covariance over [train; test].
    let idx_n: Vec<usize> = (0..n).collect();
    let idx_m: Vec<usize> = (0..m).collect();
    let k_train = gram(&model.cache, &idx_n, &model.cache, &idx_n, model.kernel, &model.hyper)?;
    let k_test = gram(&test, &idx_m, &test, &idx_m, model.kernel, &model.hyper)?;
    let mut joint = DMatrix::zeros(n + m, n + m);
    joint.view_mut((0, 0), (n, n)).copy_from(&k_train);
    joint.view_mut((n, 0), (m, n)).copy_from(&k_star);
    joint.view_mut((0, n), (n, m)).copy_from(&k_star.transpose());
    joint.view_mut((n, n), (m, m)).copy_from(&k_test);
    let jitter = jitter_for(&joint).max(1e-10 * model.hyper.variance());
    for i in 0..n + m {
        joint[(i, i)] += jitter;
    }
    let lower = Cholesky::new(joint)
        .ok_or(PosteriorError::Factorisation { jitter })?
        .l();

    let noise = model.hyper.noise();
    let inverse = match solver {
        SampleSolver::Exact => {
            let mut kn = k_train.clone();
            for i in 0..n {
                kn[(i, i)] += noise;
            }
            let c = Cholesky::new(kn).ok_or(PosteriorError::Factorisation { jitter: 0.0 })?;
            c.inverse()
        }
        SampleSolver::Sdd(cfg) => {
            sdd_solve(&mut DenseRows::new(&k_train), noise, &DMatrix::identity(n, n), &cfg)?.weights
        }
    };
    // Applying the inverse to K* once lets every draw reuse it.
    let reduce = &k_star * &inverse;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = inputs[0].dims().to_vec();
    let sd_noise = noise.sqrt();
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let xi = DMatrix::from_fn(n + m, du, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = &lower * xi;
        let eps = DMatrix::from_fn(n, du, |_, _| sd_noise * rng.sample::<f64, _>(StandardNormal));
        let rhs = f.rows(0, n) + eps;
        let draw = f.rows(n, m) + &mean - &reduce * rhs;
        let fields = (0..m)
            .map(|i| model.to_field(draw.row(i).transpose().as_slice(), &dims))
            .collect::<Result<Vec<_>, _>>()?;
        draws.push(fields);
    }
    PosteriorSampleSet::from_samples(draws)
}

/// Two-sided standard normal quantile for a central `level`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

pub const MIN_BAND_SAMPLES: usize = 30;

/// `mean ± z·std` per test input.
pub fn confidence_band(
    set: &PosteriorSampleSet,
    level: f64,
) -> Result<Vec<(GridFunction, GridFunction)>, PosteriorError> {
    if set.samples.len() < MIN_BAND_SAMPLES {
        return Err(PosteriorError::Invalid(format!(
            "{} samples is too few for a band (need at least {MIN_BAND_SAMPLES})",
            set.samples.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(PosteriorError::Invalid(format!("level {level} must lie in (0, 1)")));
    }
    let z = normal_quantile(level);
    set.mean
        .iter()
        .zip(&set.std)
        .map(|(m, s)| {
            let lo = m.values().iter().zip(s.values()).map(|(a, b)| a - z * b).collect();
            let hi = m.values().iter().zip(s.values()).map(|(a, b)| a + z * b).collect();
            Ok((m.with_values(m.channels(), lo)?, m.with_values(m.channels(), hi)?))
        })
        .collect()
}
