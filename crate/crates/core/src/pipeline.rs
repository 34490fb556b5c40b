//! Two-phase training (exact-GP initialisation, then stochastic dual
//! descent with frozen operator and kernel parameters) and evaluation.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::SweepAxis;
use crate::data::OperatorDataset;
use crate::exact_gp::{cholesky_solve_oracle, init_train, ExactGpError, InitConfig, TraceRow};
use crate::grid::GridFunction;
use crate::kernel::{fingerprint, gram_full, BaseKernel, DenseRows, KernelError, LatentCache};
use crate::posterior::{confidence_band, pathwise_sample, GpoModel, Normalizer, PosteriorError, SampleSolver};
use crate::sdd::{sdd_solve, SddConfig, SddError};
use crate::wno::{WnoConfig, WnoError, WnoParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("initialisation phase: {0}")]
    Init(#[from] ExactGpError),
    #[error("dual descent phase: {0}")]
    Sdd(#[from] SddError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Operator(#[from] WnoError),
}

impl PipelineError {
    /// Whether the failure is numerical rather than a bad request.
    pub fn is_numerical(&self) -> bool {
        match self {
            PipelineError::Init(e) => matches!(e, ExactGpError::Cholesky { .. } | ExactGpError::Diverged { .. }),
            PipelineError::Sdd(e) => matches!(e, SddError::NonFinite { .. }),
            PipelineError::Posterior(e) => matches!(e, PosteriorError::Factorisation { .. }),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub wno: WnoConfig,
    pub kernel: BaseKernel,
    pub init: InitConfig,
    /// `steps` is overwritten from `sdd_epochs`.
    pub sdd: SddConfig,
    pub sdd_epochs: usize,
    /// Number of leading training samples used in the dual descent phase;
    /// all of them when `None`.
    pub s_sdd: Option<usize>,
    /// Use the Cholesky solution for the representer weights.
    pub exact_weights: bool,
    pub model_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            wno: WnoConfig::default(),
            kernel: BaseKernel::Matern52,
            init: InitConfig::default(),
            sdd: SddConfig::default(),
            sdd_epochs: 100,
            s_sdd: None,
            exact_weights: false,
            model_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GpoModel,
    pub init_trace: Vec<TraceRow>,
    pub sdd_trace: Vec<TraceRow>,
}

/// Fits the operator and hyperparameters on `S_init` samples drawn from the
/// whole training set, then solves for the representer weights of the first
/// `S_SDD` samples with those parameters frozen.
pub fn train(data: &OperatorDataset, settings: &TrainSettings) -> Result<TrainOutcome, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::Invalid("training set is empty".into()));
    }
    let n = settings.s_sdd.unwrap_or(data.len());
    if n == 0 || n > data.len() {
        return Err(PipelineError::Invalid(format!(
            "dual descent sample count {n} must lie in 1..={}",
            data.len()
        )));
    }
    let normalizer = Normalizer::fit(&data.inputs, &data.targets)?;
    let normed: Vec<GridFunction> = data
        .inputs
        .iter()
        .map(|z| normalizer.input(z))
        .collect::<Result<_, _>>()?;
    let u_all = normalizer.targets(&data.targets)?;
    let train_dims = data.inputs[0].dims().to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(settings.model_seed);
    let params = WnoParams::init(&settings.wno, data.inputs[0].channels(), &train_dims, &mut rng)?;
    let mut init = settings.init.clone();
    init.s_init = init.s_init.min(data.len());
    let fitted = init_train(&normed, &u_all, &settings.wno, settings.kernel, params, &init)?;

    let fp = fingerprint(&data.digest(), &fitted.params, &settings.wno);
    let cache = LatentCache::build(&normed[..n], &fitted.params, &settings.wno, None, fp, 32)?;
    let u = u_all.rows(0, n).into_owned();
    let k = gram_full(&cache, settings.kernel, &fitted.hyper);
    let noise = fitted.hyper.noise();
    let (weights, sdd_trace) = if settings.exact_weights {
        (cholesky_solve_oracle(&k, noise, &u)?, Vec::new())
    } else {
        let mut cfg = settings.sdd;
        cfg.batch = cfg.batch.min(n);
        let cfg = cfg.with_epochs(settings.sdd_epochs, n);
        let out = sdd_solve(&mut DenseRows::new(&k), noise, &u, &cfg)?;
        (out.weights, out.trace)
    };
    let model = GpoModel {
        config: settings.wno.clone(),
        kernel: settings.kernel,
        params: fitted.params,
        hyper: fitted.hyper,
        normalizer,
        cache,
        weights,
        target_template: data.targets[0].clone(),
        train_dims,
    };
    Ok(TrainOutcome {
        model,
        init_trace: fitted.trace,
        sdd_trace,
    })
}

/// `‖pred − truth‖ / ‖truth‖` with uniform-grid quadrature weights (which
/// cancel in the ratio).
pub fn relative_l2(pred: &GridFunction, truth: &GridFunction) -> f64 {
    let num: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    let den: f64 = truth.values().iter().map(|t| t * t).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    (m, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<GridFunction>,
    pub rel_l2: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Band bounds and the fraction of grid points inside them.
    pub bands: Option<Vec<(GridFunction, GridFunction)>>,
    pub coverage: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    /// Posterior draws for bands; 0 disables sampling.
    pub samples: usize,
    pub level: f64,
    pub seed: u64,
    pub solver: SampleSolver,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            samples: 200,
            level: 0.95,
            seed: 0,
            solver: SampleSolver::Exact,
        }
    }
}

pub fn evaluate(
    model: &GpoModel,
    test: &OperatorDataset,
    settings: &EvalSettings,
) -> Result<Evaluation, PipelineError> {
    let predictions = model.predict_mean(&test.inputs)?;
    let rel_l2: Vec<f64> = predictions
        .iter()
        .zip(&test.targets)
        .map(|(p, t)| relative_l2(p, t))
        .collect();
    let (mean, std) = mean_std(&rel_l2);
    let (bands, coverage) = if settings.samples > 0 && !test.is_empty() {
        let set = pathwise_sample(model, &test.inputs, settings.samples, settings.seed, settings.solver)?;
        let bands = confidence_band(&set, settings.level)?;
        let (mut inside, mut total) = (0usize, 0usize);
        for ((lo, hi), t) in bands.iter().zip(&test.targets) {
            for ((l, h), v) in lo.values().iter().zip(hi.values()).zip(t.values()) {
                inside += usize::from(v >= l && v <= h);
                total += 1;
            }
        }
        (Some(bands), Some(inside as f64 / total.max(1) as f64))
    } else {
        (None, None)
    };
    Ok(Evaluation {
        predictions,
        rel_l2,
        mean,
        std,
        bands,
        coverage,
    })
}

/// Normalised targets of a dataset under a model's normaliser.
pub fn normalised_targets(model: &GpoModel, data: &OperatorDataset) -> Result<DMatrix<f64>, PipelineError> {
    Ok(model.normalizer.targets(&data.targets)?)
}

/// One cell of a sample-count sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub axis_value: usize,
    pub seed: u64,
    pub rel_l2: f64,
}

/// Trains and evaluates once per `(value, seed)`. The swept count replaces
/// `S_init` or `S_SDD`; the seed drives operator initialisation, the
/// likelihood subset and the batch order.
pub fn sweep(
    train_data: &OperatorDataset,
    test_data: &OperatorDataset,
    settings: &TrainSettings,
    axis: SweepAxis,
    values: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, PipelineError> {
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            let mut s = settings.clone();
            match axis {
                SweepAxis::SInit => s.init.s_init = value,
                SweepAxis::SSdd => s.s_sdd = Some(value),
            }
            s.model_seed = seed;
            s.init.seed = seed;
            s.sdd.seed = seed;
            let out = train(train_data, &s)?;
            let eval = evaluate(
                &out.model,
                test_data,
                &EvalSettings {
                    samples: 0,
                    ..EvalSettings::default()
                },
            )?;
            rows.push(SweepRow {
                axis_value: value,
                seed,
                rel_l2: eval.mean,
            });
        }
    }
    Ok(rows)
}

/// Median, minimum and maximum error per swept value, in first-seen order.
pub fn sweep_summary(rows: &[SweepRow]) -> Vec<(usize, f64, f64, f64)> {
    let mut values: Vec<usize> = Vec::new();
    for r in rows {
        if !values.contains(&r.axis_value) {
            values.push(r.axis_value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let mut e: Vec<f64> = rows.iter().filter(|r| r.axis_value == v).map(|r| r.rel_l2).collect();
            e.sort_by(f64::total_cmp);
            let mid = e.len() / 2;
            let median = if e.len() % 2 == 1 {
                e[mid]
            } else {
                0.5 * (e[mid - 1] + e[mid])
            };
            (v, median, e[0], e[e.len() - 1])
        })
        .collect()
}

/// Least-squares slope of `y` against `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
