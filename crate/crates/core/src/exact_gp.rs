//! Dense exact GP inference: negative log marginal likelihood with
//! gradients through the kernel and the operator, Cholesky solves, and the
//! Adam-based initialiser that fits operator and kernel hyperparameters on
//! a training subset.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::GridFunction;
use crate::kernel::{BaseKernel, GramPrimitive, KernelError, KernelHyper};
use crate::tensor::{Primitive, Tape, Tensor, TensorError};
use crate::wno::{self, ParamVars, Plan, WnoConfig, WnoError, WnoParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum ExactGpError {
    #[error("Cholesky factorisation failed with jitter {jitter:e}; increase the noise floor or jitter")]
    Cholesky { jitter: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("negative log-likelihood diverged at step {step}")]
    Diverged {
        step: usize,
        last: Box<(WnoParams, KernelHyper)>,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Operator(#[from] WnoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Diagonal jitter used when `K + noise I` does not factorise as is.
pub fn jitter_for(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows().max(1) as f64;
    1e-8 * k.trace().abs() / n
}

/// Factorised `K + noise I` with representer weights for one right-hand side.
#[derive(Clone, Debug)]
pub struct ExactPosterior {
    chol: Cholesky<f64, Dyn>,
    alpha: DMatrix<f64>,
    jitter: f64,
}

impl ExactPosterior {
    pub fn fit(k: &DMatrix<f64>, noise: f64, targets: &DMatrix<f64>) -> Result<Self, ExactGpError> {
        if !k.is_square() || k.nrows() != targets.nrows() {
            return Err(ExactGpError::Shape(format!(
                "Gram {}x{} against targets {}x{}",
                k.nrows(),
                k.ncols(),
                targets.nrows(),
                targets.ncols()
            )));
        }
        if !(noise >= 0.0) {
            return Err(ExactGpError::Config(format!("noise variance {noise} must be >= 0")));
        }
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += noise;
        }
        // Jitter only when the plain factorisation fails, so well-posed
        // systems are solved to full precision.
        let (chol, jitter) = match Cholesky::new(a.clone()) {
            Some(c) => (c, 0.0),
            None => {
                let jitter = jitter_for(k).max(f64::MIN_POSITIVE);
                for i in 0..a.nrows() {
                    a[(i, i)] += jitter;
                }
                (Cholesky::new(a).ok_or(ExactGpError::Cholesky { jitter })?, jitter)
            }
        };
        let alpha = chol.solve(targets);
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(ExactGpError::Cholesky { jitter });
        }
        Ok(ExactPosterior { chol, alpha, jitter })
    }

    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `½ tr(Uᵀ α) + (d_u/2) logdet + (N d_u/2) log 2π`.
    pub fn nll(&self, targets: &DMatrix<f64>) -> f64 {
        let (n, du) = targets.shape();
        0.5 * targets.dot(&self.alpha) + 0.5 * du as f64 * self.log_det() + 0.5 * (n * du) as f64 * LN_2PI
    }

    /// Predictive mean `k* α` for cross-covariances `[M, N]`.
    pub fn predict_mean(&self, k_star: &DMatrix<f64>) -> DMatrix<f64> {
        k_star * &self.alpha
    }

    /// Predictive latent variance `k(z*,z*) − k*ᵀ (K + σ_n² I)⁻¹ k*` per test row.
    pub fn predict_variance(&self, k_star: &DMatrix<f64>, prior_variance: f64) -> Vec<f64> {
        let v = self.chol.solve(&k_star.transpose());
        (0..k_star.nrows())
            .map(|i| (prior_variance - k_star.row(i).dot(&v.column(i).transpose())).max(0.0))
            .collect()
    }
}

/// Exact representer weights `(K + noise I)⁻¹ U`.
pub fn cholesky_solve_oracle(
    k: &DMatrix<f64>,
    noise: f64,
    targets: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ExactGpError> {
    Ok(ExactPosterior::fit(k, noise, targets)?.alpha)
}

/// NLL value and its gradient with respect to the noisy Gram matrix.
/// Returns `(nll, dNLL/dK̃)` with `dNLL/dK̃ = ½(d_u K̃⁻¹ − α αᵀ)`.
pub fn nll_with_gram_grad(
    k: &DMatrix<f64>,
    noise: f64,
    targets: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>), ExactGpError> {
    let post = ExactPosterior::fit(k, noise, targets)?;
    let n = k.nrows();
    let du = targets.ncols() as f64;
    let inv = post.chol.inverse();
    let aat = &post.alpha * post.alpha.transpose();
    let g = (inv * du - aat) * 0.5;
    Ok((
        post.nll(targets),
        DMatrix::from_fn(n, n, |i, j| 0.5 * (g[(i, j)] + g[(j, i)])),
    ))
}

/// Gradients of the NLL. `hyper` holds derivatives with respect to the
/// log-parameters in the same layout as [`KernelHyper`].
#[derive(Clone, Debug)]
pub struct NllEval {
    pub value: f64,
    pub hyper: KernelHyper,
    /// Operator parameter gradients in [`WnoParams::tensors`] order, when
    /// requested.
    pub params: Option<Vec<Tensor>>,
}

impl NllEval {
    pub fn grad_norm(&self) -> f64 {
        let h = self.hyper;
        let mut s = h.log_lengthscale.powi(2) + h.log_variance.powi(2) + h.log_noise.powi(2);
        if let Some(p) = &self.params {
            s += p.iter().map(|t| t.norm().powi(2)).sum::<f64>();
        }
        s.sqrt()
    }
}

/// One training problem for the exact GP: inputs on a common grid and
/// targets as a `[N, d_u]` matrix.
#[derive(Clone, Copy, Debug)]
pub struct GpProblem<'a> {
    pub inputs: &'a [&'a GridFunction],
    pub targets: &'a DMatrix<f64>,
    pub config: &'a WnoConfig,
    pub kernel: BaseKernel,
}

impl GpProblem<'_> {
    fn check(&self) -> Result<(), ExactGpError> {
        if self.inputs.is_empty() {
            return Err(ExactGpError::Config("empty training subset".into()));
        }
        if self.inputs.len() != self.targets.nrows() {
            return Err(ExactGpError::Shape(format!(
                "{} inputs against {} target rows",
                self.inputs.len(),
                self.targets.nrows()
            )));
        }
        Ok(())
    }

    /// Quadrature-scaled latent features `[N, D]` and the scale applied.
    fn features(&self, params: &WnoParams) -> Result<(Vec<f64>, usize, f64), ExactGpError> {
        let lat = wno::latents(self.config, params, self.inputs)?;
        let scale = self.inputs[0].cell_volume().sqrt();
        let d = lat.first().map_or(0, |l| l.len());
        let feats: Vec<f64> = lat.into_iter().flatten().map(|v| v * scale).collect();
        Ok((feats, d, scale))
    }

    /// NLL and gradients. Operator gradients are accumulated over input
    /// chunks of `chunk` samples so the tape never holds the whole set.
    pub fn nll(
        &self,
        params: &WnoParams,
        hyper: &KernelHyper,
        operator_grads: bool,
        chunk: usize,
    ) -> Result<NllEval, ExactGpError> {
        self.check()?;
        let n = self.inputs.len();
        let (feats, d, scale) = self.features(params)?;
        let prim = GramPrimitive { kernel: self.kernel };
        let kt = prim.forward(&[
            &Tensor::new(vec![n, d], feats.clone())?,
            &Tensor::new(vec![2], vec![hyper.log_lengthscale, hyper.log_variance])?,
        ])?;
        let k = DMatrix::from_row_slice(n, n, kt.data());
        let (value, dk) = nll_with_gram_grad(&k, hyper.noise(), self.targets)?;
        let g_row: Vec<f64> = (0..n * n).map(|t| dk[(t / n, t % n)]).collect();
        let (g_feat, [g_logl, g_logs2]) = prim.backward(&feats, n, d, hyper, &g_row);
        let hyper_grad = KernelHyper {
            log_lengthscale: g_logl,
            log_variance: g_logs2,
            log_noise: hyper.noise() * dk.trace(),
        };
        let params_grad = if operator_grads {
            Some(self.operator_grads(params, &g_feat, d, scale, chunk)?)
        } else {
            None
        };
        Ok(NllEval {
            value,
            hyper: hyper_grad,
            params: params_grad,
        })
    }

    fn operator_grads(
        &self,
        params: &WnoParams,
        g_feat: &[f64],
        d: usize,
        scale: f64,
        chunk: usize,
    ) -> Result<Vec<Tensor>, ExactGpError> {
        let plan = Plan::new(self.config, &params.coarse_dims, self.inputs[0].dims())?;
        let mut acc: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut tape = Tape::new();
        let chunk = chunk.max(1);
        for (c, fields) in self.inputs.chunks(chunk).enumerate() {
            tape.reset();
            let vars = ParamVars::register(&mut tape, params, true);
            let x = tape.constant(wno::input_tensor(self.config, fields)?);
            let out = wno::forward_on_tape(&mut tape, self.config, &vars, x, &plan)?;
            let start = c * chunk * d;
            let seed: Vec<f64> = g_feat[start..start + fields.len() * d]
                .iter()
                .map(|g| g * scale)
                .collect();
            let seed = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), seed)?);
            let weighted = tape.mul(out, seed)?;
            let total = tape.sum(weighted)?;
            let mut grads = tape.backward(total)?;
            for (a, v) in acc.iter_mut().zip(vars.all()) {
                if let Some(g) = grads.take(*v) {
                    *a = Tensor::new(
                        a.shape().to_vec(),
                        a.data().iter().zip(g.data()).map(|(x, y)| x + y).collect(),
                    )?;
                }
            }
        }
        Ok(acc)
    }
}

/// Median pairwise latent distance, a scale-aware initial lengthscale.
pub fn median_distance(features: &[f64], rows: usize, dim: usize) -> f64 {
    let mut d = Vec::with_capacity(rows * rows.saturating_sub(1) / 2);
    for i in 0..rows {
        for j in i + 1..rows {
            let a = &features[i * dim..(i + 1) * dim];
            let b = &features[j * dim..(j + 1) * dim];
            d.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Adaptive-moment optimiser over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub s_init: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate for the operator weights; defaults to `lr`.
    pub operator_lr: Option<f64>,
    pub train_operator: bool,
    pub chunk: usize,
    pub seed: u64,
    pub max_variance: f64,
    pub min_noise: f64,
    pub initial_noise: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            s_init: 500,
            epochs: 100,
            lr: 1e-3,
            operator_lr: None,
            train_operator: true,
            chunk: 32,
            seed: 0,
            max_variance: 2.0,
            min_noise: 1e-3,
            initial_noise: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct InitOutcome {
    pub params: WnoParams,
    pub hyper: KernelHyper,
    pub subset: Vec<usize>,
    pub trace: Vec<TraceRow>,
}

/// Uniformly seeded subset of `s` indices out of `n`, sorted.
pub fn init_subset(n: usize, s: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, s.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

fn clamp_hyper(h: &mut KernelHyper, cfg: &InitConfig) {
    h.log_variance = h.log_variance.min(cfg.max_variance.ln());
    h.log_noise = h.log_noise.max(cfg.min_noise.ln());
}

/// Fits operator parameters and kernel hyperparameters by minimising the
/// NLL on a seeded subset of `S_init` samples with full-batch Adam steps.
/// The trace holds the NLL before each step plus a final row.
pub fn init_train(
    inputs: &[GridFunction],
    targets: &DMatrix<f64>,
    config: &WnoConfig,
    kernel: BaseKernel,
    params: WnoParams,
    init: &InitConfig,
) -> Result<InitOutcome, ExactGpError> {
    if init.s_init == 0 {
        return Err(ExactGpError::Config("S_init must be at least 1".into()));
    }
    if init.s_init > inputs.len() {
        return Err(ExactGpError::Config(format!(
            "S_init {} exceeds dataset size {}",
            init.s_init,
            inputs.len()
        )));
    }
    if targets.nrows() != inputs.len() {
        return Err(ExactGpError::Shape(format!(
            "{} inputs against {} target rows",
            inputs.len(),
            targets.nrows()
        )));
    }
    let subset = init_subset(inputs.len(), init.s_init, init.seed);
    let sub_inputs: Vec<&GridFunction> = subset.iter().map(|&i| &inputs[i]).collect();
    let sub_targets = targets.select_rows(subset.iter());
    let problem = GpProblem {
        inputs: &sub_inputs,
        targets: &sub_targets,
        config,
        kernel,
    };

    let (feats, d, _) = problem.features(&params)?;
    let mut hyper = KernelHyper::new(median_distance(&feats, subset.len(), d), 1.0, init.initial_noise);
    clamp_hyper(&mut hyper, init);
    let mut params = params;
    let n_params: usize = params.tensors().iter().map(|t| t.len()).sum();
    let mut opt_h = Adam::new(init.lr, 3);
    let mut opt_p = Adam::new(init.operator_lr.unwrap_or(init.lr), n_params);
    let mut trace = Vec::with_capacity(init.epochs + 1);
    let start = Instant::now();

    for step in 0..=init.epochs {
        let last_step = step == init.epochs;
        let eval = match problem.nll(&params, &hyper, init.train_operator && !last_step, init.chunk) {
            Ok(e) if e.value.is_finite() => e,
            _ => {
                return Err(ExactGpError::Diverged {
                    step,
                    last: Box::new((params, hyper)),
                })
            }
        };
        trace.push(TraceRow {
            step,
            loss: eval.value,
            grad_norm: eval.grad_norm(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if last_step {
            break;
        }
        let mut h = [hyper.log_lengthscale, hyper.log_variance, hyper.log_noise];
        opt_h.step(
            &mut h,
            &[
                eval.hyper.log_lengthscale,
                eval.hyper.log_variance,
                eval.hyper.log_noise,
            ],
        );
        hyper = KernelHyper {
            log_lengthscale: h[0],
            log_variance: h[1],
            log_noise: h[2],
        };
        clamp_hyper(&mut hyper, init);
        if let Some(grads) = eval.params {
            let mut flat: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
            let g: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
            opt_p.step(&mut flat, &g);
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(ExactGpError::Diverged {
                    step,
                    last: Box::new((params, hyper)),
                });
            }
            let mut off = 0;
            for t in params.tensors_mut() {
                let len = t.len();
                *t = Tensor::new(t.shape().to_vec(), flat[off..off + len].to_vec())?;
                off += len;
            }
        }
    }
    Ok(InitOutcome {
        params,
        hyper,
        subset,
        trace,
    })
}
