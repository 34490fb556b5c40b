//! Stochastic dual descent for the representer weights `(K + σ_n² I)⁻¹ U`
//! with momentum, geometric iterate averaging and per-epoch monitoring.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exact_gp::TraceRow;
use crate::kernel::KernelRows;

/// Rows used for primal-loss monitoring on large problems.
pub const MONITOR_ROWS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum SddError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite update at step {step}; reduce the step size")]
    NonFinite { step: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SddConfig {
    pub steps: usize,
    pub batch: usize,
    /// Step size before the internal 1/N normalisation.
    pub beta: f64,
    pub momentum: f64,
    pub averaging: f64,
    pub seed: u64,
}

impl Default for SddConfig {
    fn default() -> Self {
        SddConfig {
            steps: 1000,
            batch: 32,
            beta: 0.5,
            momentum: 0.9,
            averaging: 0.9,
            seed: 0,
        }
    }
}

impl SddConfig {
    pub fn validate(&self, n: usize) -> Result<(), SddError> {
        if self.batch == 0 || self.batch > n {
            return Err(SddError::Config(format!("batch {} must lie in 1..={n}", self.batch)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(SddError::Config(format!("step size {} must be positive", self.beta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SddError::Config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !(self.averaging > 0.0 && self.averaging <= 1.0) {
            return Err(SddError::Config(format!(
                "averaging {} must lie in (0, 1]",
                self.averaging
            )));
        }
        Ok(())
    }

    /// Steps per epoch, `⌈N/B⌉`.
    pub fn epoch_len(&self, n: usize) -> usize {
        n.div_ceil(self.batch.max(1)).max(1)
    }

    /// Sets `steps` from a number of epochs over `n` rows.
    pub fn with_epochs(mut self, epochs: usize, n: usize) -> Self {
        self.steps = epochs * self.epoch_len(n);
        self
    }
}

/// Solver iterates stored row-major as `[N, d_u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SddState {
    rows: usize,
    cols: usize,
    pub a: Vec<f64>,
    pub v: Vec<f64>,
    pub a_bar: Vec<f64>,
    pub step: usize,
    last_grad_norm: f64,
}

impl SddState {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SddState {
            rows,
            cols,
            a: vec![0.0; rows * cols],
            v: vec![0.0; rows * cols],
            a_bar: vec![0.0; rows * cols],
            step: 0,
            last_grad_norm: 0.0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Frobenius norm of the most recent gradient estimate.
    pub fn last_grad_norm(&self) -> f64 {
        self.last_grad_norm
    }

    pub fn averaged(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.a_bar)
    }

    pub fn current(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.a)
    }
}

fn noisy(k: &DMatrix<f64>, noise: f64) -> DMatrix<f64> {
    let mut m = k.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += noise;
    }
    m
}

fn check_shapes(a: &DMatrix<f64>, k: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<(), SddError> {
    if !k.is_square() || k.nrows() != a.nrows() || a.shape() != u.shape() {
        return Err(SddError::Shape(format!(
            "A {:?}, K {:?}, U {:?}",
            a.shape(),
            k.shape(),
            u.shape()
        )));
    }
    Ok(())
}

/// `½ tr(Aᵀ (K + σ_n² I) A) − tr(Aᵀ U)`.
pub fn dual_objective(a: &DMatrix<f64>, k: &DMatrix<f64>, noise: f64, u: &DMatrix<f64>) -> Result<f64, SddError> {
    check_shapes(a, k, u)?;
    Ok(0.5 * a.dot(&(noisy(k, noise) * a)) - a.dot(u))
}

/// Exact dual gradient `(K + σ_n² I) A − U`.
pub fn dual_gradient(
    a: &DMatrix<f64>,
    k: &DMatrix<f64>,
    noise: f64,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SddError> {
    check_shapes(a, k, u)?;
    Ok(noisy(k, noise) * a - u)
}

/// `½‖U − K A‖² + (σ_n²/2) tr(Aᵀ K A)`.
pub fn primal_loss(a: &DMatrix<f64>, k: &DMatrix<f64>, noise: f64, u: &DMatrix<f64>) -> Result<f64, SddError> {
    check_shapes(a, k, u)?;
    let ka = k * a;
    Ok(0.5 * (u - &ka).norm_squared() + 0.5 * noise * a.dot(&ka))
}

/// One momentum step on the batch `batch` (indices may repeat).
pub fn sdd_step(
    state: &mut SddState,
    batch: &[usize],
    rows: &mut dyn KernelRows,
    noise: f64,
    u: &[f64],
    config: &SddConfig,
) -> Result<(), SddError> {
    let (n, du) = state.shape();
    if rows.len() != n || u.len() != n * du {
        return Err(SddError::Shape(format!(
            "kernel rows {} and targets {} against state {n}x{du}",
            rows.len(),
            u.len()
        )));
    }
    if batch.is_empty() {
        return Err(SddError::Config("empty batch".into()));
    }
    let rho = config.momentum;
    let p: Vec<f64> = state.a.iter().zip(&state.v).map(|(a, v)| a + rho * v).collect();
    let scale = n as f64 / batch.len() as f64;
    let mut touched: Vec<(usize, Vec<f64>)> = Vec::with_capacity(batch.len());
    let mut gsq = 0.0;
    for &i in batch {
        if i >= n {
            return Err(SddError::Shape(format!("batch index {i} out of range {n}")));
        }
        let ki = rows.row(i);
        let mut g = vec![0.0; du];
        for (j, &kij) in ki.iter().enumerate() {
            if kij == 0.0 {
                continue;
            }
            for (gc, pc) in g.iter_mut().zip(&p[j * du..(j + 1) * du]) {
                *gc += kij * pc;
            }
        }
        for c in 0..du {
            g[c] = scale * (g[c] + noise * p[i * du + c] - u[i * du + c]);
        }
        touched.push((i, g));
    }
    // Repeated indices accumulate.
    touched.sort_by_key(|t| t.0);
    let mut merged: Vec<(usize, Vec<f64>)> = Vec::with_capacity(touched.len());
    for (i, g) in touched {
        match merged.last_mut() {
            Some((j, acc)) if *j == i => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            _ => merged.push((i, g)),
        }
    }
    for (_, g) in &merged {
        gsq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let lr = config.beta / n as f64;
    for v in state.v.iter_mut() {
        *v *= rho;
    }
    for (i, g) in &merged {
        for (v, gc) in state.v[i * du..(i + 1) * du].iter_mut().zip(g) {
            *v -= lr * gc;
        }
    }
    let r = config.averaging;
    let mut finite = true;
    for ((a, v), ab) in state.a.iter_mut().zip(&state.v).zip(state.a_bar.iter_mut()) {
        *a += v;
        *ab = r * *a + (1.0 - r) * *ab;
        finite &= ab.is_finite();
    }
    state.step += 1;
    state.last_grad_norm = gsq.sqrt();
    if !finite || !gsq.is_finite() {
        return Err(SddError::NonFinite { step: state.step });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SddOutcome {
    pub weights: DMatrix<f64>,
    /// One row per epoch: primal loss of the averaged iterate and the mean
    /// gradient-estimate norm over the epoch.
    pub trace: Vec<TraceRow>,
}

/// Primal loss of the row-major weights `a`, estimated on `monitor` rows
/// and rescaled to the full set.
fn monitored_primal(rows: &mut dyn KernelRows, a: &[f64], u: &[f64], du: usize, noise: f64, monitor: &[usize]) -> f64 {
    let n = rows.len();
    let mut fit = 0.0;
    let mut reg = 0.0;
    for &i in monitor {
        let ki = rows.row(i);
        let mut ka = vec![0.0; du];
        for (j, &kij) in ki.iter().enumerate() {
            for (c, x) in ka.iter_mut().enumerate() {
                *x += kij * a[j * du + c];
            }
        }
        for c in 0..du {
            fit += (u[i * du + c] - ka[c]).powi(2);
            reg += a[i * du + c] * ka[c];
        }
    }
    let s = n as f64 / monitor.len().max(1) as f64;
    0.5 * s * fit + 0.5 * noise * s * reg
}

/// Runs `config.steps` steps from zero and returns the averaged iterate.
pub fn sdd_solve(
    rows: &mut dyn KernelRows,
    noise: f64,
    targets: &DMatrix<f64>,
    config: &SddConfig,
) -> Result<SddOutcome, SddError> {
    let (n, du) = targets.shape();
    if rows.len() != n {
        return Err(SddError::Shape(format!(
            "{} kernel rows against {n} targets",
            rows.len()
        )));
    }
    let mut state = SddState::zeros(n, du);
    if config.steps == 0 || n == 0 {
        return Ok(SddOutcome {
            weights: state.averaged(),
            trace: Vec::new(),
        });
    }
    config.validate(n)?;
    let u: Vec<f64> = targets.transpose().as_slice().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let monitor: Vec<usize> = if n <= MONITOR_ROWS {
        (0..n).collect()
    } else {
        let mut m =
            rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5dd), n, MONITOR_ROWS).into_vec();
        m.sort_unstable();
        m
    };
    let epoch = config.epoch_len(n);
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut gsum = 0.0;
    let mut batch = vec![0usize; config.batch];
    for t in 0..config.steps {
        for b in batch.iter_mut() {
            *b = rng.random_range(0..n);
        }
        sdd_step(&mut state, &batch, rows, noise, &u, config)?;
        gsum += state.last_grad_norm;
        let done = t + 1;
        if done % epoch == 0 || done == config.steps {
            let in_epoch = (done - 1) % epoch + 1;
            trace.push(TraceRow {
                step: done,
                loss: monitored_primal(rows, &state.a_bar, &u, du, noise, &monitor),
                grad_norm: gsum / in_epoch as f64,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            gsum = 0.0;
        }
    }
    Ok(SddOutcome {
        weights: state.averaged(),
        trace,
    })
}
