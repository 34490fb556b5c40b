//! Covariance kernels evaluated on operator latents, the latent cache and
//! Gram-matrix assembly.
//!
//! Latent fields are compared with the discretised L2 function-space norm:
//! cached features are pre-scaled by the square root of the cell volume so
//! a plain Euclidean distance between rows is the quadrature-weighted one.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::GridFunction;
use crate::tensor::{Primitive, Tensor, TensorError};
use crate::wno::{self, WnoConfig, WnoError, WnoParams};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("latent channel/length mismatch: {0} vs {1}")]
    Mismatch(usize, usize),
    #[error("non-finite kernel input")]
    NonFinite,
    #[error("latent cache is stale (built for {cached}, expected {expected}); re-embed the dataset")]
    StaleCache { cached: String, expected: String },
    #[error("row index {index} out of range for {rows} cached latents")]
    Index { index: usize, rows: usize },
    #[error("unknown base kernel '{0}' (expected matern52 or rbf)")]
    UnknownKernel(String),
    #[error(transparent)]
    Operator(#[from] WnoError),
    #[error("cannot move latent to the training grid: {0}")]
    Grid(String),
}

/// Log-space kernel and likelihood hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelHyper {
    pub log_lengthscale: f64,
    pub log_variance: f64,
    pub log_noise: f64,
}

impl KernelHyper {
    pub fn new(lengthscale: f64, variance: f64, noise: f64) -> Self {
        KernelHyper {
            log_lengthscale: lengthscale.ln(),
            log_variance: variance.ln(),
            log_noise: noise.ln(),
        }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    /// Process variance.
    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    /// Likelihood (noise) variance, added to the Gram diagonal.
    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn is_valid(&self) -> bool {
        [self.lengthscale(), self.variance(), self.noise()]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BaseKernel {
    #[default]
    Matern52,
    Rbf,
}

impl fmt::Display for BaseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseKernel::Matern52 => "matern52",
            BaseKernel::Rbf => "rbf",
        })
    }
}

impl FromStr for BaseKernel {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "matern52" => Ok(BaseKernel::Matern52),
            "rbf" => Ok(BaseKernel::Rbf),
            _ => Err(KernelError::UnknownKernel(s.to_string())),
        }
    }
}

const SQRT5: f64 = 2.236_067_977_499_79;

pub fn matern52(d: f64, hyper: &KernelHyper) -> f64 {
    let r = SQRT5 * d / hyper.lengthscale();
    hyper.variance() * (1.0 + r + r * r / 3.0) * (-r).exp()
}

pub fn rbf(d: f64, hyper: &KernelHyper) -> f64 {
    let l = hyper.lengthscale();
    hyper.variance() * (-0.5 * d * d / (l * l)).exp()
}

impl BaseKernel {
    pub fn eval(self, d: f64, hyper: &KernelHyper) -> f64 {
        match self {
            BaseKernel::Matern52 => matern52(d, hyper),
            BaseKernel::Rbf => rbf(d, hyper),
        }
    }

    /// Value `k`, `dk/d(d^2)` and `dk/dlog l` at squared distance `d2`.
    /// The first derivative is finite at zero distance for both kernels.
    fn with_grads(self, d2: f64, hyper: &KernelHyper) -> (f64, f64, f64) {
        let (l, s2) = (hyper.lengthscale(), hyper.variance());
        match self {
            BaseKernel::Matern52 => {
                let r = SQRT5 * d2.sqrt() / l;
                let e = (-r).exp();
                let k = s2 * (1.0 + r + r * r / 3.0) * e;
                let dk_dd2 = -s2 * 5.0 / (6.0 * l * l) * (1.0 + r) * e;
                let dk_dlogl = s2 * r * r * (1.0 + r) * e / 3.0;
                (k, dk_dd2, dk_dlogl)
            }
            BaseKernel::Rbf => {
                let k = s2 * (-0.5 * d2 / (l * l)).exp();
                (k, -0.5 * k / (l * l), k * d2 / (l * l))
            }
        }
    }
}

/// Quadrature-weighted L2 distance between two latent fields stored
/// channel-major on the same grid with cell volume `cell_volume`.
pub fn latent_distance(a: &[f64], b: &[f64], cell_volume: f64) -> Result<f64, KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::Mismatch(a.len(), b.len()));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if !s.is_finite() {
        return Err(KernelError::NonFinite);
    }
    Ok((cell_volume * s).sqrt())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hex digest identifying a dataset embedded with particular parameters.
pub fn fingerprint(dataset_id: &str, params: &WnoParams, config: &WnoConfig) -> String {
    let mut h = Sha256::new();
    h.update(dataset_id.as_bytes());
    h.update(format!("{config:?}").as_bytes());
    h.update(format!("{:?}", params.coarse_dims).as_bytes());
    for t in params.tensors() {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Scaled latent features for a set of inputs, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCache {
    rows: usize,
    dim: usize,
    features: Vec<f64>,
    fingerprint: String,
}

impl LatentCache {
    /// Builds a cache from raw latent vectors on a grid with the given cell
    /// volume.
    pub fn from_latents(latents: Vec<Vec<f64>>, cell_volume: f64, fingerprint: String) -> Result<Self, KernelError> {
        let dim = latents.first().map_or(0, |l| l.len());
        let scale = cell_volume.sqrt();
        let mut features = Vec::with_capacity(latents.len() * dim);
        for l in &latents {
            if l.len() != dim {
                return Err(KernelError::Mismatch(l.len(), dim));
            }
            features.extend(l.iter().map(|v| v * scale));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite);
        }
        Ok(LatentCache {
            rows: latents.len(),
            dim,
            features,
            fingerprint,
        })
    }

    /// Rebuilds a cache from already scaled features, as returned by
    /// [`LatentCache::features`].
    pub fn from_features(features: Vec<f64>, dim: usize, fingerprint: String) -> Result<Self, KernelError> {
        if dim == 0 && !features.is_empty() || dim != 0 && !features.len().is_multiple_of(dim) {
            return Err(KernelError::Mismatch(features.len(), dim));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite);
        }
        Ok(LatentCache {
            rows: features.len().checked_div(dim).unwrap_or(0),
            dim,
            features,
            fingerprint,
        })
    }

    /// Embeds every input with one operator pass per batch. When
    /// `latent_dims` differs from the input grid the latent is restricted to
    /// it, so inputs at a finer resolution are compared on the training grid.
    pub fn build(
        inputs: &[GridFunction],
        params: &WnoParams,
        config: &WnoConfig,
        latent_dims: Option<&[usize]>,
        fingerprint: String,
        batch: usize,
    ) -> Result<Self, KernelError> {
        let mut latents = Vec::with_capacity(inputs.len());
        let mut cell_volume = 1.0;
        for chunk in inputs.chunks(batch.max(1)) {
            let refs: Vec<&GridFunction> = chunk.iter().collect();
            let out = wno::latents(config, params, &refs)?;
            for (field, lat) in chunk.iter().zip(out) {
                let g = field
                    .with_values(params.latent_channels(), lat)
                    .map_err(|e| KernelError::Grid(e.to_string()))?;
                let g = match latent_dims {
                    Some(d) if d != field.dims() => g.restrict(d).map_err(|e| KernelError::Grid(e.to_string()))?,
                    _ => g,
                };
                cell_volume = g.cell_volume();
                latents.push(g.into_values());
            }
        }
        Self::from_latents(latents, cell_volume, fingerprint)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Fails unless the cache was produced by the expected parameters.
    pub fn check(&self, expected: &str) -> Result<(), KernelError> {
        if self.fingerprint != expected {
            return Err(KernelError::StaleCache {
                cached: short(&self.fingerprint),
                expected: short(expected),
            });
        }
        Ok(())
    }

    /// Weighted distance between row `i` of `self` and row `j` of `other`.
    pub fn distance(&self, i: usize, other: &LatentCache, j: usize) -> f64 {
        squared_distance(self.row(i), other.row(j)).sqrt()
    }
}

fn short(fp: &str) -> String {
    fp.chars().take(12).collect()
}

/// `K[a, b] = k(d(row_i[a], row_j[b]))`.
pub fn gram(
    left: &LatentCache,
    rows: &[usize],
    right: &LatentCache,
    cols: &[usize],
    kernel: BaseKernel,
    hyper: &KernelHyper,
) -> Result<DMatrix<f64>, KernelError> {
    if left.dim != right.dim && !left.is_empty() && !right.is_empty() {
        return Err(KernelError::Mismatch(left.dim, right.dim));
    }
    for (&i, c) in rows.iter().map(|i| (i, left)).chain(cols.iter().map(|j| (j, right))) {
        if i >= c.rows {
            return Err(KernelError::Index { index: i, rows: c.rows });
        }
    }
    let symmetric = std::ptr::eq(left, right) && rows == cols;
    let mut k = DMatrix::zeros(rows.len(), cols.len());
    for (a, &i) in rows.iter().enumerate() {
        let start = if symmetric { a } else { 0 };
        for (b, &j) in cols.iter().enumerate().skip(start) {
            let v = kernel.eval(left.distance(i, right, j), hyper);
            k[(a, b)] = v;
            if symmetric {
                k[(b, a)] = v;
            }
        }
    }
    Ok(k)
}

/// Full square Gram matrix of a cache against itself.
pub fn gram_full(cache: &LatentCache, kernel: BaseKernel, hyper: &KernelHyper) -> DMatrix<f64> {
    let idx: Vec<usize> = (0..cache.len()).collect();
    gram(cache, &idx, cache, &idx, kernel, hyper).expect("indices in range")
}

/// Source of Gram rows for iterative solvers.
pub trait KernelRows {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Row `i` of the noiseless Gram matrix.
    fn row(&mut self, i: usize) -> &[f64];
}

/// Rows backed by an explicit matrix.
pub struct DenseRows {
    n: usize,
    data: Vec<f64>,
}

impl DenseRows {
    pub fn new(k: &DMatrix<f64>) -> Self {
        // Row-major copy: nalgebra storage is column-major and K is symmetric
        // for our use, but the transpose keeps this correct in general.
        let t = k.transpose();
        DenseRows {
            n: k.nrows(),
            data: t.as_slice().to_vec(),
        }
    }
}

impl KernelRows for DenseRows {
    fn len(&self) -> usize {
        self.n
    }

    fn row(&mut self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Rows evaluated on demand from cached latents and memoised.
pub struct LazyGramRows<'a> {
    cache: &'a LatentCache,
    kernel: BaseKernel,
    hyper: KernelHyper,
    memo: Vec<Option<Vec<f64>>>,
}

impl<'a> LazyGramRows<'a> {
    pub fn new(cache: &'a LatentCache, kernel: BaseKernel, hyper: KernelHyper) -> Self {
        LazyGramRows {
            cache,
            kernel,
            hyper,
            memo: vec![None; cache.len()],
        }
    }

    pub fn computed_rows(&self) -> usize {
        self.memo.iter().filter(|r| r.is_some()).count()
    }
}

impl KernelRows for LazyGramRows<'_> {
    fn len(&self) -> usize {
        self.cache.len()
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if self.memo[i].is_none() {
            let c = self.cache;
            let r = (0..c.len())
                .map(|j| self.kernel.eval(c.distance(i, c, j), &self.hyper))
                .collect();
            self.memo[i] = Some(r);
        }
        self.memo[i].as_deref().expect("filled above")
    }
}

/// Differentiable Gram assembly: inputs are features `[M, D]` (already
/// quadrature-scaled) and `[log l, log s2]`; output is the `[M, M]` Gram
/// matrix without the noise term.
#[derive(Debug, Clone, Copy)]
pub struct GramPrimitive {
    pub kernel: BaseKernel,
}

impl GramPrimitive {
    fn hyper(t: &Tensor) -> Result<KernelHyper, TensorError> {
        if t.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gram".into(),
                shape: t.shape().to_vec(),
                reason: "expected [log lengthscale, log variance]".into(),
            });
        }
        Ok(KernelHyper {
            log_lengthscale: t.data()[0],
            log_variance: t.data()[1],
            log_noise: 0.0,
        })
    }

    fn dims(x: &Tensor) -> Result<(usize, usize), TensorError> {
        match x.shape() {
            [m, d] => Ok((*m, *d)),
            s => Err(TensorError::InvalidShape {
                op: "gram".into(),
                shape: s.to_vec(),
                reason: "features must be [rows, dim]".into(),
            }),
        }
    }

    /// Vector-Jacobian product for an upstream gradient `g` (`[M, M]`,
    /// row-major) returning gradients for the features and the two
    /// log-hyperparameters.
    pub fn backward(
        &self,
        features: &[f64],
        m: usize,
        d: usize,
        hyper: &KernelHyper,
        g: &[f64],
    ) -> (Vec<f64>, [f64; 2]) {
        let mut gx = vec![0.0; m * d];
        let (mut g_logl, mut g_logs2) = (0.0, 0.0);
        let mut coef = vec![0.0; m];
        for i in 0..m {
            let xi = &features[i * d..(i + 1) * d];
            let mut csum = 0.0;
            for j in 0..m {
                let gij = g[i * m + j];
                let gs = gij + g[j * m + i];
                let xj = &features[j * d..(j + 1) * d];
                let d2 = squared_distance(xi, xj);
                let (k, dk_dd2, dk_dlogl) = self.kernel.with_grads(d2, hyper);
                g_logs2 += gij * k;
                g_logl += gij * dk_dlogl;
                // d(d2)/dx_i = 2 (x_i - x_j); symmetric contributions from
                // both K[i,j] and K[j,i].
                let c = if i == j { 0.0 } else { 2.0 * gs * dk_dd2 };
                coef[j] = c;
                csum += c;
            }
            let gxi = &mut gx[i * d..(i + 1) * d];
            for (t, v) in gxi.iter_mut().enumerate() {
                *v = csum * xi[t];
            }
            for (j, &c) in coef.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let xj = &features[j * d..(j + 1) * d];
                for (v, &x) in gxi.iter_mut().zip(xj) {
                    *v -= c * x;
                }
            }
        }
        (gx, [g_logl, g_logs2])
    }
}

impl Primitive for GramPrimitive {
    fn name(&self) -> &'static str {
        "gram"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let (m, d) = Self::dims(inputs[0])?;
        let hyper = Self::hyper(inputs[1])?;
        let x = inputs[0].data();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let d2 = squared_distance(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
                let v = self.kernel.eval(d2.sqrt(), &hyper);
                out[i * m + j] = v;
                out[j * m + i] = v;
            }
        }
        Tensor::new(vec![m, m], out)
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>, TensorError> {
        let (m, d) = Self::dims(inputs[0])?;
        let hyper = Self::hyper(inputs[1])?;
        let (gx, gh) = self.backward(inputs[0].data(), m, d, &hyper, g.data());
        Ok(vec![
            Tensor::new(vec![m, d], gx)?,
            Tensor::new(inputs[1].shape().to_vec(), gh.to_vec())?,
        ])
    }
}
