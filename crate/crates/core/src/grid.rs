//! Fields sampled on uniform grids, plus the resampling used to move data
//! between resolutions.
//!
//! Periodic fields live on node grids `x_i = i * L / n`; Dirichlet fields
//! live on cell-centred grids `x_i = (i + 1/2) * L / n` and vanish on the
//! boundary.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid function needs {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("grid function contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("cannot resample grid {from:?} to {to:?}: {reason}")]
    Resample {
        from: Vec<usize>,
        to: Vec<usize>,
        reason: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

impl Boundary {
    pub fn name(self) -> &'static str {
        match self {
            Boundary::Periodic => "periodic",
            Boundary::Dirichlet => "dirichlet",
        }
    }

    /// Coordinate of sample `i` on an axis of `n` samples and length `extent`.
    pub fn coordinate(self, i: usize, n: usize, extent: f64) -> f64 {
        match self {
            Boundary::Periodic => extent * i as f64 / n as f64,
            Boundary::Dirichlet => extent * (i as f64 + 0.5) / n as f64,
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Boundary {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "periodic" => Ok(Boundary::Periodic),
            "dirichlet" => Ok(Boundary::Dirichlet),
            _ => Err(GridError::Invalid(format!("unknown boundary '{s}'"))),
        }
    }
}

/// A multi-channel real field on a uniform 1D or 2D grid.
///
/// Values are stored channel-major, `[channels, dims...]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    channels: usize,
    dims: Vec<usize>,
    extents: Vec<f64>,
    boundary: Boundary,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(
        channels: usize,
        dims: Vec<usize>,
        extents: Vec<f64>,
        boundary: Boundary,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        if channels == 0 || dims.is_empty() || dims.len() > 2 || dims.contains(&0) {
            return Err(GridError::Invalid(format!("{channels} channels on grid {dims:?}")));
        }
        if extents.len() != dims.len() || extents.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(GridError::Invalid(format!("extents {extents:?}")));
        }
        let expected = channels * dims.iter().product::<usize>();
        if values.len() != expected {
            return Err(GridError::Length {
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(GridFunction {
            channels,
            dims,
            extents,
            boundary,
            values,
        })
    }

    /// Single-channel field on the unit interval or square.
    pub fn unit(dims: Vec<usize>, boundary: Boundary, values: Vec<f64>) -> Result<Self, GridError> {
        let extents = vec![1.0; dims.len()];
        Self::new(1, dims, extents, boundary, values)
    }

    /// Evaluates `f` at every grid coordinate of a single-channel field.
    pub fn from_fn(
        dims: Vec<usize>,
        extents: Vec<f64>,
        boundary: Boundary,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Self, GridError> {
        let coords = coordinates(&dims, &extents, boundary);
        let values = coords.iter().map(|c| f(c)).collect();
        Self::new(1, dims, extents, boundary, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn points(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.points();
        &self.values[c * p..(c + 1) * p]
    }

    /// Quadrature weight of one grid cell (the cell volume).
    pub fn cell_volume(&self) -> f64 {
        self.extents
            .iter()
            .zip(&self.dims)
            .map(|(e, &n)| e / n as f64)
            .product()
    }

    /// Discrete L2 norm over all channels with cell-volume weights.
    pub fn l2_norm(&self) -> f64 {
        (self.cell_volume() * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    /// Same grid metadata with different values.
    pub fn with_values(&self, channels: usize, values: Vec<f64>) -> Result<Self, GridError> {
        Self::new(channels, self.dims.clone(), self.extents.clone(), self.boundary, values)
    }

    /// Coordinates of every grid point, row-major.
    pub fn coordinates(&self) -> Vec<Vec<f64>> {
        coordinates(&self.dims, &self.extents, self.boundary)
    }

    /// Moves the field to a coarser grid whose extents divide these ones.
    ///
    /// Periodic node grids are subsampled (coarse nodes coincide with fine
    /// nodes); cell-centred grids average the fine cells inside each coarse
    /// cell.
    pub fn restrict(&self, dims: &[usize]) -> Result<Self, GridError> {
        let factors = self.factors(dims, false)?;
        if factors.iter().all(|&f| f == 1) {
            return Ok(self.clone());
        }
        let mut out = self.values.clone();
        let mut cur = self.dims.clone();
        for axis in 0..dims.len() {
            let f = factors[axis];
            let m = dims[axis];
            let boundary = self.boundary;
            out = map_axis(&out, self.channels, &cur, axis, m, |line| match boundary {
                Boundary::Periodic => (0..m).map(|i| line[i * f]).collect(),
                Boundary::Dirichlet => (0..m)
                    .map(|i| line[i * f..(i + 1) * f].iter().sum::<f64>() / f as f64)
                    .collect(),
            });
            cur[axis] = m;
        }
        self.resampled(dims, out)
    }

    /// Band-limited interpolation onto a finer grid whose size is an integer
    /// multiple of this one: zero-padded Fourier interpolation for periodic
    /// fields and odd-reflection sine interpolation for Dirichlet fields.
    pub fn upsample(&self, dims: &[usize]) -> Result<Self, GridError> {
        let factors = self.factors(dims, true)?;
        if factors.iter().all(|&f| f == 1) {
            return Ok(self.clone());
        }
        let mut out = self.values.clone();
        let mut cur = self.dims.clone();
        for axis in 0..dims.len() {
            let (n, m) = (cur[axis], dims[axis]);
            if n == m {
                continue;
            }
            out = match self.boundary {
                Boundary::Periodic => {
                    let mut planner = FftPlanner::new();
                    let fwd = planner.plan_fft_forward(n);
                    let inv = planner.plan_fft_inverse(m);
                    map_axis(&out, self.channels, &cur, axis, m, |line| {
                        fourier_upsample(line, m, fwd.as_ref(), inv.as_ref())
                    })
                }
                Boundary::Dirichlet => {
                    let interp = sine_interpolator(n, m);
                    map_axis(&out, self.channels, &cur, axis, m, |line| {
                        (&interp * nalgebra::DVector::from_column_slice(line))
                            .iter()
                            .copied()
                            .collect()
                    })
                }
            };
            cur[axis] = m;
        }
        self.resampled(dims, out)
    }

    /// Restricts or upsamples as needed to reach `dims`.
    pub fn resample(&self, dims: &[usize]) -> Result<Self, GridError> {
        if dims == self.dims.as_slice() {
            Ok(self.clone())
        } else if dims.iter().zip(&self.dims).all(|(a, b)| a <= b) {
            self.restrict(dims)
        } else {
            self.upsample(dims)
        }
    }

    fn factors(&self, dims: &[usize], up: bool) -> Result<Vec<usize>, GridError> {
        let err = |reason: &str| GridError::Resample {
            from: self.dims.clone(),
            to: dims.to_vec(),
            reason: reason.to_string(),
        };
        if dims.len() != self.dims.len() {
            return Err(err("rank differs"));
        }
        dims.iter()
            .zip(&self.dims)
            .map(|(&to, &from)| {
                let (big, small) = if up { (to, from) } else { (from, to) };
                if small == 0 || big % small != 0 {
                    Err(err("sizes are not integer multiples"))
                } else {
                    Ok(big / small)
                }
            })
            .collect()
    }

    fn resampled(&self, dims: &[usize], values: Vec<f64>) -> Result<Self, GridError> {
        Self::new(
            self.channels,
            dims.to_vec(),
            self.extents.clone(),
            self.boundary,
            values,
        )
    }
}

/// Row-major coordinates of every point on a grid.
pub fn coordinates(dims: &[usize], extents: &[f64], boundary: Boundary) -> Vec<Vec<f64>> {
    match dims {
        [n] => (0..*n).map(|i| vec![boundary.coordinate(i, *n, extents[0])]).collect(),
        [n0, n1] => {
            let mut out = Vec::with_capacity(n0 * n1);
            for i in 0..*n0 {
                for j in 0..*n1 {
                    out.push(vec![
                        boundary.coordinate(i, *n0, extents[0]),
                        boundary.coordinate(j, *n1, extents[1]),
                    ]);
                }
            }
            out
        }
        _ => Vec::new(),
    }
}

/// Applies `f` to every line along `axis`, producing lines of length `m`.
fn map_axis(
    values: &[f64],
    channels: usize,
    dims: &[usize],
    axis: usize,
    m: usize,
    mut f: impl FnMut(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let n = dims[axis];
    let outer: usize = channels * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * m * inner];
    let mut line = vec![0.0; n];
    for o in 0..outer {
        for q in 0..inner {
            for (i, l) in line.iter_mut().enumerate() {
                *l = values[(o * n + i) * inner + q];
            }
            let res = f(&line);
            for (i, r) in res.into_iter().enumerate() {
                out[(o * m + i) * inner + q] = r;
            }
        }
    }
    out
}

fn fourier_upsample(line: &[f64], m: usize, fwd: &dyn rustfft::Fft<f64>, inv: &dyn rustfft::Fft<f64>) -> Vec<f64> {
    let n = line.len();
    let mut coeffs: Vec<Complex<f64>> = line.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut coeffs);
    let mut big = vec![Complex::new(0.0, 0.0); m];
    let half = n / 2;
    for k in 0..n {
        if n.is_multiple_of(2) && k == half {
            // Split the Nyquist mode symmetrically so the result stays real.
            big[half] += coeffs[k] * 0.5;
            big[m - half] += coeffs[k] * 0.5;
        } else if k < half || (n % 2 == 1 && k == half) {
            big[k] = coeffs[k];
        } else {
            big[m - (n - k)] = coeffs[k];
        }
    }
    inv.process(&mut big);
    let scale = 1.0 / n as f64;
    big.iter().map(|c| c.re * scale).collect()
}

/// Matrix mapping `n` cell-centred samples of a field vanishing at both ends
/// to `m` cell-centred samples, through the sine series `sum_k b_k sin(k pi x)`.
fn sine_interpolator(n: usize, m: usize) -> DMatrix<f64> {
    let basis = |pts: usize| {
        DMatrix::from_fn(pts, n, |i, k| {
            let x = (i as f64 + 0.5) / pts as f64;
            ((k + 1) as f64 * std::f64::consts::PI * x).sin()
        })
    };
    let coarse = basis(n);
    let fine = basis(m);
    let inv = coarse
        .try_inverse()
        .expect("sine collocation matrix on cell centres is nonsingular");
    fine * inv
}
