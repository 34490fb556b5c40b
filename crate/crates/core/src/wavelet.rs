//! Periodic multilevel discrete wavelet transforms in one and two dimensions.
//!
//! Coefficients are kept in the packed Mallat layout: in 1D a length-`n`
//! signal becomes `[a_L | d_L | d_{L-1} | ... | d_1]`; in 2D the coarsest
//! approximation occupies the top-left `(n0/2^L) x (n1/2^L)` block and each
//! level's three detail bands fill the remaining quadrants of its block.
//! Because the periodized filter banks are orthonormal, the synthesis
//! transform is both the transpose and the inverse of the analysis transform.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{Primitive, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveletError {
    #[error("axis of length {len} is not divisible by 2^{levels} = {required}")]
    Indivisible { len: usize, levels: usize, required: usize },
    #[error("decomposition levels must be at least 1")]
    ZeroLevels,
    #[error("unsupported spatial rank {0}; expected 1 or 2")]
    Rank(usize),
    #[error("unknown wavelet basis '{0}' (expected haar, db4 or db6)")]
    UnknownBasis(String),
    #[error("coefficient layout inconsistent: {0}")]
    Layout(String),
}

const HAAR: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];

const DB4: [f64; 8] = [
    2.303_778_133_088_965e-1,
    7.148_465_705_529_157e-1,
    6.308_807_679_298_589e-1,
    -2.798_376_941_685_985_4e-2,
    -1.870_348_117_190_930_9e-1,
    3.084_138_183_556_076_4e-2,
    3.288_301_166_688_52e-2,
    -1.059_740_178_506_903_2e-2,
];

const DB6: [f64; 12] = [
    1.115_407_433_501_094_7e-1,
    4.946_238_903_984_530_6e-1,
    7.511_339_080_210_954e-1,
    3.152_503_517_091_976_3e-1,
    -2.262_646_939_654_398_3e-1,
    -1.297_668_675_672_619_4e-1,
    9.750_160_558_732_304e-2,
    2.752_286_553_030_572_7e-2,
    -3.158_203_931_748_603e-2,
    5.538_422_011_614_961e-4,
    4.777_257_510_945_511e-3,
    -1.077_301_085_308_479_6e-3,
];

/// Orthonormal Daubechies family member used by the transforms.
///
/// `Db4` and `Db6` follow the common naming by vanishing moments, so they
/// carry 8 and 12 taps respectively.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WaveletBasis {
    Haar,
    Db4,
    #[default]
    Db6,
}

impl WaveletBasis {
    pub fn name(self) -> &'static str {
        match self {
            WaveletBasis::Haar => "haar",
            WaveletBasis::Db4 => "db4",
            WaveletBasis::Db6 => "db6",
        }
    }

    /// Scaling (low-pass) filter; decomposition and reconstruction share it.
    pub fn lowpass(self) -> &'static [f64] {
        match self {
            WaveletBasis::Haar => &HAAR,
            WaveletBasis::Db4 => &DB4,
            WaveletBasis::Db6 => &DB6,
        }
    }

    /// Wavelet (high-pass) filter `g[j] = (-1)^j h[L-1-j]`.
    pub fn highpass(self) -> Vec<f64> {
        let h = self.lowpass();
        let n = h.len();
        (0..n)
            .map(|j| if j % 2 == 0 { h[n - 1 - j] } else { -h[n - 1 - j] })
            .collect()
    }

    pub fn all() -> [WaveletBasis; 3] {
        [WaveletBasis::Haar, WaveletBasis::Db4, WaveletBasis::Db6]
    }
}

impl fmt::Display for WaveletBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaveletBasis {
    type Err = WaveletError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(WaveletBasis::Haar),
            "db4" => Ok(WaveletBasis::Db4),
            "db6" => Ok(WaveletBasis::Db6),
            _ => Err(WaveletError::UnknownBasis(s.to_string())),
        }
    }
}

/// Checks that every axis in `dims` can be halved `levels` times.
pub fn check_divisible(dims: &[usize], levels: usize) -> Result<(), WaveletError> {
    if levels == 0 {
        return Err(WaveletError::ZeroLevels);
    }
    if dims.is_empty() || dims.len() > 2 {
        return Err(WaveletError::Rank(dims.len()));
    }
    let required = 1usize << levels;
    for &len in dims {
        if len % required != 0 {
            return Err(WaveletError::Indivisible { len, levels, required });
        }
    }
    Ok(())
}

struct Bank {
    lo: &'static [f64],
    hi: Vec<f64>,
}

impl Bank {
    fn new(basis: WaveletBasis) -> Self {
        Bank {
            lo: basis.lowpass(),
            hi: basis.highpass(),
        }
    }

    /// One periodic analysis step of `x` into `lo` and `hi` halves.
    fn analyze(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let half = n / 2;
        for k in 0..half {
            let (mut a, mut d) = (0.0, 0.0);
            for (j, (&h, &g)) in self.lo.iter().zip(&self.hi).enumerate() {
                let v = x[(2 * k + j) % n];
                a += h * v;
                d += g * v;
            }
            out[k] = a;
            out[half + k] = d;
        }
    }

    /// Transpose of `analyze`.
    fn synthesize(&self, c: &[f64], out: &mut [f64]) {
        let n = c.len();
        let half = n / 2;
        out.fill(0.0);
        for k in 0..half {
            let (a, d) = (c[k], c[half + k]);
            for (j, (&h, &g)) in self.lo.iter().zip(&self.hi).enumerate() {
                out[(2 * k + j) % n] += h * a + g * d;
            }
        }
    }
}

/// In-place packed transform of one signal of shape `dims`.
fn transform_packed(buf: &mut [f64], dims: &[usize], bank: &Bank, levels: usize, inverse: bool) {
    let order: Vec<usize> = if inverse {
        (0..levels).rev().collect()
    } else {
        (0..levels).collect()
    };
    match dims {
        [n] => {
            let mut tmp = vec![0.0; *n];
            for lvl in order {
                let m = n >> lvl;
                if inverse {
                    bank.synthesize(&buf[..m], &mut tmp[..m]);
                } else {
                    bank.analyze(&buf[..m], &mut tmp[..m]);
                }
                buf[..m].copy_from_slice(&tmp[..m]);
            }
        }
        [n0, n1] => {
            let mut line = vec![0.0; (*n0).max(*n1)];
            let mut tmp = vec![0.0; (*n0).max(*n1)];
            for lvl in order {
                let (r, c) = (n0 >> lvl, n1 >> lvl);
                if !inverse {
                    transform_rows(buf, *n1, r, c, bank, &mut tmp, false);
                }
                for j in 0..c {
                    for i in 0..r {
                        line[i] = buf[i * n1 + j];
                    }
                    if inverse {
                        bank.synthesize(&line[..r], &mut tmp[..r]);
                    } else {
                        bank.analyze(&line[..r], &mut tmp[..r]);
                    }
                    for i in 0..r {
                        buf[i * n1 + j] = tmp[i];
                    }
                }
                if inverse {
                    transform_rows(buf, *n1, r, c, bank, &mut tmp, true);
                }
            }
        }
        _ => unreachable!("rank validated by caller"),
    }
}

fn transform_rows(buf: &mut [f64], stride: usize, r: usize, c: usize, bank: &Bank, tmp: &mut [f64], inverse: bool) {
    for i in 0..r {
        let row = &mut buf[i * stride..i * stride + c];
        if inverse {
            bank.synthesize(row, &mut tmp[..c]);
        } else {
            bank.analyze(row, &mut tmp[..c]);
        }
        row.copy_from_slice(&tmp[..c]);
    }
}

/// Forward transform of one signal into the packed layout.
pub fn dwt_packed(
    signal: &[f64],
    dims: &[usize],
    basis: WaveletBasis,
    levels: usize,
) -> Result<Vec<f64>, WaveletError> {
    check_divisible(dims, levels)?;
    check_len(signal.len(), dims)?;
    let mut buf = signal.to_vec();
    transform_packed(&mut buf, dims, &Bank::new(basis), levels, false);
    Ok(buf)
}

/// Inverse of [`dwt_packed`].
pub fn idwt_packed(
    coeffs: &[f64],
    dims: &[usize],
    basis: WaveletBasis,
    levels: usize,
) -> Result<Vec<f64>, WaveletError> {
    check_divisible(dims, levels)?;
    check_len(coeffs.len(), dims)?;
    let mut buf = coeffs.to_vec();
    transform_packed(&mut buf, dims, &Bank::new(basis), levels, true);
    Ok(buf)
}

fn check_len(len: usize, dims: &[usize]) -> Result<(), WaveletError> {
    let n: usize = dims.iter().product();
    if len != n {
        return Err(WaveletError::Layout(format!("{len} values for grid {dims:?}")));
    }
    Ok(())
}

/// Structured view of a multilevel decomposition.
///
/// `details[0]` belongs to the coarsest level. In 1D each level holds one
/// band; in 2D it holds three, ordered (high along the last axis, high
/// along the first axis, high along both).
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCoeffs {
    pub basis: WaveletBasis,
    pub dims: Vec<usize>,
    pub levels: usize,
    pub approx: Vec<f64>,
    pub details: Vec<Vec<Vec<f64>>>,
}

impl WaveletCoeffs {
    fn from_packed(packed: &[f64], dims: &[usize], basis: WaveletBasis, levels: usize) -> Self {
        let mut details = Vec::with_capacity(levels);
        let approx;
        match dims {
            [n] => {
                let m = n >> levels;
                approx = packed[..m].to_vec();
                for lvl in (0..levels).rev() {
                    let h = n >> (lvl + 1);
                    details.push(vec![packed[h..2 * h].to_vec()]);
                }
            }
            [n0, n1] => {
                let block = |r0: usize, c0: usize, r: usize, c: usize| {
                    let mut v = Vec::with_capacity(r * c);
                    for i in r0..r0 + r {
                        v.extend_from_slice(&packed[i * n1 + c0..i * n1 + c0 + c]);
                    }
                    v
                };
                approx = block(0, 0, n0 >> levels, n1 >> levels);
                for lvl in (0..levels).rev() {
                    let (r, c) = (n0 >> (lvl + 1), n1 >> (lvl + 1));
                    details.push(vec![block(0, c, r, c), block(r, 0, r, c), block(r, c, r, c)]);
                }
            }
            _ => unreachable!("rank validated by caller"),
        }
        WaveletCoeffs {
            basis,
            dims: dims.to_vec(),
            levels,
            approx,
            details,
        }
    }

    /// Reassembles the packed layout, validating band sizes.
    pub fn to_packed(&self) -> Result<Vec<f64>, WaveletError> {
        check_divisible(&self.dims, self.levels)?;
        if self.details.len() != self.levels {
            return Err(WaveletError::Layout(format!(
                "{} detail levels for a {}-level transform",
                self.details.len(),
                self.levels
            )));
        }
        let n: usize = self.dims.iter().product();
        let mut packed = vec![0.0; n];
        let bad = |what: &str| WaveletError::Layout(format!("{what} has the wrong size"));
        match self.dims.as_slice() {
            [n] => {
                let m = n >> self.levels;
                if self.approx.len() != m {
                    return Err(bad("approximation band"));
                }
                packed[..m].copy_from_slice(&self.approx);
                for (i, bands) in self.details.iter().enumerate() {
                    let h = n >> (self.levels - i);
                    if bands.len() != 1 || bands[0].len() != h {
                        return Err(bad("detail band"));
                    }
                    packed[h..2 * h].copy_from_slice(&bands[0]);
                }
            }
            [n0, n1] => {
                let n1 = *n1;
                let mut put = |r0: usize, c0: usize, r: usize, c: usize, v: &[f64]| {
                    if v.len() != r * c {
                        return Err(bad("band"));
                    }
                    for i in 0..r {
                        packed[(r0 + i) * n1 + c0..(r0 + i) * n1 + c0 + c].copy_from_slice(&v[i * c..(i + 1) * c]);
                    }
                    Ok(())
                };
                put(0, 0, n0 >> self.levels, n1 >> self.levels, &self.approx)?;
                for (i, bands) in self.details.iter().enumerate() {
                    let lvl = self.levels - i;
                    let (r, c) = (n0 >> lvl, n1 >> lvl);
                    if bands.len() != 3 {
                        return Err(bad("detail level"));
                    }
                    put(0, c, r, c, &bands[0])?;
                    put(r, 0, r, c, &bands[1])?;
                    put(r, c, r, c, &bands[2])?;
                }
            }
            other => return Err(WaveletError::Rank(other.len())),
        }
        Ok(packed)
    }

    pub fn energy(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        sq(&self.approx) + self.details.iter().flatten().map(|b| sq(b)).sum::<f64>()
    }
}

/// Multilevel periodic DWT of a signal with grid shape `dims` (1D or 2D).
pub fn dwt(signal: &[f64], dims: &[usize], basis: WaveletBasis, levels: usize) -> Result<WaveletCoeffs, WaveletError> {
    let packed = dwt_packed(signal, dims, basis, levels)?;
    Ok(WaveletCoeffs::from_packed(&packed, dims, basis, levels))
}

pub fn idwt(coeffs: &WaveletCoeffs) -> Result<Vec<f64>, WaveletError> {
    let packed = coeffs.to_packed()?;
    idwt_packed(&packed, &coeffs.dims, coeffs.basis, coeffs.levels)
}

/// Differentiable packed transform over the trailing spatial axes of a
/// `[batch, channels, spatial...]` tensor.
#[derive(Debug, Clone)]
pub struct WaveletTransform {
    pub basis: WaveletBasis,
    pub levels: usize,
    pub inverse: bool,
}

impl WaveletTransform {
    pub fn forward(basis: WaveletBasis, levels: usize) -> Self {
        WaveletTransform {
            basis,
            levels,
            inverse: false,
        }
    }

    pub fn inverse(basis: WaveletBasis, levels: usize) -> Self {
        WaveletTransform {
            basis,
            levels,
            inverse: true,
        }
    }

    fn run(&self, x: &Tensor, inverse: bool) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        let dims = &shape[2.min(shape.len())..];
        check_divisible(dims, self.levels).map_err(|e| TensorError::InvalidShape {
            op: self.name().to_string(),
            shape: shape.to_vec(),
            reason: e.to_string(),
        })?;
        let np: usize = dims.iter().product();
        let bank = Bank::new(self.basis);
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(np) {
            transform_packed(chunk, dims, &bank, self.levels, inverse);
        }
        Tensor::new(shape.to_vec(), data)
    }
}

impl Primitive for WaveletTransform {
    fn name(&self) -> &'static str {
        if self.inverse {
            "idwt"
        } else {
            "dwt"
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        self.run(inputs[0], self.inverse)
    }

    fn vjp(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>, TensorError> {
        Ok(vec![self.run(g, !self.inverse)?])
    }
}
