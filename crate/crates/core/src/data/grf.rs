//! Gaussian random fields on the periodic unit interval or square, sampled
//! as truncated real Fourier series.
//!
//! The series is evaluated directly at the grid coordinates rather than by
//! an inverse FFT, so a given seed describes one continuum field and grids
//! of any size (including sizes below the mode count) sample the same
//! function.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::grid::{coordinates, Boundary, GridError, GridFunction};

/// Covariance `amplitude · ((2π)²|k|² + shift)^(−power)` truncated to
/// `|k_i| ≤ modes` along every axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrfSpec {
    pub amplitude: f64,
    pub shift: f64,
    pub power: f64,
    pub modes: usize,
}

impl GrfSpec {
    /// `625 (−Δ + 25 I)^(−2)` in 1D.
    pub fn burgers() -> Self {
        GrfSpec {
            amplitude: 625.0,
            shift: 25.0,
            power: 2.0,
            modes: 32,
        }
    }

    /// `(−Δ + 9 I)^(−2)` in 2D, thresholded into two-phase media.
    pub fn darcy() -> Self {
        GrfSpec {
            amplitude: 1.0,
            shift: 9.0,
            power: 2.0,
            modes: 16,
        }
    }

    pub fn eigenvalue(&self, k: &[i64]) -> f64 {
        let k2: f64 = k.iter().map(|&v| (v * v) as f64).sum();
        let tau2 = (2.0 * std::f64::consts::PI).powi(2);
        self.amplitude * (tau2 * k2 + self.shift).powf(-self.power)
    }

    /// Half-space of wavenumbers: one representative per ±k pair, plus 0.
    fn half_modes(&self, rank: usize) -> Vec<Vec<i64>> {
        let m = self.modes as i64;
        match rank {
            1 => (0..=m).map(|k| vec![k]).collect(),
            _ => {
                let mut out = Vec::new();
                for kx in 0..=m {
                    for ky in -m..=m {
                        if kx == 0 && ky < 0 {
                            continue;
                        }
                        out.push(vec![kx, ky]);
                    }
                }
                out
            }
        }
    }

    /// Pointwise variance of the truncated field, `Σ_k λ_k` over all modes.
    pub fn variance(&self, rank: usize) -> f64 {
        self.half_modes(rank)
            .iter()
            .map(|k| {
                let l = self.eigenvalue(k);
                if k.iter().all(|&v| v == 0) {
                    l
                } else {
                    2.0 * l
                }
            })
            .sum()
    }

    /// One draw evaluated on a unit-extent grid of size `dims`.
    pub fn sample(&self, dims: &[usize], boundary: Boundary, rng: &mut ChaCha8Rng) -> Result<GridFunction, GridError> {
        let modes = self.half_modes(dims.len());
        let coeffs: Vec<(f64, f64)> = modes
            .iter()
            .map(|k| {
                let l = self.eigenvalue(k);
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                if k.iter().all(|&v| v == 0) {
                    (l.sqrt() * a, 0.0)
                } else {
                    let s = (2.0 * l).sqrt();
                    (s * a, s * b)
                }
            })
            .collect();
        let extents = vec![1.0; dims.len()];
        let tau = 2.0 * std::f64::consts::PI;
        let coords = coordinates(dims, &extents, boundary);
        let values = coords
            .iter()
            .map(|x| {
                modes
                    .iter()
                    .zip(&coeffs)
                    .map(|(k, &(a, b))| {
                        let phase = tau * k.iter().zip(x).map(|(&ki, &xi)| ki as f64 * xi).sum::<f64>();
                        a * phase.cos() + b * phase.sin()
                    })
                    .sum()
            })
            .collect();
        GridFunction::new(1, dims.to_vec(), extents, boundary, values)
    }
}
