//! Viscous Burgers on the periodic unit interval,
//! `u_t + ½(u²)_x = ν u_xx`, by a Fourier pseudo-spectral method with 2/3
//! dealiasing and integrating-factor RK4 in time. Diffusion is integrated
//! exactly, so the step is bounded by the advective CFL number only.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::DataError;
use crate::grid::{Boundary, GridFunction};

/// Target advective Courant number.
pub const CFL: f64 = 0.4;

struct Spectral {
    n: usize,
    k: Vec<f64>,
    keep: Vec<bool>,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Spectral {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let k: Vec<f64> = (0..n)
            .map(|j| {
                let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                2.0 * std::f64::consts::PI * m
            })
            .collect();
        let cutoff = n as f64 / 3.0;
        let keep = (0..n)
            .map(|j| {
                let m = if j <= n / 2 { j as f64 } else { n as f64 - j as f64 };
                m < cutoff
            })
            .collect();
        Spectral {
            n,
            k,
            keep,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn to_physical(&self, uh: &[Complex<f64>]) -> Vec<f64> {
        let mut buf = uh.to_vec();
        self.inv.process(&mut buf);
        buf.iter().map(|c| c.re / self.n as f64).collect()
    }

    /// `−½ ik · F[(F⁻¹ û)²]` with the upper third of modes removed.
    fn nonlinear(&self, uh: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = uh
            .iter()
            .zip(&self.keep)
            .map(|(c, &k)| if k { *c } else { Complex::new(0.0, 0.0) })
            .collect();
        self.inv.process(&mut buf);
        let inv_n = 1.0 / self.n as f64;
        for c in buf.iter_mut() {
            let u = c.re * inv_n;
            *c = Complex::new(u * u, 0.0);
        }
        self.fwd.process(&mut buf);
        buf.iter()
            .zip(&self.k)
            .zip(&self.keep)
            .map(|((c, &k), &keep)| {
                if keep {
                    Complex::new(0.0, -0.5 * k) * c
                } else {
                    Complex::new(0.0, 0.0)
                }
            })
            .collect()
    }
}

/// Integrates from `u0` to `t_final` on the grid of `u0`.
pub fn burgers_solve(u0: &GridFunction, viscosity: f64, t_final: f64) -> Result<GridFunction, DataError> {
    if u0.boundary() != Boundary::Periodic || u0.dims().len() != 1 || u0.channels() != 1 {
        return Err(DataError::Invalid(
            "Burgers needs a single-channel periodic 1D field".into(),
        ));
    }
    if !(viscosity > 0.0) || !(t_final >= 0.0) {
        return Err(DataError::Invalid(format!(
            "viscosity {viscosity} must be > 0 and final time {t_final} >= 0"
        )));
    }
    if (u0.extents()[0] - 1.0).abs() > 1e-12 {
        return Err(DataError::Invalid("Burgers domain must be the unit interval".into()));
    }
    let n = u0.dims()[0];
    let dx = 1.0 / n as f64;
    let sp = Spectral::new(n);
    let mut uh: Vec<Complex<f64>> = u0.values().iter().map(|&v| Complex::new(v, 0.0)).collect();
    sp.fwd.process(&mut uh);

    let mut t = 0.0;
    let mut umax = u0.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut step = 0usize;
    while t < t_final {
        let mut dt = CFL * dx / umax.max(1e-12);
        if t + dt >= t_final {
            dt = t_final - t;
        }
        let e: Vec<f64> = sp.k.iter().map(|k| (-viscosity * k * k * dt).exp()).collect();
        let e2: Vec<f64> = sp.k.iter().map(|k| (-viscosity * k * k * dt * 0.5).exp()).collect();
        let a = sp.nonlinear(&uh);
        let ua: Vec<Complex<f64>> = (0..n).map(|j| e2[j] * (uh[j] + a[j] * (0.5 * dt))).collect();
        let b = sp.nonlinear(&ua);
        let ub: Vec<Complex<f64>> = (0..n).map(|j| e2[j] * uh[j] + b[j] * (0.5 * dt)).collect();
        let c = sp.nonlinear(&ub);
        let uc: Vec<Complex<f64>> = (0..n).map(|j| e[j] * uh[j] + e2[j] * c[j] * dt).collect();
        let d = sp.nonlinear(&uc);
        for j in 0..n {
            uh[j] = e[j] * uh[j] + (e[j] * a[j] + (b[j] + c[j]) * (2.0 * e2[j]) + d[j]) * (dt / 6.0);
        }
        t += dt;
        step += 1;
        let u = sp.to_physical(&uh);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Numerical(format!(
                "Burgers solution blew up at step {step}, t = {t:.4}"
            )));
        }
        let new_max = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // The step just taken must still satisfy a unit Courant bound.
        if new_max * dt / dx > 1.0 {
            return Err(DataError::Numerical(format!(
                "CFL violated at step {step} (t = {t:.4}); use dt <= {:.3e}",
                CFL * dx / new_max
            )));
        }
        umax = new_max;
    }
    let u = sp.to_physical(&uh);
    Ok(u0.with_values(1, u)?)
}
