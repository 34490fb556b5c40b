//! Steady Darcy flow `−∇·(a∇u) = f` on the unit square with `u = 0` on the
//! boundary: cell-centred finite volumes with harmonic-mean face
//! coefficients, solved by Jacobi-preconditioned conjugate gradients.

use rand_chacha::ChaCha8Rng;

use super::grf::GrfSpec;
use super::DataError;
use crate::grid::{Boundary, GridFunction};

pub const PHASE_HIGH: f64 = 12.0;
pub const PHASE_LOW: f64 = 3.0;
pub const CG_TOLERANCE: f64 = 1e-10;

/// Two-phase medium: a smooth GRF mapped to 12 where positive, 3 elsewhere.
pub fn darcy_permeability_sample(resolution: usize, rng: &mut ChaCha8Rng) -> Result<GridFunction, DataError> {
    let g = GrfSpec::darcy().sample(&[resolution, resolution], Boundary::Dirichlet, rng)?;
    let values = g
        .values()
        .iter()
        .map(|&v| if v > 0.0 { PHASE_HIGH } else { PHASE_LOW })
        .collect();
    Ok(g.with_values(1, values)?)
}

/// Five-point operator with face transmissibilities stored per cell.
struct Operator {
    n: usize,
    east: Vec<f64>,
    north: Vec<f64>,
    diag: Vec<f64>,
}

impl Operator {
    fn new(a: &[f64], n: usize) -> Self {
        let h2 = (n * n) as f64;
        let harmonic = |p: f64, q: f64| 2.0 * p * q / (p + q);
        let mut east = vec![0.0; n * n];
        let mut north = vec![0.0; n * n];
        let mut diag = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let c = i * n + j;
                // Boundary faces sit half a cell away: transmissibility 2a/h².
                let face = |nb: Option<usize>| match nb {
                    Some(m) => harmonic(a[c], a[m]) * h2,
                    None => 2.0 * a[c] * h2,
                };
                let e = face((j + 1 < n).then(|| c + 1));
                let w = face((j > 0).then(|| c - 1));
                let s = face((i + 1 < n).then(|| c + n));
                let nn = face((i > 0).then(|| c - n));
                if j + 1 < n {
                    east[c] = e;
                }
                if i + 1 < n {
                    north[c] = s;
                }
                diag[c] = e + w + s + nn;
            }
        }
        Operator { n, east, north, diag }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        for c in 0..n * n {
            y[c] = self.diag[c] * x[c];
        }
        for c in 0..n * n {
            let e = self.east[c];
            if e != 0.0 {
                y[c] -= e * x[c + 1];
                y[c + 1] -= e * x[c];
            }
            let s = self.north[c];
            if s != 0.0 {
                y[c] -= s * x[c + n];
                y[c + n] -= s * x[c];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pressure for permeability `a` (cell-centred, unit square) and constant
/// forcing `forcing`.
pub fn darcy_solve(a: &GridFunction, forcing: f64) -> Result<GridFunction, DataError> {
    let dims = a.dims();
    if dims.len() != 2 || dims[0] != dims[1] || a.channels() != 1 || a.boundary() != Boundary::Dirichlet {
        return Err(DataError::Invalid(
            "Darcy needs a single-channel square cell-centred field".into(),
        ));
    }
    if let Some(i) = a.values().iter().position(|&v| !(v > 0.0)) {
        return Err(DataError::Invalid(format!("permeability must be positive (cell {i})")));
    }
    let n = dims[0];
    let op = Operator::new(a.values(), n);
    let m = n * n;
    let b = vec![forcing; m];
    let bnorm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; m];
    if bnorm == 0.0 {
        return Ok(a.with_values(1, x)?);
    }
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&op.diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; m];
    let mut rz = dot(&r, &z);
    let max_iter = 20 * m + 100;
    for it in 0..max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(DataError::Numerical(format!("CG breakdown at iteration {it}")));
        }
        let alpha = rz / pap;
        for k in 0..m {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        if dot(&r, &r).sqrt() <= CG_TOLERANCE * bnorm {
            return Ok(a.with_values(1, x)?);
        }
        for k in 0..m {
            z[k] = r[k] / op.diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..m {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(DataError::Numerical(format!(
        "CG stagnated after {max_iter} iterations"
    )))
}
