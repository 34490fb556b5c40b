//! Linear advection `u_t + ν u_x = 0` on the periodic unit interval,
//! solved exactly along characteristics, and its square-wave-plus-ellipse
//! initial condition family.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::DataError;
use crate::grid::{Boundary, GridFunction};

/// Parameter box for `(c, ω, h)`.
pub const CENTER_RANGE: (f64, f64) = (0.3, 0.7);
pub const WIDTH_RANGE: (f64, f64) = (0.3, 0.6);
pub const HEIGHT_RANGE: (f64, f64) = (1.0, 2.0);

/// `h·1[c−ω/2, c+ω/2](x) + sqrt(max(h² − (a(x−c))², 0))` with `a = 2h/ω`,
/// so the elliptic cap spans the same interval as the indicator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvectionIc {
    pub center: f64,
    pub width: f64,
    pub height: f64,
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

impl AdvectionIc {
    pub fn new(center: f64, width: f64, height: f64) -> Result<Self, DataError> {
        if !in_range(center, CENTER_RANGE) || !in_range(width, WIDTH_RANGE) || !in_range(height, HEIGHT_RANGE) {
            return Err(DataError::Invalid(format!(
                "(c, w, h) = ({center}, {width}, {height}) outside [0.3,0.7]x[0.3,0.6]x[1,2]"
            )));
        }
        Ok(AdvectionIc { center, width, height })
    }

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        AdvectionIc {
            center: rng.random_range(CENTER_RANGE.0..=CENTER_RANGE.1),
            width: rng.random_range(WIDTH_RANGE.0..=WIDTH_RANGE.1),
            height: rng.random_range(HEIGHT_RANGE.0..=HEIGHT_RANGE.1),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (c, w, h) = (self.center, self.width, self.height);
        let a = 2.0 * h / w;
        let box_part = if x >= c - w / 2.0 && x <= c + w / 2.0 { h } else { 0.0 };
        let r = a * (x - c);
        box_part + (h * h - r * r).max(0.0).sqrt()
    }

    pub fn sample(&self, resolution: usize) -> Result<GridFunction, DataError> {
        Ok(GridFunction::from_fn(
            vec![resolution],
            vec![1.0],
            Boundary::Periodic,
            |x| self.eval(x[0]),
        )?)
    }
}

/// `u(x, t) = u₀((x − ν t) mod 1)` sampled on a periodic grid.
pub fn advection_solve(
    ic: &AdvectionIc,
    speed: f64,
    t_final: f64,
    resolution: usize,
) -> Result<GridFunction, DataError> {
    if !speed.is_finite() || !t_final.is_finite() {
        return Err(DataError::Invalid("non-finite speed or time".into()));
    }
    let shift = speed * t_final;
    let cells = shift * resolution as f64;
    if (cells - cells.round()).abs() < 1e-9 {
        // Whole-cell shifts reuse the grid samples so the result is exact.
        let u0 = ic.sample(resolution)?;
        let s = (cells.round() as i64).rem_euclid(resolution as i64) as usize;
        let v = u0.values();
        let rolled = (0..resolution).map(|i| v[(i + resolution - s) % resolution]).collect();
        return Ok(u0.with_values(1, rolled)?);
    }
    Ok(GridFunction::from_fn(
        vec![resolution],
        vec![1.0],
        Boundary::Periodic,
        |x| ic.eval((x[0] - shift).rem_euclid(1.0)),
    )?)
}
