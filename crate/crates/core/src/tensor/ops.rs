// Forward kernels and vector-Jacobian products for the built-in primitives.

use super::{Tensor, TensorError};

/// Inputs below this value are clamped by `sqrt_guarded`.
pub const SQRT_GUARD: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(TensorError::mismatch("matmul", a.shape(), b.shape())),
    }
}

/// `[m,k] x [k,n]`, optionally transposing either operand in place.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if trans_b {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sqrt_guarded(x: f64) -> f64 {
    x.max(SQRT_GUARD).sqrt()
}

/// Splits a `[B, C, rest...]` shape into `(B, C, prod(rest))`.
pub(crate) fn channel_dims(op: &str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    if shape.len() < 2 {
        return Err(TensorError::invalid(op, shape, "expected [batch, channels, ...]"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// `out[b,o,p] = sum_i w[o,i] x[b,i,p] + bias[o]`.
pub(crate) fn channel_linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, TensorError> {
    let (nb, cin, np) = channel_dims("channel_linear", x.shape())?;
    let (cout, cin_w) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(TensorError::invalid("channel_linear", s, "weight must be [out, in]")),
    };
    if cin_w != cin {
        return Err(TensorError::mismatch("channel_linear", x.shape(), w.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::mismatch("channel_linear", w.shape(), b.shape()));
        }
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; nb * cout * np];
    for b in 0..nb {
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * np..(b * cout + o + 1) * np];
            if let Some(bias) = bias {
                dst.fill(bias.data()[o]);
            }
            for i in 0..cin {
                let wv = wd[o * cin + i];
                let src = &xd[(b * cin + i) * np..(b * cin + i + 1) * np];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = cout;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn channel_linear_vjp(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (nb, cin, np) = (x.shape()[0], x.shape()[1], x.len() / (x.shape()[0] * x.shape()[1]));
    let cout = w.shape()[0];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; cout];
    for b in 0..nb {
        for o in 0..cout {
            let gs = &gd[(b * cout + o) * np..(b * cout + o + 1) * np];
            gb[o] += gs.iter().sum::<f64>();
            for i in 0..cin {
                let xs = &xd[(b * cin + i) * np..(b * cin + i + 1) * np];
                gw[o * cin + i] += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                let wv = wd[o * cin + i];
                let gxs = &mut gx[(b * cin + i) * np..(b * cin + i + 1) * np];
                for (d, &s) in gxs.iter_mut().zip(gs) {
                    *d += wv * s;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    )
}

pub(crate) fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat_channels", &[], "no operands"))?;
    let (nb, _, np) = channel_dims("concat_channels", first.shape())?;
    let mut total = 0;
    for p in parts {
        let (b, c, n) = channel_dims("concat_channels", p.shape())?;
        if b != nb || n != np || p.shape()[2..] != first.shape()[2..] {
            return Err(TensorError::mismatch("concat_channels", first.shape(), p.shape()));
        }
        total += c;
    }
    let mut out = Vec::with_capacity(nb * total * np);
    for b in 0..nb {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[b * c * np..(b + 1) * c * np]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
    let (nb, c, np) = channel_dims("slice_channels", x.shape())?;
    if len == 0 || start + len > c {
        return Err(TensorError::invalid(
            "slice_channels",
            x.shape(),
            format!("channel range {start}..{} out of bounds", start + len),
        ));
    }
    let mut out = Vec::with_capacity(nb * len * np);
    for b in 0..nb {
        out.extend_from_slice(&x.data()[(b * c + start) * np..(b * c + start + len) * np]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of `slice_channels`: scatters `g` into a zero tensor shaped like the source.
pub(crate) fn unslice_channels(src_shape: &[usize], g: &Tensor, start: usize) -> Tensor {
    let (nb, c, np) = (src_shape[0], src_shape[1], src_shape[2..].iter().product::<usize>());
    let len = g.shape()[1];
    let mut out = vec![0.0; nb * c * np];
    for b in 0..nb {
        out[(b * c + start) * np..(b * c + start + len) * np]
            .copy_from_slice(&g.data()[b * len * np..(b + 1) * len * np]);
    }
    Tensor::from_parts(src_shape.to_vec(), out)
}
