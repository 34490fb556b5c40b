//! Wavelet neural operator: lifting, a stack of wavelet-domain integral
//! layers with pointwise bypass, and an affine projection to latent channels.
//!
//! Learnable mixing acts on the coarsest approximation band and the
//! coarsest detail band(s) only, so the parameter shapes depend on the
//! coarsest grid and not on the sampling resolution. Evaluating at a finer
//! grid adds decomposition levels until the same coarsest grid is reached.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::GridFunction;
use crate::tensor::{Primitive, Tape, Tensor, TensorError, Var};
use crate::wavelet::{WaveletBasis, WaveletTransform};

#[derive(Debug, Error)]
pub enum WnoError {
    #[error("invalid operator configuration: {0}")]
    Config(String),
    #[error("grid {dims:?} is incompatible with the trained coarsest grid {coarse:?}: {reason}")]
    Resolution {
        dims: Vec<usize>,
        coarse: Vec<usize>,
        reason: String,
    },
    #[error("input has {got} channels, operator expects {expected}")]
    Channels { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    /// Identity; only useful for checking the linear structure in tests.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WnoConfig {
    pub width: usize,
    pub layers: usize,
    pub basis: WaveletBasis,
    pub levels: usize,
    pub latent_channels: usize,
    /// Append grid coordinates as extra input channels.
    pub grid_coords: bool,
    /// Zero-pad grids that are not a multiple of `2^levels` up to the next
    /// multiple, cropping again before projection.
    pub pad: bool,
    pub activation: Activation,
}

impl Default for WnoConfig {
    fn default() -> Self {
        WnoConfig {
            width: 32,
            layers: 3,
            basis: WaveletBasis::Db6,
            levels: 3,
            latent_channels: 16,
            grid_coords: true,
            pad: false,
            activation: Activation::Gelu,
        }
    }
}

impl WnoConfig {
    pub fn validate(&self) -> Result<(), WnoError> {
        if self.width == 0 || self.layers == 0 || self.levels == 0 || self.latent_channels == 0 {
            return Err(WnoError::Config(
                "width, layers, levels and latent channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of channels fed to the lifting map for a field with
    /// `field_channels` channels on a grid of rank `rank`.
    pub fn input_channels(&self, field_channels: usize, rank: usize) -> usize {
        field_channels + if self.grid_coords { rank } else { 0 }
    }
}

/// Weights of one wavelet integral layer.
#[derive(Clone, Debug, PartialEq)]
pub struct WnoLayer {
    /// `[retained positions, width, width]`.
    pub mix: Tensor,
    /// Pointwise bypass `[width, width]`.
    pub bypass: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WnoParams {
    pub coarse_dims: Vec<usize>,
    pub in_channels: usize,
    pub lift_w: Tensor,
    pub lift_b: Tensor,
    pub layers: Vec<WnoLayer>,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite random weights")
}

impl WnoParams {
    /// Random initialisation for fields with `field_channels` channels on a
    /// training grid `train_dims`.
    pub fn init(
        config: &WnoConfig,
        field_channels: usize,
        train_dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, WnoError> {
        config.validate()?;
        let coarse_dims = coarse_dims(config, train_dims)?;
        let w = config.width;
        let d_in = config.input_channels(field_channels, train_dims.len());
        let positions = retained_positions(&coarse_dims);
        let lift_w = uniform(rng, &[w, d_in], 1.0 / (d_in as f64).sqrt());
        let lift_b = uniform(rng, &[w], 1.0 / (d_in as f64).sqrt());
        let layers = (0..config.layers)
            .map(|_| WnoLayer {
                mix: uniform(rng, &[positions, w, w], 1.0 / w as f64),
                bypass: uniform(rng, &[w, w], 1.0 / (w as f64).sqrt()),
                bias: uniform(rng, &[w], 1.0 / (w as f64).sqrt()),
            })
            .collect();
        let proj_w = uniform(rng, &[config.latent_channels, w], 1.0 / (w as f64).sqrt());
        let proj_b = uniform(rng, &[config.latent_channels], 1.0 / (w as f64).sqrt());
        Ok(WnoParams {
            coarse_dims,
            in_channels: d_in,
            lift_w,
            lift_b,
            layers,
            proj_w,
            proj_b,
        })
    }

    /// Parameter tensors in a fixed order: lifting, layers, projection.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.lift_w, &self.lift_b];
        for l in &self.layers {
            out.extend([&l.mix, &l.bypass, &l.bias]);
        }
        out.extend([&self.proj_w, &self.proj_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.lift_w, &mut self.lift_b];
        for l in &mut self.layers {
            out.extend([&mut l.mix, &mut l.bypass, &mut l.bias]);
        }
        out.extend([&mut self.proj_w, &mut self.proj_b]);
        out
    }

    /// Rebuilds parameters from tensors in [`WnoParams::tensors`] order.
    pub fn from_tensors(coarse_dims: Vec<usize>, in_channels: usize, tensors: Vec<Tensor>) -> Result<Self, WnoError> {
        if tensors.len() < 7 || !(tensors.len() - 4).is_multiple_of(3) {
            return Err(WnoError::Config(format!(
                "{} parameter tensors do not form a layer stack",
                tensors.len()
            )));
        }
        let mut rest = tensors;
        let proj_b = rest.pop().expect("length checked");
        let proj_w = rest.pop().expect("length checked");
        let mut it = rest.into_iter();
        let lift_w = it.next().expect("length checked");
        let lift_b = it.next().expect("length checked");
        let rest: Vec<Tensor> = it.collect();
        let layers = rest
            .chunks(3)
            .map(|c| WnoLayer {
                mix: c[0].clone(),
                bypass: c[1].clone(),
                bias: c[2].clone(),
            })
            .collect();
        let params = WnoParams {
            coarse_dims,
            in_channels,
            lift_w,
            lift_b,
            layers,
            proj_w,
            proj_b,
        };
        params.check_shapes()?;
        Ok(params)
    }

    pub fn width(&self) -> usize {
        self.lift_w.shape()[0]
    }

    pub fn latent_channels(&self) -> usize {
        self.proj_w.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_shapes(&self) -> Result<(), WnoError> {
        let w = self.width();
        let p = retained_positions(&self.coarse_dims);
        let bad = |what: &str| Err(WnoError::Config(format!("{what} has an inconsistent shape")));
        if self.lift_w.shape() != [w, self.in_channels] || self.lift_b.shape() != [w] {
            return bad("lifting map");
        }
        for l in &self.layers {
            if l.mix.shape() != [p, w, w] || l.bypass.shape() != [w, w] || l.bias.shape() != [w] {
                return bad("wavelet layer");
            }
        }
        let d = self.latent_channels();
        if self.proj_w.shape() != [d, w] || self.proj_b.shape() != [d] {
            return bad("projection");
        }
        Ok(())
    }
}

/// Coarsest grid reached from `dims` after `config.levels` halvings.
pub fn coarse_dims(config: &WnoConfig, dims: &[usize]) -> Result<Vec<usize>, WnoError> {
    let step = 1usize << config.levels;
    dims.iter()
        .map(|&n| {
            if n % step == 0 {
                Ok(n / step)
            } else if config.pad {
                Ok(n.div_ceil(step))
            } else {
                Err(WnoError::Resolution {
                    dims: dims.to_vec(),
                    coarse: vec![],
                    reason: format!("each axis must be divisible by 2^{} = {step}", config.levels),
                })
            }
        })
        .collect()
}

/// Number of coefficient positions carrying learnable weights: the coarsest
/// approximation band plus the coarsest detail bands.
pub fn retained_positions(coarse: &[usize]) -> usize {
    coarse.iter().map(|c| 2 * c).product()
}

/// How a particular grid is pushed through trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub dims: Vec<usize>,
    pub padded: Vec<usize>,
    pub levels: usize,
    retained: Arc<Vec<usize>>,
}

impl Plan {
    /// Chooses the number of decomposition levels that maps `dims` onto the
    /// trained coarsest grid, padding when the configuration allows it.
    pub fn new(config: &WnoConfig, coarse: &[usize], dims: &[usize]) -> Result<Self, WnoError> {
        let err = |reason: String| WnoError::Resolution {
            dims: dims.to_vec(),
            coarse: coarse.to_vec(),
            reason,
        };
        if dims.len() != coarse.len() {
            return Err(err("rank differs".into()));
        }
        for levels in config.levels..config.levels + 16 {
            let step = 1usize << levels;
            let fits = dims.iter().zip(coarse).all(|(&n, &c)| {
                if config.pad {
                    n.div_ceil(step) == c
                } else {
                    n == c * step
                }
            });
            if fits {
                let padded: Vec<usize> = coarse.iter().map(|c| c * step).collect();
                let retained = retained_indices(coarse, &padded);
                return Ok(Plan {
                    dims: dims.to_vec(),
                    padded,
                    levels,
                    retained: Arc::new(retained),
                });
            }
        }
        Err(err(format!(
            "need a power-of-two multiple of the coarsest grid with at least {} levels",
            config.levels
        )))
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.dims
    }
}

fn retained_indices(coarse: &[usize], padded: &[usize]) -> Vec<usize> {
    match (coarse, padded) {
        ([c], _) => (0..2 * c).collect(),
        ([c0, c1], [_, n1]) => (0..2 * c0).flat_map(|i| (0..2 * c1).map(move |j| i * n1 + j)).collect(),
        _ => Vec::new(),
    }
}

/// Per-position channel mixing of the retained coefficients; all other
/// coefficients are zeroed.
#[derive(Debug)]
struct BandMix {
    retained: Arc<Vec<usize>>,
}

impl BandMix {
    fn dims(&self, x: &Tensor, mix: &Tensor) -> Result<(usize, usize, usize), TensorError> {
        let s = x.shape();
        if s.len() < 3 {
            return Err(TensorError::InvalidShape {
                op: "band_mix".into(),
                shape: s.to_vec(),
                reason: "expected [batch, channels, spatial...]".into(),
            });
        }
        let (nb, w) = (s[0], s[1]);
        let np: usize = s[2..].iter().product();
        if mix.shape() != [self.retained.len(), w, w] {
            return Err(TensorError::ShapeMismatch {
                op: "band_mix".into(),
                lhs: s.to_vec(),
                rhs: mix.shape().to_vec(),
            });
        }
        Ok((nb, w, np))
    }
}

impl Primitive for BandMix {
    fn name(&self) -> &'static str {
        "band_mix"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let (x, mix) = (inputs[0], inputs[1]);
        let (nb, w, np) = self.dims(x, mix)?;
        let (xd, md) = (x.data(), mix.data());
        let mut out = vec![0.0; xd.len()];
        let mut col = vec![0.0; w];
        for b in 0..nb {
            for (p, &pos) in self.retained.iter().enumerate() {
                for (i, c) in col.iter_mut().enumerate() {
                    *c = xd[(b * w + i) * np + pos];
                }
                let m = &md[p * w * w..(p + 1) * w * w];
                for o in 0..w {
                    let row = &m[o * w..(o + 1) * w];
                    out[(b * w + o) * np + pos] = row.iter().zip(&col).map(|(a, c)| a * c).sum();
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>, TensorError> {
        let (x, mix) = (inputs[0], inputs[1]);
        let (nb, w, np) = self.dims(x, mix)?;
        let (xd, md, gd) = (x.data(), mix.data(), g.data());
        let mut gx = vec![0.0; xd.len()];
        let mut gm = vec![0.0; md.len()];
        for b in 0..nb {
            for (p, &pos) in self.retained.iter().enumerate() {
                let m = &md[p * w * w..(p + 1) * w * w];
                let gmp = &mut gm[p * w * w..(p + 1) * w * w];
                for o in 0..w {
                    let go = gd[(b * w + o) * np + pos];
                    if go == 0.0 {
                        continue;
                    }
                    for i in 0..w {
                        gx[(b * w + i) * np + pos] += m[o * w + i] * go;
                        gmp[o * w + i] += go * xd[(b * w + i) * np + pos];
                    }
                }
            }
        }
        Ok(vec![
            Tensor::new(x.shape().to_vec(), gx)?,
            Tensor::new(mix.shape().to_vec(), gm)?,
        ])
    }
}

/// Zero-pads or crops the trailing spatial axes to `to`; the overlap with
/// the source is copied.
#[derive(Debug)]
struct Resize {
    to: Vec<usize>,
}

fn resize(x: &Tensor, to: &[usize]) -> Result<Tensor, TensorError> {
    let s = x.shape();
    let from = &s[2..];
    if from.len() != to.len() {
        return Err(TensorError::ShapeMismatch {
            op: "resize".into(),
            lhs: s.to_vec(),
            rhs: to.to_vec(),
        });
    }
    let lines = s[0] * s[1];
    let (np_from, np_to): (usize, usize) = (from.iter().product(), to.iter().product());
    let mut out = vec![0.0; lines * np_to];
    let src = x.data();
    for l in 0..lines {
        let (so, dst) = (l * np_from, l * np_to);
        match (from, to) {
            ([a], [b]) => {
                let m = (*a).min(*b);
                out[dst..dst + m].copy_from_slice(&src[so..so + m]);
            }
            ([a0, a1], [b0, b1]) => {
                let (m0, m1) = ((*a0).min(*b0), (*a1).min(*b1));
                for i in 0..m0 {
                    out[dst + i * b1..dst + i * b1 + m1].copy_from_slice(&src[so + i * a1..so + i * a1 + m1]);
                }
            }
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "resize".into(),
                    shape: s.to_vec(),
                    reason: "only 1D and 2D grids are supported".into(),
                })
            }
        }
    }
    let mut shape = s[..2].to_vec();
    shape.extend_from_slice(to);
    Tensor::new(shape, out)
}

impl Primitive for Resize {
    fn name(&self) -> &'static str {
        "resize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        resize(inputs[0], &self.to)
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>, TensorError> {
        Ok(vec![resize(g, &inputs[0].shape()[2..])?])
    }
}

/// Tape handles for every parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Places the parameters on `tape`, as trainable leaves or as constants.
    pub fn register(tape: &mut Tape, params: &WnoParams, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// Handles in [`WnoParams::tensors`] order.
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// W^-1(R . W(v)) on a `[batch, width, spatial...]` tensor.
pub fn spectral_conv(tape: &mut Tape, v: Var, mix: Var, basis: WaveletBasis, plan: &Plan) -> Result<Var, TensorError> {
    let coeffs = tape.apply(Arc::new(WaveletTransform::forward(basis, plan.levels)), &[v])?;
    let mixed = tape.apply(
        Arc::new(BandMix {
            retained: plan.retained.clone(),
        }),
        &[coeffs, mix],
    )?;
    tape.apply(Arc::new(WaveletTransform::inverse(basis, plan.levels)), &[mixed])
}

/// Records the operator on `tape` for an input `[batch, in_channels, dims...]`.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &WnoConfig,
    params: &ParamVars,
    input: Var,
    plan: &Plan,
) -> Result<Var, TensorError> {
    let p = params.all();
    let mut v = tape.channel_linear(input, p[0], Some(p[1]))?;
    if plan.is_padded() {
        v = tape.apply(
            Arc::new(Resize {
                to: plan.padded.clone(),
            }),
            &[v],
        )?;
    }
    let n_layers = (p.len() - 4) / 3;
    for j in 0..n_layers {
        let (mix, bypass, bias) = (p[2 + 3 * j], p[3 + 3 * j], p[4 + 3 * j]);
        let conv = spectral_conv(tape, v, mix, config.basis, plan)?;
        let skip = tape.channel_linear(v, bypass, Some(bias))?;
        let pre = tape.add(conv, skip)?;
        v = match config.activation {
            Activation::Gelu => tape.gelu(pre)?,
            Activation::Linear => pre,
        };
    }
    if plan.is_padded() {
        v = tape.apply(Arc::new(Resize { to: plan.dims.clone() }), &[v])?;
    }
    tape.channel_linear(v, p[p.len() - 2], Some(p[p.len() - 1]))
}

/// Stacks fields (plus coordinate channels when configured) into a
/// `[batch, in_channels, dims...]` tensor. All fields must share a grid.
pub fn input_tensor(config: &WnoConfig, fields: &[&GridFunction]) -> Result<Tensor, WnoError> {
    let first = fields
        .first()
        .ok_or_else(|| WnoError::Config("empty input batch".into()))?;
    let dims = first.dims().to_vec();
    let coords = if config.grid_coords {
        first.coordinates()
    } else {
        Vec::new()
    };
    let np = first.points();
    let d_in = config.input_channels(first.channels(), dims.len());
    let mut data = Vec::with_capacity(fields.len() * d_in * np);
    for f in fields {
        if f.dims() != dims.as_slice() || f.channels() != first.channels() {
            return Err(WnoError::Config("input batch mixes grids or channel counts".into()));
        }
        data.extend_from_slice(f.values());
        if config.grid_coords {
            for axis in 0..dims.len() {
                data.extend(coords.iter().map(|c| c[axis]));
            }
        }
    }
    let mut shape = vec![fields.len(), d_in];
    shape.extend(dims);
    Ok(Tensor::new(shape, data)?)
}

/// Evaluates the operator on a batch of fields without recording gradients.
/// Returns one flattened `[latent_channels, points]` vector per field.
pub fn latents(config: &WnoConfig, params: &WnoParams, fields: &[&GridFunction]) -> Result<Vec<Vec<f64>>, WnoError> {
    if fields.is_empty() {
        return Ok(Vec::new());
    }
    let x = input_tensor(config, fields)?;
    if x.shape()[1] != params.in_channels {
        return Err(WnoError::Channels {
            expected: params.in_channels,
            got: x.shape()[1],
        });
    }
    let plan = Plan::new(config, &params.coarse_dims, fields[0].dims())?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let xin = tape.constant(x);
    let out = forward_on_tape(&mut tape, config, &vars, xin, &plan)?;
    let per = tape.value(out).len() / fields.len();
    Ok(tape.value(out).data().chunks(per).map(|c| c.to_vec()).collect())
}

/// The latent field of a single input, on the input's grid.
pub fn wno_forward(input: &GridFunction, params: &WnoParams, config: &WnoConfig) -> Result<GridFunction, WnoError> {
    let mut out = latents(config, params, &[input])?;
    let values = out.pop().unwrap_or_default();
    GridFunction::new(
        params.latent_channels(),
        input.dims().to_vec(),
        input.extents().to_vec(),
        input.boundary(),
        values,
    )
    .map_err(|e| WnoError::Config(e.to_string()))
}
