//! Wengert-list tape: every primitive appends a node holding its forward
//! value; `backward` walks the list once in reverse accumulating adjoints.

use std::fmt;
use std::sync::Arc;

use super::ops::{self, same_shape};
use super::{Tensor, TensorError};

/// A differentiable operation supplied from outside the tensor module.
///
/// `vjp` returns one gradient per input, each shaped like that input.
pub trait Primitive: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError>;
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>, TensorError>;
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleBy(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    Exp(usize),
    SqrtGuarded(usize),
    Gelu(usize),
    Tanh(usize),
    ChannelLinear(usize, usize, Option<usize>),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Reshape(usize),
    Custom(Vec<usize>, Arc<dyn Primitive>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward values; reusable after [`Tape::reset`].
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every parameter leaf, as returned by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seed with respect to a parameter leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; outstanding `Var`s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Param, true)
    }

    /// A leaf treated as fixed data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor, TensorError> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownVar(v.0))
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name.into() });
        }
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        same_shape("add", x, y)?;
        let out = ops::zip_map(x, y, |p, q| p + q);
        self.push("add", out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        same_shape("sub", x, y)?;
        let out = ops::zip_map(x, y, |p, q| p - q);
        self.push("sub", out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        same_shape("mul", x, y)?;
        let out = ops::zip_map(x, y, |p, q| p * q);
        self.push("mul", out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = ops::map(self.check(a)?, |x| c * x);
        self.push("scale", out, Op::Scale(a.0, c), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = ops::map(self.check(a)?, |x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a.0), &[a.0])
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (x, sv) = (self.check(a)?, self.check(s)?);
        let c = sv
            .item()
            .ok_or_else(|| TensorError::invalid("scale_by", sv.shape(), "scale must be one element"))?;
        let out = ops::map(x, |v| c * v);
        self.push("scale_by", out, Op::ScaleBy(a.0, s.0), &[a.0, s.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        let (m, k, n) = ops::matmul_dims(x, y)?;
        let out = Tensor::from_parts(vec![m, n], ops::gemm(x.data(), y.data(), m, k, n, false, false));
        self.push("matmul", out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.check(a)?.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.check(a)?;
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = ops::map(self.check(a)?, f64::exp);
        self.push("exp", out, Op::Exp(a.0), &[a.0])
    }

    /// `sqrt(max(x, 1e-12))`, with zero subgradient below the guard.
    pub fn sqrt_guarded(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = ops::map(self.check(a)?, ops::sqrt_guarded);
        self.push("sqrt_guarded", out, Op::SqrtGuarded(a.0), &[a.0])
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = ops::map(self.check(a)?, ops::gelu);
        self.push("gelu", out, Op::Gelu(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = ops::map(self.check(a)?, f64::tanh);
        self.push("tanh", out, Op::Tanh(a.0), &[a.0])
    }

    /// Pointwise (1x1) linear map over the channel axis of a
    /// `[batch, channels, spatial...]` tensor.
    pub fn channel_linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let b = bias.map(|b| self.check(b)).transpose()?;
        let out = ops::channel_linear(self.check(x)?, self.check(w)?, b)?;
        let mut parents = vec![x.0, w.0];
        parents.extend(bias.map(|b| b.0));
        self.push(
            "channel_linear",
            out,
            Op::ChannelLinear(x.0, w.0, bias.map(|b| b.0)),
            &parents,
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let tensors = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let out = ops::concat_channels(&tensors)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_channels", out, Op::Concat(ids.clone()), &ids)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let out = ops::slice_channels(self.check(x)?, start, len)?;
        self.push("slice_channels", out, Op::Slice { src: x.0, start }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.check(x)?.clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x.0), &[x.0])
    }

    /// Applies an externally defined primitive.
    pub fn apply(&mut self, prim: Arc<dyn Primitive>, inputs: &[Var]) -> Result<Var, TensorError> {
        let tensors = inputs.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let out = prim.forward(&tensors)?;
        let ids: Vec<usize> = inputs.iter().map(|p| p.0).collect();
        let name = prim.name();
        self.push(name, out, Op::Custom(ids.clone(), prim), &ids)
    }

    /// Reverse sweep from a scalar-valued node.
    pub fn backward(&self, seed: Var) -> Result<Gradients, TensorError> {
        let seed_val = self.check(seed)?;
        if !seed_val.is_scalar() {
            return Err(TensorError::NonScalarSeed(seed_val.shape().to_vec()));
        }
        let n = seed.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[seed.0] = Some(Tensor::from_parts(seed_val.shape().to_vec(), vec![1.0]));

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if matches!(node.op, Op::Param) {
                adj[id] = Some(g);
                continue;
            }
            for (parent, contrib) in self.node_vjp(node, &g)? {
                if !self.nodes[parent].needs_grad {
                    continue;
                }
                accumulate(&mut adj[parent], contrib);
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                grads[id] = Some(match adj.get_mut(id).and_then(|a| a.take()) {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape()),
                });
            }
        }
        Ok(Gradients { grads })
    }

    fn node_vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>, TensorError> {
        let val = |i: usize| &self.nodes[i].value;
        Ok(match &node.op {
            Op::Param | Op::Constant => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, ops::map(g, |x| -x))],
            Op::Mul(a, b) => vec![
                (*a, ops::zip_map(g, val(*b), |p, q| p * q)),
                (*b, ops::zip_map(g, val(*a), |p, q| p * q)),
            ],
            Op::Scale(a, c) => vec![(*a, ops::map(g, |x| c * x))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ScaleBy(a, s) => {
                let c = val(*s).data()[0];
                let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                vec![
                    (*a, ops::map(g, |x| c * x)),
                    (*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![gs])),
                ]
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let ga = ops::gemm(g.data(), y.data(), m, n, k, false, true);
                let gb = ops::gemm(x.data(), g.data(), k, m, n, true, false);
                vec![
                    (*a, Tensor::from_parts(vec![m, k], ga)),
                    (*b, Tensor::from_parts(vec![k, n], gb)),
                ]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.data()[0] / x.len() as f64))]
            }
            Op::Exp(a) => vec![(*a, ops::zip_map(g, &node.value, |p, q| p * q))],
            Op::SqrtGuarded(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .zip(node.value.data())
                    .map(|((&gv, &x), &y)| if x > ops::SQRT_GUARD { gv / (2.0 * y) } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::from_parts(g.shape().to_vec(), d))]
            }
            Op::Gelu(a) => vec![(*a, ops::zip_map(g, val(*a), |p, x| p * ops::gelu_grad(x)))],
            Op::Tanh(a) => vec![(*a, ops::zip_map(g, &node.value, |p, y| p * (1.0 - y * y)))],
            Op::ChannelLinear(x, w, b) => {
                let (gx, gw, gb) = ops::channel_linear_vjp(val(*x), val(*w), g);
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, gb));
                }
                out
            }
            Op::Concat(ids) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(ids.len());
                for &id in ids {
                    let c = val(id).shape()[1];
                    out.push((id, ops::slice_channels(g, start, c)?));
                    start += c;
                }
                out
            }
            Op::Slice { src, start } => {
                vec![(*src, ops::unslice_channels(val(*src).shape(), g, *start))]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape().to_vec())?)],
            Op::Custom(ids, prim) => {
                let inputs: Vec<&Tensor> = ids.iter().map(|&i| val(i)).collect();
                let grads = prim.vjp(&inputs, &node.value, g)?;
                if grads.len() != ids.len() {
                    return Err(TensorError::invalid(
                        prim.name(),
                        node.value.shape(),
                        "vjp returned wrong number of gradients",
                    ));
                }
                for (gr, inp) in grads.iter().zip(&inputs) {
                    if gr.shape() != inp.shape() {
                        return Err(TensorError::mismatch(prim.name(), inp.shape(), gr.shape()));
                    }
                }
                ids.iter().copied().zip(grads).collect()
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_is_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]).unwrap());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn identity_and_constant_seeds() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.7));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);

        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarSeed(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
        match tape.mul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "mul");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(a), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn sqrt_guard_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.0, 4.0]).unwrap());
        let y = tape.sqrt_guarded(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1e-6, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.25]);
    }

    #[test]
    fn reset_makes_tape_reusable() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.reset();
        assert!(tape.is_empty());
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[6.0]);
    }
}
