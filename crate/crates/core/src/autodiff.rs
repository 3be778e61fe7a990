//! Reverse-mode differentiation over the fixed operator set of the network.
//!
//! A [`Tape`] evaluates eagerly: every recording call computes its output,
//! checks it is finite, and stores whatever the adjoint needs. Calling
//! [`Tape::backward`] replays the nodes in reverse creation order, which is a
//! topological order because nodes can only reference earlier nodes.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, norm::BatchNormCache, ConvGeometry, Mode, PoolGeometry, UpsampleMethod};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

enum Op<T> {
    Input,
    Param(String),
    Conv2d { geom: ConvGeometry, has_bias: bool },
    BatchNorm(Box<BatchNormCache<T>>),
    Relu,
    Sigmoid,
    MaxPool { argmax: Vec<usize> },
    AvgPool(PoolGeometry),
    AdaptiveAvgPool,
    Upsample { factor: usize, method: UpsampleMethod },
    ResizeBilinear,
    Concat { channels: Vec<usize> },
    ChannelSum,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(T),
    Sum,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm(_) => "batchnorm",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::MaxPool { .. } => "maxpool",
            Op::AvgPool(_) => "avgpool",
            Op::AdaptiveAvgPool => "adaptive_avgpool",
            Op::Upsample { .. } => "upsample",
            Op::ResizeBilinear => "resize_bilinear",
            Op::Concat { .. } => "concat",
            Op::ChannelSum => "channel_sum",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Sum => "sum",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of every parameter leaf; parameters the loss does not reach get zeros.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Batch mean and unbiased variance computed by a train-mode batchnorm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id].op {
            Op::BatchNorm(cache) if cache.mode == Mode::Train => Some((&cache.batch_mean, &cache.batch_var)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> Result<NodeId> {
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} produced {} at element {i}", op.name(), value.data()[i])));
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(self.nodes.len() - 1)
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.nodes.len()) {
            Some(id) => Err(Error::Graph(format!("node {id} has not been recorded"))),
            None => Ok(()),
        }
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Input, vec![], value)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Param(name.into()), vec![], value)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.check(&inputs)?;
        let out = ops::conv2d(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), geom)?;
        self.push(Op::Conv2d { geom, has_bias: bias.is_some() }, inputs, out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        mode: Mode,
        eps: f64,
    ) -> Result<NodeId> {
        self.check(&[x, gamma, beta])?;
        let (out, cache) =
            ops::batchnorm2d(self.value(x), self.value(gamma), self.value(beta), running_mean, running_var, mode, eps)?;
        self.push(Op::BatchNorm(Box::new(cache)), vec![x, gamma, beta], out)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let out = ops::relu(self.value(x));
        self.push(Op::Relu, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let out = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid, vec![x], out)
    }

    pub fn maxpool(&mut self, x: NodeId, geom: PoolGeometry) -> Result<NodeId> {
        self.check(&[x])?;
        let (out, argmax) = ops::maxpool2d(self.value(x), geom)?;
        self.push(Op::MaxPool { argmax }, vec![x], out)
    }

    pub fn avgpool(&mut self, x: NodeId, geom: PoolGeometry) -> Result<NodeId> {
        self.check(&[x])?;
        let out = ops::avgpool2d(self.value(x), geom)?;
        self.push(Op::AvgPool(geom), vec![x], out)
    }

    pub fn adaptive_avgpool(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        self.check(&[x])?;
        let out = ops::adaptive_avgpool2d(self.value(x), out_h, out_w)?;
        self.push(Op::AdaptiveAvgPool, vec![x], out)
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize, method: UpsampleMethod) -> Result<NodeId> {
        self.check(&[x])?;
        let out = ops::upsample(self.value(x), factor, method)?;
        self.push(Op::Upsample { factor, method }, vec![x], out)
    }

    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        self.check(&[x])?;
        let out = ops::resize_bilinear(self.value(x), out_h, out_w)?;
        self.push(Op::ResizeBilinear, vec![x], out)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.check(xs)?;
        let values: Vec<&Tensor<T>> = xs.iter().map(|&i| self.value(i)).collect();
        let out = ops::concat_channels(&values)?;
        let channels = values.iter().map(|v| v.shape()[1]).collect();
        self.push(Op::Concat { channels }, xs.to_vec(), out)
    }

    pub fn channel_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let out = ops::channel_sum(self.value(x))?;
        self.push(Op::ChannelSum, vec![x], out)
    }

    fn binary(&mut self, op: Op<T>, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        self.check(&[a, b])?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        self.push(op, vec![a, b], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar, vec![x], out)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| v * c);
        self.push(Op::MulScalar(c), vec![x], out)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], out)
    }

    /// Gradients of a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "backward called before forward: loss node {loss} has not been recorded"
            )));
        }
        if self.value(loss).len() != 1 {
            return shape_err(format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()));
        }
        self.backward_from(loss, Tensor::ones(self.value(loss).shape().to_vec()))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_from(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        if output >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "backward called before forward: node {output} has not been recorded"
            )));
        }
        seed.expect_same_shape(self.value(output))?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(seed);
        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let contributions = self.node_backward(node, &g)?;
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contrib {
                    match &mut grads[*input] {
                        Some(acc) => acc.axpy(T::one(), &c)?,
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[id].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                match params.get_mut(name) {
                    Some(acc) => Tensor::axpy(acc, T::one(), &g)?,
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let inp = |k: usize| self.value(node.inputs[k]);
        Ok(match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { geom, has_bias } => {
                let grads = ops::conv2d_backward(inp(0), inp(1), *has_bias, *geom, g)?;
                let mut out = vec![Some(grads.input), Some(grads.kernel)];
                if *has_bias {
                    out.push(grads.bias);
                }
                out
            }
            Op::BatchNorm(cache) => {
                let grads = ops::batchnorm2d_backward(cache, inp(1), g)?;
                vec![Some(grads.input), Some(grads.gamma), Some(grads.beta)]
            }
            Op::Relu => vec![Some(g.zip_map(inp(0), |gv, x| if x > T::zero() { gv } else { T::zero() })?)],
            Op::Sigmoid => vec![Some(g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s))?)],
            Op::MaxPool { argmax } => vec![Some(ops::pool::maxpool2d_backward(inp(0).shape(), argmax, g))],
            Op::AvgPool(geom) => vec![Some(ops::pool::avgpool2d_backward(inp(0).shape(), *geom, g)?)],
            Op::AdaptiveAvgPool => vec![Some(ops::pool::adaptive_avgpool2d_backward(inp(0).shape(), g)?)],
            Op::Upsample { factor, method } => {
                vec![Some(ops::resample::upsample_backward(inp(0).shape(), *factor, *method, g)?)]
            }
            Op::ResizeBilinear => vec![Some(ops::resample::resize_bilinear_backward(inp(0).shape(), g)?)],
            Op::Concat { channels } => ops::split_channels(g, channels)?.into_iter().map(Some).collect(),
            Op::ChannelSum => vec![Some(ops::channel_sum_backward(inp(0).shape(), g)?)],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => vec![Some(g.zip_map(inp(1), |a, b| a * b)?), Some(g.zip_map(inp(0), |a, b| a * b)?)],
            Op::Div => {
                let gb = g.zip_map(&node.value, |gv, q| gv * q)?.zip_map(inp(1), |v, b| -v / b)?;
                vec![Some(g.zip_map(inp(1), |gv, b| gv / b)?), Some(gb)]
            }
            Op::AddScalar => vec![Some(g.clone())],
            Op::MulScalar(c) => vec![Some(g.map(|v| v * *c))],
            Op::Sum => {
                let upstream = g.data()[0];
                vec![Some(Tensor::full(inp(0).shape().to_vec(), upstream))]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param("w", Tensor::full(vec![2, 3], 0.7)).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.param("w").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param("w", Tensor::full(vec![4], 2.0)).unwrap();
        let q = tape.mul(p, p).unwrap();
        let s = tape.sum(q).unwrap();
        let loss = tape.mul_scalar(s, 0.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.param("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let used = tape.param("used", Tensor::ones(vec![3])).unwrap();
        tape.param("unused", Tensor::ones(vec![2, 2])).unwrap();
        let loss = tape.sum(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        let unused = grads.param("unused").unwrap();
        assert_eq!(unused.shape(), &[2, 2]);
        assert!(unused.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_before_forward_rejected() {
        let tape = Tape::<f32>::new();
        assert!(matches!(tape.backward(0), Err(Error::Graph(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let p = tape.param("w", Tensor::ones(vec![3])).unwrap();
        assert!(matches!(tape.backward(p), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::ones(vec![2])).unwrap();
        let z = tape.input(Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite(_))));
    }
}
