//! Reverse-mode differentiation over the tensor primitives.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node stores
//! its output value, the ids of its inputs, and whatever the backward rule
//! needs; node ids are handed out in recording order, so the node list is
//! always topologically sorted and [`Tape::backward`] is a single reverse
//! sweep.

mod check;
mod rules;

use crate::attention;
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Conv2dSpec, Tensor};

pub use check::{finite_diff_check, GradCheck, FD_STEP};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    MatMul,
    Transpose,
    Reshape,
    FlattenSpatial,
    UnflattenSpatial,
    Conv2d(Conv2dSpec),
    Relu,
    Sigmoid,
    Gelu,
    SoftmaxRows,
    LayerNorm { axis: usize, inv_std: Vec<T> },
    ChannelAffine,
    BatchNorm,
    AdaptiveAvgPool,
    UpsampleNearest(usize),
    AddRowBias,
    MeanRows,
    Sum,
    ReluLinearAttention(T),
    CosineLoss,
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::FlattenSpatial => "flatten_spatial",
            Op::UnflattenSpatial => "unflatten_spatial",
            Op::Conv2d(_) => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Gelu => "gelu",
            Op::SoftmaxRows => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ChannelAffine => "channel_affine",
            Op::BatchNorm => "batch_norm",
            Op::AdaptiveAvgPool => "adaptive_avg_pool",
            Op::UpsampleNearest(_) => "upsample_nearest",
            Op::AddRowBias => "add_row_bias",
            Op::MeanRows => "mean_rows",
            Op::Sum => "sum",
            Op::ReluLinearAttention(_) => "relu_linear_attention",
            Op::CosineLoss => "cosine_loss",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor<T>,
}

/// Record of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one output with respect to every node on the tape.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`; all zeros when `id` does not reach the output.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn is_reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Input ids of `id`, in argument order.
    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, op: Op<T>, inputs: &[NodeId], value: Tensor<T>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, &[], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, &[a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub, &[a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul, &[a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = tensor::scale(self.value(a), s);
        self.push(Op::Scale(s), &[a], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul, &[a, b], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose_2d()?;
        Ok(self.push(Op::Transpose, &[a], v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape, &[a], v))
    }

    pub fn flatten_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).flatten_spatial()?;
        Ok(self.push(Op::FlattenSpatial, &[a], v))
    }

    pub fn unflatten_spatial(&mut self, a: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let v = self.value(a).unflatten_spatial(h, w)?;
        Ok(self.push(Op::UnflattenSpatial, &[a], v))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: Conv2dSpec,
    ) -> Result<NodeId> {
        let v = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv2d(spec), &inputs, v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = tensor::relu(self.value(a));
        self.push(Op::Relu, &[a], v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = tensor::sigmoid(self.value(a));
        self.push(Op::Sigmoid, &[a], v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = tensor::gelu(self.value(a));
        self.push(Op::Gelu, &[a], v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows, &[a], v))
    }

    pub fn layer_norm(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (v, inv_std) = tensor::layer_norm_with_stats(self.value(a), axis)?;
        Ok(self.push(Op::LayerNorm { axis, inv_std }, &[a], v))
    }

    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let v = tensor::channel_affine(self.value(x), self.value(scale), self.value(shift))?;
        Ok(self.push(Op::ChannelAffine, &[x, scale, shift], v))
    }

    /// Inference batch norm; inputs are `x, gamma, beta, mean, var`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
    ) -> Result<NodeId> {
        let v = tensor::batch_norm_infer(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            self.value(mean),
            self.value(var),
        )?;
        Ok(self.push(Op::BatchNorm, &[x, gamma, beta, mean, var], v))
    }

    pub fn adaptive_avg_pool(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let v = tensor::adaptive_avg_pool(self.value(x), out_h, out_w)?;
        Ok(self.push(Op::AdaptiveAvgPool, &[x], v))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let v = tensor::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(Op::UpsampleNearest(factor), &[x], v))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = tensor::add_row_bias(self.value(x), self.value(bias))?;
        Ok(self.push(Op::AddRowBias, &[x, bias], v))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::mean_rows(self.value(x))?;
        Ok(self.push(Op::MeanRows, &[x], v))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, &[x], v)
    }

    pub fn relu_linear_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        eps: T,
    ) -> Result<NodeId> {
        let out =
            attention::relu_linear_attention(self.value(q), self.value(k), self.value(v), eps)?;
        Ok(self.push(Op::ReluLinearAttention(eps), &[q, k, v], out))
    }

    pub fn cosine_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::cosine_loss(self.value(a), self.value(b))?;
        Ok(self.push(Op::CosineLoss, &[a, b], Tensor::scalar(v)))
    }

    /// Propagates `seed` (shaped like `output`) back through the tape.
    pub fn backward(&self, output: NodeId, seed: &Tensor<T>) -> Result<Gradients<T>> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return dim_err(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                out_shape
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contribs = rules::backward(self, node, &g)?;
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (input, c) in node.inputs.iter().zip(contribs) {
                debug_assert_eq!(c.shape(), self.value(*input).shape());
                let slot = &mut grads[input.0];
                *slot = Some(match slot.take() {
                    Some(acc) => tensor::add(&acc, &c)?,
                    None => c,
                });
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }
}
