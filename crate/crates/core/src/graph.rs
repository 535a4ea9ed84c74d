//! One forward definition, two executions.
//!
//! Network code is written once against [`Ops`]. [`Eager`] evaluates it
//! directly on tensors; [`Tape`] records it for differentiation, turning each
//! weight into a leaf node.

use crate::attention;
use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::memory;
use crate::scalar::Scalar;
use crate::tensor::{self, Conv2dSpec, Tensor};

pub trait Ops<T: Scalar> {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;
    fn input(&mut self, t: Tensor<T>) -> Self::Var;

    fn conv2d(
        &mut self,
        x: &Self::Var,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        spec: Conv2dSpec,
    ) -> Result<Self::Var>;
    fn channel_affine(
        &mut self,
        x: &Self::Var,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
    ) -> Result<Self::Var>;
    fn layer_norm(&mut self, x: &Self::Var, axis: usize) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, s: T) -> Self::Var;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;
    fn gelu(&mut self, x: &Self::Var) -> Self::Var;
    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var>;
    fn flatten_spatial(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn unflatten_spatial(&mut self, x: &Self::Var, h: usize, w: usize) -> Result<Self::Var>;
    fn relu_linear_attention(
        &mut self,
        q: &Self::Var,
        k: &Self::Var,
        v: &Self::Var,
        eps: T,
    ) -> Result<Self::Var>;
    fn adaptive_avg_pool(&mut self, x: &Self::Var, out_h: usize, out_w: usize)
        -> Result<Self::Var>;
    fn upsample_nearest(&mut self, x: &Self::Var, factor: usize) -> Result<Self::Var>;
    /// `x · w` with `w` a parameter matrix.
    fn matmul_param(&mut self, x: &Self::Var, w: &Tensor<T>) -> Result<Self::Var>;
    fn add_row_bias(&mut self, x: &Self::Var, bias: &Tensor<T>) -> Result<Self::Var>;
    fn mean_rows(&mut self, x: &Self::Var) -> Result<Self::Var>;
    /// Scalar `mean_i (1 − cos(x_i, target_i))`; the target is a constant.
    fn cosine_loss(&mut self, x: &Self::Var, target: &Tensor<T>) -> Result<Self::Var>;
}

/// Direct evaluation. Also records the largest per-call scratch footprint of
/// the linear-attention kernel, which is zero unless
/// [`memory::CountingAlloc`] is installed.
#[derive(Clone, Debug, Default)]
pub struct Eager {
    pub attention_peak_bytes: usize,
    pub attention_calls: usize,
    /// Largest token count seen by one attention call.
    pub attention_max_tokens: usize,
    /// Calls whose footprint exceeded [`attention::linear_scratch_bytes`].
    pub attention_budget_violations: usize,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Ops<T> for Eager {
    type Var = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn input(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        spec: Conv2dSpec,
    ) -> Result<Tensor<T>> {
        tensor::conv2d(x, w, b, spec)
    }

    fn channel_affine(
        &mut self,
        x: &Tensor<T>,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        tensor::channel_affine(x, scale, shift)
    }

    fn layer_norm(&mut self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        tensor::layer_norm(x, axis)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::mul(a, b)
    }

    fn scale(&mut self, x: &Tensor<T>, s: T) -> Tensor<T> {
        tensor::scale(x, s)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        tensor::relu(x)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        tensor::sigmoid(x)
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        tensor::gelu(x)
    }

    fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        x.reshape(shape)
    }

    fn flatten_spatial(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.flatten_spatial()
    }

    fn unflatten_spatial(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        x.unflatten_spatial(h, w)
    }

    fn relu_linear_attention(
        &mut self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        let (out, stats) = memory::track(|| attention::relu_linear_attention(q, k, v, eps));
        let out = out?;
        let (n, d, e) = (q.dim(0), q.dim(1), v.dim(1));
        self.attention_calls += 1;
        self.attention_peak_bytes = self.attention_peak_bytes.max(stats.peak_bytes);
        self.attention_max_tokens = self.attention_max_tokens.max(n);
        if stats.peak_bytes > attention::linear_scratch_bytes(n, d, e, std::mem::size_of::<T>()) {
            self.attention_budget_violations += 1;
        }
        Ok(out)
    }

    fn adaptive_avg_pool(
        &mut self,
        x: &Tensor<T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<T>> {
        tensor::adaptive_avg_pool(x, out_h, out_w)
    }

    fn upsample_nearest(&mut self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        tensor::upsample_nearest(x, factor)
    }

    fn matmul_param(&mut self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::matmul(x, w)
    }

    fn add_row_bias(&mut self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add_row_bias(x, bias)
    }

    fn mean_rows(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::mean_rows(x)
    }

    fn cosine_loss(&mut self, x: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(tensor::cosine_loss(x, target)?))
    }
}

impl<T: Scalar> Ops<T> for Tape<T> {
    type Var = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        Tape::value(self, *v)
    }

    fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t)
    }

    fn conv2d(
        &mut self,
        x: &NodeId,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        spec: Conv2dSpec,
    ) -> Result<NodeId> {
        let w = self.leaf(w.clone());
        let b = b.map(|b| self.leaf(b.clone()));
        Tape::conv2d(self, *x, w, b, spec)
    }

    fn channel_affine(
        &mut self,
        x: &NodeId,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
    ) -> Result<NodeId> {
        let s = self.leaf(scale.clone());
        let b = self.leaf(shift.clone());
        Tape::channel_affine(self, *x, s, b)
    }

    fn layer_norm(&mut self, x: &NodeId, axis: usize) -> Result<NodeId> {
        Tape::layer_norm(self, *x, axis)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Tape::add(self, *a, *b)
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Tape::mul(self, *a, *b)
    }

    fn scale(&mut self, x: &NodeId, s: T) -> NodeId {
        Tape::scale(self, *x, s)
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        Tape::relu(self, *x)
    }

    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        Tape::sigmoid(self, *x)
    }

    fn gelu(&mut self, x: &NodeId) -> NodeId {
        Tape::gelu(self, *x)
    }

    fn reshape(&mut self, x: &NodeId, shape: &[usize]) -> Result<NodeId> {
        Tape::reshape(self, *x, shape)
    }

    fn flatten_spatial(&mut self, x: &NodeId) -> Result<NodeId> {
        Tape::flatten_spatial(self, *x)
    }

    fn unflatten_spatial(&mut self, x: &NodeId, h: usize, w: usize) -> Result<NodeId> {
        Tape::unflatten_spatial(self, *x, h, w)
    }

    fn relu_linear_attention(
        &mut self,
        q: &NodeId,
        k: &NodeId,
        v: &NodeId,
        eps: T,
    ) -> Result<NodeId> {
        Tape::relu_linear_attention(self, *q, *k, *v, eps)
    }

    fn adaptive_avg_pool(&mut self, x: &NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        Tape::adaptive_avg_pool(self, *x, out_h, out_w)
    }

    fn upsample_nearest(&mut self, x: &NodeId, factor: usize) -> Result<NodeId> {
        Tape::upsample_nearest(self, *x, factor)
    }

    fn matmul_param(&mut self, x: &NodeId, w: &Tensor<T>) -> Result<NodeId> {
        let w = self.leaf(w.clone());
        Tape::matmul(self, *x, w)
    }

    fn add_row_bias(&mut self, x: &NodeId, bias: &Tensor<T>) -> Result<NodeId> {
        let b = self.leaf(bias.clone());
        Tape::add_row_bias(self, *x, b)
    }

    fn mean_rows(&mut self, x: &NodeId) -> Result<NodeId> {
        Tape::mean_rows(self, *x)
    }

    fn cosine_loss(&mut self, x: &NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let t = self.leaf(target.clone());
        Tape::cosine_loss(self, *x, t)
    }
}
