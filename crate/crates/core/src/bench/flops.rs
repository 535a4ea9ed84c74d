//! Analytic operation counts.
//!
//! Counts are multiply-accumulates: one per product term of a convolution,
//! dense layer, or attention contraction, plus the per-row normalizer work of
//! the attention kernels. Elementwise activations, norms, and residual adds
//! are not counted.

use crate::error::{dim_err, Result};
use crate::graph::Ops;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{self, Conv2dSpec, Tensor};

/// `ReLU(Q)(ReLU(K)ᵀV)` with its normalizer: two `N·d·e` contractions, the
/// key sum and per-row denominator (`N·d` each), and the final division
/// (`N·e`). Equals `2Nd² + 3Nd` when `e = d`.
pub fn relu_linear_flops(n: u64, d: u64, e: u64) -> u64 {
    2 * n * d * e + 2 * n * d + n * e
}

/// `softmax(QKᵀ/√d)V`: two `N²·d` contractions plus scaling, max, exp and
/// normalization over the `N×N` score matrix.
pub fn softmax_flops(n: u64, d: u64) -> u64 {
    2 * n * n * d + 4 * n * n
}

/// Shape-only executor that tallies multiply-accumulates instead of
/// computing values.
#[derive(Clone, Debug, Default)]
pub struct FlopCounter {
    pub macs: u64,
    pub attention_macs: u64,
}

impl<T: Scalar> Ops<T> for FlopCounter {
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
        let g = tensor::conv_geometry(x, w, b, spec)?;
        self.macs += (g.c_out * g.oh * g.ow * g.cin_per_group() * g.k * g.k) as u64;
        Ok(Tensor::zeros(&[g.c_out, g.oh, g.ow]))
    }

    fn channel_affine(&mut self, x: &Tensor<T>, _: &Tensor<T>, _: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn layer_norm(&mut self, x: &Tensor<T>, _: usize) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.expect_same_shape(b)?;
        Ok(a.clone())
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.expect_same_shape(b)?;
        Ok(a.clone())
    }

    fn scale(&mut self, x: &Tensor<T>, _: T) -> Tensor<T> {
        x.clone()
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        x.reshape(shape)
    }

    fn flatten_spatial(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.chw()?;
        Ok(Tensor::zeros(&[h * w, c]))
    }

    fn unflatten_spatial(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let (n, c) = x.rows_cols()?;
        if n != h * w {
            return dim_err(format!("cannot unflatten {n} tokens into {h}×{w}"));
        }
        Ok(Tensor::zeros(&[c, h, w]))
    }

    fn relu_linear_attention(
        &mut self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        _: T,
    ) -> Result<Tensor<T>> {
        let (n, d) = q.rows_cols()?;
        let (nv, e) = v.rows_cols()?;
        if k.shape() != [n, d] || nv != n {
            return dim_err("attention operand shapes disagree");
        }
        let f = relu_linear_flops(n as u64, d as u64, e as u64);
        self.macs += f;
        self.attention_macs += f;
        Ok(Tensor::zeros(&[n, e]))
    }

    fn adaptive_avg_pool(
        &mut self,
        x: &Tensor<T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<T>> {
        let (c, _, _) = x.chw()?;
        Ok(Tensor::zeros(&[c, out_h, out_w]))
    }

    fn upsample_nearest(&mut self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        let (c, h, w) = x.chw()?;
        Ok(Tensor::zeros(&[c, h * factor, w * factor]))
    }

    fn matmul_param(&mut self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, k) = x.rows_cols()?;
        let (k2, p) = w.rows_cols()?;
        if k != k2 {
            return dim_err(format!("cannot multiply {r}×{k} by {k2}×{p}"));
        }
        self.macs += (r * k * p) as u64;
        Ok(Tensor::zeros(&[r, p]))
    }

    fn add_row_bias(&mut self, x: &Tensor<T>, _: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn mean_rows(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, d) = x.rows_cols()?;
        Ok(Tensor::zeros(&[1, d]))
    }

    fn cosine_loss(&mut self, _: &Tensor<T>, _: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(T::zero()))
    }
}

/// Per-part multiply-accumulate counts of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelFlops {
    pub stem: u64,
    /// Each stage including its leading downsample.
    pub stages: [u64; 4],
    /// The attention-kernel share of each stage.
    pub attention: [u64; 4],
    pub head: u64,
    pub total: u64,
}

/// Counts for a `3×resolution×resolution` input.
pub fn model_flops(config: &ModelConfig, resolution: usize) -> Result<ModelFlops> {
    let model = Model::<f32>::build(config, 0)?;
    model_flops_of(&model, resolution, resolution)
}

pub fn model_flops_of<T: Scalar>(model: &Model<T>, h: usize, w: usize) -> Result<ModelFlops> {
    let x = Tensor::<T>::zeros(&[model.config.in_channels, h, w]);
    model.check_input(&x)?;
    let mut g = FlopCounter::default();
    let mut y = model.stem.forward(&mut g, &x)?;
    let stem = g.macs;
    let mut stages = [0; 4];
    let mut attention = [0; 4];
    for (i, stage) in model.stages.iter().enumerate() {
        let before = (g.macs, g.attention_macs);
        if let Some(d) = &stage.downsample {
            y = d.forward(&mut g, &y)?;
        }
        for b in &stage.blocks {
            y = b.forward(&mut g, &y)?;
        }
        stages[i] = g.macs - before.0;
        attention[i] = g.attention_macs - before.1;
    }
    let before = g.macs;
    model.head.forward(&mut g, &y)?;
    let head = g.macs - before;
    Ok(ModelFlops {
        stem,
        stages,
        attention,
        head,
        total: g.macs,
    })
}
