//! Convolutional building blocks and the per-block containers the network
//! is assembled from.
//!
//! Every block that carries a residual path reduces to the identity when its
//! weights are zeroed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{rgma_in, AttentionParams, GateVariant};
use crate::error::{config_err, Error, Result};
use crate::graph::{Eager, Ops};
use crate::scalar::Scalar;
use crate::tensor::{self, Conv2dSpec, Tensor};

/// Whether a named tensor is trained or a running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

/// Named-tensor traversal shared by parameter counting and weight files.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, kind| {
            if kind == TensorKind::Param {
                n += t.len()
            }
        });
        n
    }

    /// Sets every learnable tensor to zero.
    fn zero_params(&mut self) {
        self.visit_mut("", &mut |_, t, kind| {
            if kind == TensorKind::Param {
                t.data_mut().fill(T::zero())
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! module_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: Scalar> Module<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
                $( self.$field.visit(&join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
                $( self.$field.visit_mut(&join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

/// Weight initialization: truncated normal weights, normal (often zero) biases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Init {
    pub weight_std: f64,
    pub bias_std: f64,
}

impl Default for Init {
    fn default() -> Self {
        Self {
            weight_std: 0.02,
            bias_std: 0.0,
        }
    }
}

impl Init {
    pub fn random(std: f64) -> Self {
        Self {
            weight_std: std,
            bias_std: std,
        }
    }

    fn weight<T: Scalar, R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        Tensor::trunc_normal(shape, self.weight_std, rng)
    }

    fn bias<T: Scalar, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        if self.bias_std == 0.0 {
            Tensor::zeros(&[n])
        } else {
            Tensor::randn(&[n], self.bias_std, rng)
        }
    }
}

/// `ratio · c` as a channel count; fails unless it is a positive integer.
pub fn hidden_width(c: usize, ratio: f64) -> Result<usize> {
    let h = ratio * c as f64;
    if ratio.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        || (h - h.round()).abs() > 1e-9
        || h.round() < 1.0
    {
        return config_err(format!(
            "expansion ratio {ratio} on {c} channels does not give a whole hidden width"
        ));
    }
    Ok(h.round() as usize)
}

/// One convolution with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = init.weight(&[c_out, c_in / spec.groups, k, k], rng);
        let bias = bias.then(|| init.bias(c_out, rng));
        Self { weight, bias, spec }
    }

    pub fn pointwise<R: Rng + ?Sized>(c_in: usize, c_out: usize, init: Init, rng: &mut R) -> Self {
        Self::new(c_in, c_out, 1, Conv2dSpec::pointwise(), true, init, rng)
    }

    pub fn depthwise<R: Rng + ?Sized>(c: usize, k: usize, init: Init, rng: &mut R) -> Self {
        Self::new(c, c, k, Conv2dSpec::depthwise(c, k), true, init, rng)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        g.conv2d(x, &self.weight, self.bias.as_ref(), self.spec)
    }
}

impl<T: Scalar> Module<T> for ConvLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        f(&join(prefix, "weight"), &self.weight, TensorKind::Param);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, TensorKind::Param);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        f(&join(prefix, "weight"), &mut self.weight, TensorKind::Param);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, TensorKind::Param);
        }
    }
}

/// Inference batch norm; running statistics are buffers, not parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            mean: Tensor::zeros(&[c]),
            var: Tensor::ones(&[c]),
        }
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let (scale, shift) =
            tensor::fold_batch_norm(&self.gamma, &self.beta, &self.mean, &self.var)?;
        g.channel_affine(x, &scale, &shift)
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        f(&join(prefix, "gamma"), &self.gamma, TensorKind::Param);
        f(&join(prefix, "beta"), &self.beta, TensorKind::Param);
        f(&join(prefix, "mean"), &self.mean, TensorKind::Buffer);
        f(&join(prefix, "var"), &self.var, TensorKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, TensorKind::Param);
        f(&join(prefix, "beta"), &mut self.beta, TensorKind::Param);
        f(&join(prefix, "mean"), &mut self.mean, TensorKind::Buffer);
        f(&join(prefix, "var"), &mut self.var, TensorKind::Buffer);
    }
}

/// Layer norm across channels at every spatial position, with affine.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> ChannelNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
        }
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let n = g.layer_norm(x, 0)?;
        g.channel_affine(&n, &self.gamma, &self.beta)
    }
}

impl<T: Scalar> Module<T> for ChannelNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        f(&join(prefix, "gamma"), &self.gamma, TensorKind::Param);
        f(&join(prefix, "beta"), &self.beta, TensorKind::Param);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, TensorKind::Param);
        f(&join(prefix, "beta"), &mut self.beta, TensorKind::Param);
    }
}

impl<T: Scalar> Module<T> for AttentionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        f(&join(prefix, "wq"), &self.wq, TensorKind::Param);
        f(&join(prefix, "wk"), &self.wk, TensorKind::Param);
        f(&join(prefix, "wv"), &self.wv, TensorKind::Param);
        f(&join(prefix, "gate_w"), &self.gate_w, TensorKind::Param);
        f(&join(prefix, "gate_b"), &self.gate_b, TensorKind::Param);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        f(&join(prefix, "wq"), &mut self.wq, TensorKind::Param);
        f(&join(prefix, "wk"), &mut self.wk, TensorKind::Param);
        f(&join(prefix, "wv"), &mut self.wv, TensorKind::Param);
        f(&join(prefix, "gate_w"), &mut self.gate_w, TensorKind::Param);
        f(&join(prefix, "gate_b"), &mut self.gate_b, TensorKind::Param);
    }
}

fn check_channels<T: Scalar>(
    x: &Tensor<T>,
    c: usize,
    block: &str,
) -> Result<(usize, usize, usize)> {
    let (xc, h, w) = x.chw()?;
    if xc != c {
        return config_err(format!("{block} expects {c} channels, got {xc}"));
    }
    Ok((xc, h, w))
}

/// `x + DWConv3×3(x)`: convolutional position encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Cpe<T: Scalar = f32> {
    pub dw: ConvLayer<T>,
}
module_fields!(Cpe { dw });

impl<T: Scalar> Cpe<T> {
    pub fn new<R: Rng + ?Sized>(c: usize, init: Init, rng: &mut R) -> Self {
        Self {
            dw: ConvLayer::depthwise(c, 3, init, rng),
        }
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g.value(x), self.dw.weight.dim(0), "CPE")?;
        let y = self.dw.forward(g, x)?;
        g.add(x, &y)
    }
}

/// `x + PW(GELU(PW(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<T: Scalar = f32> {
    pub expand: ConvLayer<T>,
    pub project: ConvLayer<T>,
}
module_fields!(Ffn { expand, project });

impl<T: Scalar> Ffn<T> {
    pub fn new<R: Rng + ?Sized>(c: usize, ratio: f64, init: Init, rng: &mut R) -> Result<Self> {
        let h = hidden_width(c, ratio)?;
        Ok(Self {
            expand: ConvLayer::pointwise(c, h, init, rng),
            project: ConvLayer::pointwise(h, c, init, rng),
        })
    }

    pub fn hidden(&self) -> usize {
        self.expand.weight.dim(0)
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g.value(x), self.project.weight.dim(0), "FFN")?;
        let h = self.expand.forward(g, x)?;
        let h = g.gelu(&h);
        let y = self.project.forward(g, &h)?;
        g.add(x, &y)
    }
}

/// Inverted bottleneck: `x + PW(GELU(DW3×3(GELU(PW(x)))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mib<T: Scalar = f32> {
    pub expand: ConvLayer<T>,
    pub dw: ConvLayer<T>,
    pub project: ConvLayer<T>,
}
module_fields!(Mib {
    expand,
    dw,
    project
});

impl<T: Scalar> Mib<T> {
    pub fn new<R: Rng + ?Sized>(c: usize, ratio: f64, init: Init, rng: &mut R) -> Result<Self> {
        let h = hidden_width(c, ratio)?;
        Ok(Self {
            expand: ConvLayer::pointwise(c, h, init, rng),
            dw: ConvLayer::depthwise(h, 3, init, rng),
            project: ConvLayer::pointwise(h, c, init, rng),
        })
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g.value(x), self.project.weight.dim(0), "MIB")?;
        let h = self.expand.forward(g, x)?;
        let h = g.gelu(&h);
        let h = self.dw.forward(g, &h)?;
        let h = g.gelu(&h);
        let y = self.project.forward(g, &h)?;
        g.add(x, &y)
    }
}

/// Large receptive field from two small depthwise convs:
/// `y = x + DW3×3(x)`, then `y + PW(DW5×5(GELU(PW(y))))`.
/// The non-residual impulse response spans exactly 7×7.
#[derive(Clone, Debug, PartialEq)]
pub struct Elrf<T: Scalar = f32> {
    pub dw3: ConvLayer<T>,
    pub expand: ConvLayer<T>,
    pub dw5: ConvLayer<T>,
    pub project: ConvLayer<T>,
}
module_fields!(Elrf {
    dw3,
    expand,
    dw5,
    project
});

impl<T: Scalar> Elrf<T> {
    pub fn new<R: Rng + ?Sized>(c: usize, ratio: f64, init: Init, rng: &mut R) -> Result<Self> {
        let h = hidden_width(c, ratio)?;
        Ok(Self {
            dw3: ConvLayer::depthwise(c, 3, init, rng),
            expand: ConvLayer::pointwise(c, h, init, rng),
            dw5: ConvLayer::depthwise(h, 5, init, rng),
            project: ConvLayer::pointwise(h, c, init, rng),
        })
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g.value(x), self.dw3.weight.dim(0), "ELRF")?;
        let local = self.dw3.forward(g, x)?;
        let y = g.add(x, &local)?;
        let h = self.expand.forward(g, &y)?;
        let h = g.gelu(&h);
        let h = self.dw5.forward(g, &h)?;
        let out = self.project.forward(g, &h)?;
        g.add(&y, &out)
    }
}

/// Plain `k×k` depthwise block for the early-stage kernel-size ablation:
/// `y = x + DWk×k(x)`, then `y + FFN(y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DwConvBlock<T: Scalar = f32> {
    pub dw: ConvLayer<T>,
    pub ffn: Ffn<T>,
}
module_fields!(DwConvBlock { dw, ffn });

impl<T: Scalar> DwConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        c: usize,
        k: usize,
        ratio: f64,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            dw: ConvLayer::depthwise(c, k, init, rng),
            ffn: Ffn::new(c, ratio, init, rng)?,
        })
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g.value(x), self.dw.weight.dim(0), "depthwise block")?;
        let local = self.dw.forward(g, x)?;
        let y = g.add(x, &local)?;
        self.ffn.forward(g, &y)
    }
}

/// Lightweight post-attention mixer: `x + PW(DW3×3(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3Post<T: Scalar = f32> {
    pub dw: ConvLayer<T>,
    pub pw: ConvLayer<T>,
}
module_fields!(Conv3Post { dw, pw });

impl<T: Scalar> Conv3Post<T> {
    pub fn new<R: Rng + ?Sized>(c: usize, init: Init, rng: &mut R) -> Self {
        Self {
            dw: ConvLayer::depthwise(c, 3, init, rng),
            pw: ConvLayer::pointwise(c, c, init, rng),
        }
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g.value(x), self.pw.weight.dim(0), "Conv3")?;
        let h = self.dw.forward(g, x)?;
        let y = self.pw.forward(g, &h)?;
        g.add(x, &y)
    }
}

/// Which block follows attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PostAttnKind {
    #[default]
    Conv3,
    Ffn,
    Mib,
}

impl PostAttnKind {
    pub const ALL: [PostAttnKind; 3] = [Self::Conv3, Self::Ffn, Self::Mib];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conv3 => "conv3",
            Self::Ffn => "ffn",
            Self::Mib => "mib",
        }
    }
}

impl fmt::Display for PostAttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PostAttnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv3" | "conv.3" => Ok(Self::Conv3),
            "ffn" => Ok(Self::Ffn),
            "mib" => Ok(Self::Mib),
            _ => config_err(format!(
                "unknown post-attention block `{s}` (expected conv3, ffn, mib)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PostAttention<T: Scalar = f32> {
    Conv3(Conv3Post<T>),
    Ffn(Ffn<T>),
    Mib(Mib<T>),
}

impl<T: Scalar> PostAttention<T> {
    pub fn new<R: Rng + ?Sized>(
        kind: PostAttnKind,
        c: usize,
        ratio: f64,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            PostAttnKind::Conv3 => Self::Conv3(Conv3Post::new(c, init, rng)),
            PostAttnKind::Ffn => Self::Ffn(Ffn::new(c, ratio, init, rng)?),
            PostAttnKind::Mib => Self::Mib(Mib::new(c, ratio, init, rng)?),
        })
    }

    pub fn kind(&self) -> PostAttnKind {
        match self {
            Self::Conv3(_) => PostAttnKind::Conv3,
            Self::Ffn(_) => PostAttnKind::Ffn,
            Self::Mib(_) => PostAttnKind::Mib,
        }
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        match self {
            Self::Conv3(b) => b.forward(g, x),
            Self::Ffn(b) => b.forward(g, x),
            Self::Mib(b) => b.forward(g, x),
        }
    }
}

impl<T: Scalar> Module<T> for PostAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        match self {
            Self::Conv3(b) => b.visit(prefix, f),
            Self::Ffn(b) => b.visit(prefix, f),
            Self::Mib(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        match self {
            Self::Conv3(b) => b.visit_mut(prefix, f),
            Self::Ffn(b) => b.visit_mut(prefix, f),
            Self::Mib(b) => b.visit_mut(prefix, f),
        }
    }
}

/// Stage-3/4 unit: `x = CPE(x)`, `x = x + RGMA(LN(x))`, then the post block.
#[derive(Clone, Debug, PartialEq)]
pub struct RgmaBlock<T: Scalar = f32> {
    pub cpe: Cpe<T>,
    pub norm: ChannelNorm<T>,
    pub attn: AttentionParams<T>,
    pub post: PostAttention<T>,
    pub gate: GateVariant,
}
module_fields!(RgmaBlock {
    cpe,
    norm,
    attn,
    post
});

impl<T: Scalar> RgmaBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        c: usize,
        gate: GateVariant,
        post: PostAttnKind,
        ratio: f64,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let cpe = Cpe::new(c, init, rng);
        let attn = AttentionParams {
            wq: init.weight(&[c, c, 1, 1], rng),
            wk: init.weight(&[c, c, 1, 1], rng),
            wv: init.weight(&[c, c, 1, 1], rng),
            gate_w: init.weight(&[c, 1, 3, 3], rng),
            gate_b: init.bias(c, rng),
            eps: T::lit(crate::attention::DEFAULT_EPS),
        };
        Ok(Self {
            cpe,
            norm: ChannelNorm::new(c),
            attn,
            post: PostAttention::new(post, c, ratio, init, rng)?,
            gate,
        })
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let x = self.cpe.forward(g, x)?;
        let n = self.norm.forward(g, &x)?;
        let a = rgma_in(g, &n, &self.attn, self.gate)?;
        let x = g.add(&x, &a)?;
        self.post.forward(g, &x)
    }
}

/// Two stride-2 3×3 convs (`3 → C/2 → C`) with batch norm, GELU between.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem<T: Scalar = f32> {
    pub conv1: ConvLayer<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: ConvLayer<T>,
    pub bn2: BatchNorm<T>,
}
module_fields!(Stem {
    conv1,
    bn1,
    conv2,
    bn2
});

impl<T: Scalar> Stem<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, init: Init, rng: &mut R) -> Self {
        let mid = (c_out / 2).max(1);
        let s2 = Conv2dSpec::new(2, 1, 1);
        Self {
            conv1: ConvLayer::new(c_in, mid, 3, s2, false, init, rng),
            bn1: BatchNorm::new(mid),
            conv2: ConvLayer::new(mid, c_out, 3, s2, false, init, rng),
            bn2: BatchNorm::new(c_out),
        }
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let (_, h, w) = check_channels(g.value(x), self.conv1.weight.dim(1), "stem")?;
        if h % 4 != 0 || w % 4 != 0 {
            return config_err(format!("stem input {h}×{w} is not divisible by 4"));
        }
        let y = self.conv1.forward(g, x)?;
        let y = self.bn1.forward(g, &y)?;
        let y = g.gelu(&y);
        let y = self.conv2.forward(g, &y)?;
        self.bn2.forward(g, &y)
    }
}

/// Stride-2 3×3 conv with batch norm between stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Downsample<T: Scalar = f32> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNorm<T>,
}
module_fields!(Downsample { conv, bn });

impl<T: Scalar> Downsample<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, init: Init, rng: &mut R) -> Self {
        Self {
            conv: ConvLayer::new(c_in, c_out, 3, Conv2dSpec::new(2, 1, 1), false, init, rng),
            bn: BatchNorm::new(c_out),
        }
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let (_, h, w) = check_channels(g.value(x), self.conv.weight.dim(1), "downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return config_err(format!("downsample input {h}×{w} has an odd side"));
        }
        let y = self.conv.forward(g, x)?;
        self.bn.forward(g, &y)
    }
}

/// Block family selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Elrf,
    Ffn,
    Mib,
    Cpe,
    Conv3Post,
    Stem,
    Downsample,
    RgmaBlock,
}

/// Shape-level description of one block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels_in: usize,
    pub channels_out: usize,
    pub expansion_ratio: f64,
    pub stride: usize,
}

impl BlockSpec {
    pub fn same(kind: BlockKind, c: usize, expansion_ratio: f64) -> Self {
        Self {
            kind,
            channels_in: c,
            channels_out: c,
            expansion_ratio,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 || self.channels_out == 0 {
            return config_err("block channel counts must be positive");
        }
        match self.kind {
            BlockKind::Stem | BlockKind::Downsample => {
                if self.stride != 2 {
                    return config_err(format!("{:?} must have stride 2", self.kind));
                }
            }
            _ => {
                if self.stride != 1 {
                    return config_err(format!("{:?} must have stride 1", self.kind));
                }
                if self.channels_in != self.channels_out {
                    return config_err(format!("{:?} must preserve the channel count", self.kind));
                }
            }
        }
        if matches!(self.kind, BlockKind::Elrf | BlockKind::Ffn | BlockKind::Mib) {
            hidden_width(self.channels_in, self.expansion_ratio)?;
        }
        Ok(())
    }
}

/// Any single block, built from a [`BlockSpec`].
#[derive(Clone, Debug, PartialEq)]
pub enum AnyBlock<T: Scalar = f32> {
    Elrf(Elrf<T>),
    Ffn(Ffn<T>),
    Mib(Mib<T>),
    Cpe(Cpe<T>),
    Conv3Post(Conv3Post<T>),
    Stem(Stem<T>),
    Downsample(Downsample<T>),
    Rgma(RgmaBlock<T>),
}

impl<T: Scalar> AnyBlock<T> {
    pub fn build<R: Rng + ?Sized>(spec: &BlockSpec, init: Init, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (c, r) = (spec.channels_in, spec.expansion_ratio);
        Ok(match spec.kind {
            BlockKind::Elrf => Self::Elrf(Elrf::new(c, r, init, rng)?),
            BlockKind::Ffn => Self::Ffn(Ffn::new(c, r, init, rng)?),
            BlockKind::Mib => Self::Mib(Mib::new(c, r, init, rng)?),
            BlockKind::Cpe => Self::Cpe(Cpe::new(c, init, rng)),
            BlockKind::Conv3Post => Self::Conv3Post(Conv3Post::new(c, init, rng)),
            BlockKind::Stem => Self::Stem(Stem::new(c, spec.channels_out, init, rng)),
            BlockKind::Downsample => {
                Self::Downsample(Downsample::new(c, spec.channels_out, init, rng))
            }
            BlockKind::RgmaBlock => Self::Rgma(RgmaBlock::new(
                c,
                GateVariant::default(),
                PostAttnKind::default(),
                r,
                init,
                rng,
            )?),
        })
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        match self {
            Self::Elrf(b) => b.forward(g, x),
            Self::Ffn(b) => b.forward(g, x),
            Self::Mib(b) => b.forward(g, x),
            Self::Cpe(b) => b.forward(g, x),
            Self::Conv3Post(b) => b.forward(g, x),
            Self::Stem(b) => b.forward(g, x),
            Self::Downsample(b) => b.forward(g, x),
            Self::Rgma(b) => b.forward(g, x),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(&mut Eager::new(), x)
    }
}

impl<T: Scalar> Module<T> for AnyBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        match self {
            Self::Elrf(b) => b.visit(prefix, f),
            Self::Ffn(b) => b.visit(prefix, f),
            Self::Mib(b) => b.visit(prefix, f),
            Self::Cpe(b) => b.visit(prefix, f),
            Self::Conv3Post(b) => b.visit(prefix, f),
            Self::Stem(b) => b.visit(prefix, f),
            Self::Downsample(b) => b.visit(prefix, f),
            Self::Rgma(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        match self {
            Self::Elrf(b) => b.visit_mut(prefix, f),
            Self::Ffn(b) => b.visit_mut(prefix, f),
            Self::Mib(b) => b.visit_mut(prefix, f),
            Self::Cpe(b) => b.visit_mut(prefix, f),
            Self::Conv3Post(b) => b.visit_mut(prefix, f),
            Self::Stem(b) => b.visit_mut(prefix, f),
            Self::Downsample(b) => b.visit_mut(prefix, f),
            Self::Rgma(b) => b.visit_mut(prefix, f),
        }
    }
}

/// Bounding box `(rows, cols)` of the positions where a shape-preserving map
/// reacts to a unit impulse at the center of channel 0 of a `c×size×size`
/// input, relative to an all-zero input. With `subtract_input`, the impulse
/// itself is removed first (the identity residual path).
pub fn impulse_extent<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    c: usize,
    size: usize,
    subtract_input: bool,
) -> Result<(usize, usize)> {
    let zero = Tensor::<T>::zeros(&[c, size, size]);
    let mut impulse = zero.clone();
    let mid = size / 2;
    impulse.data_mut()[mid * size + mid] = T::one();
    let base = f(&zero)?;
    let hit = f(&impulse)?;
    let mut delta = tensor::sub(&hit, &base)?;
    if subtract_input {
        delta = tensor::sub(&delta, &impulse)?;
    }
    let (oc, oh, ow) = delta.chw()?;
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for ch in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                if delta.data()[(ch * oh + i) * ow + j] != T::zero() {
                    r0 = r0.min(i);
                    r1 = r1.max(i);
                    c0 = c0.min(j);
                    c1 = c1.max(j);
                }
            }
        }
    }
    if r0 == usize::MAX {
        return Ok((0, 0));
    }
    Ok((r1 - r0 + 1, c1 - c0 + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[c, h, w], 1.0, &mut rng(seed))
    }

    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let (c, h, wd) = x.chw().unwrap();
        let (co, cig, k) = (w.dim(0), w.dim(1), w.dim(2));
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let cog = co / groups;
        assert_eq!(cig * groups, c);
        Tensor::from_fn(&[co, oh, ow], |idx| {
            let (o, i, j) = (idx / (oh * ow), idx / ow % oh, idx % ow);
            let g = o / cog;
            let mut acc = 0.0;
            for ci in 0..cig {
                for di in 0..k {
                    for dj in 0..k {
                        let y = (i * stride + di) as isize - pad as isize;
                        let xx = (j * stride + dj) as isize - pad as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            acc += x.at(&[g * cig + ci, y as usize, xx as usize])
                                * w.at(&[o, ci, di, dj]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn all_blocks(c: usize) -> Vec<AnyBlock<f64>> {
        let init = Init::random(0.3);
        let mut r = rng(3);
        let mut out = Vec::new();
        for kind in [
            BlockKind::Elrf,
            BlockKind::Ffn,
            BlockKind::Mib,
            BlockKind::Cpe,
            BlockKind::Conv3Post,
            BlockKind::RgmaBlock,
        ] {
            out.push(AnyBlock::build(&BlockSpec::same(kind, c, 2.0), init, &mut r).unwrap());
        }
        out
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let x = input(8, 6, 6, 1);
        for mut b in all_blocks(8) {
            b.zero_params();
            let y = b.apply(&x).unwrap();
            assert_eq!(y, x, "{b:?}");
        }
        for kind in PostAttnKind::ALL {
            let mut p =
                PostAttention::<f64>::new(kind, 8, 2.0, Init::random(0.3), &mut rng(4)).unwrap();
            p.zero_params();
            assert_eq!(p.forward(&mut Eager::new(), &x).unwrap(), x);
        }
    }

    #[test]
    fn blocks_preserve_shape_and_finiteness() {
        let x = input(8, 5, 7, 2);
        for b in all_blocks(8) {
            let y = b.apply(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.is_finite());
        }
    }

    #[test]
    fn elrf_support_is_seven_by_seven() {
        let b = Elrf::<f64>::new(4, 2.0, Init::random(0.5), &mut rng(5)).unwrap();
        let ext = impulse_extent(|x| b.forward(&mut Eager::new(), x), 4, 15, true).unwrap();
        assert_eq!(ext, (7, 7));
    }

    #[test]
    fn two_elrf_blocks_stay_within_thirteen() {
        let a = Elrf::<f64>::new(4, 2.0, Init::random(0.5), &mut rng(6)).unwrap();
        let b = Elrf::<f64>::new(4, 2.0, Init::random(0.5), &mut rng(7)).unwrap();
        let f = |x: &Tensor<f64>| {
            let mut g = Eager::new();
            let y = a.forward(&mut g, x)?;
            b.forward(&mut g, &y)
        };
        let ext = impulse_extent(f, 4, 21, true).unwrap();
        assert!(ext.0 <= 13 && ext.1 <= 13, "{ext:?}");
        assert_eq!(ext, (13, 13));
    }

    #[test]
    fn mib_support_is_three_by_three() {
        let b = Mib::<f64>::new(4, 2.0, Init::random(0.5), &mut rng(8)).unwrap();
        let ext = impulse_extent(|x| b.forward(&mut Eager::new(), x), 4, 9, true).unwrap();
        assert_eq!(ext, (3, 3));
    }

    #[test]
    fn ffn_hidden_width_and_params() {
        let f = Ffn::<f32>::new(8, 2.0, Init::default(), &mut rng(0)).unwrap();
        assert_eq!(f.hidden(), 16);
        assert_eq!(f.param_count(), 8 * 16 + 16 + 16 * 8 + 8);
        assert!(matches!(
            Ffn::<f32>::new(3, 1.5, Init::default(), &mut rng(0)),
            Err(Error::Config(_))
        ));
        assert!(Ffn::<f32>::new(4, 1.5, Init::default(), &mut rng(0)).is_ok());
    }

    #[test]
    fn mib_params_closed_form() {
        let c = 8;
        let h = 16;
        let m = Mib::<f32>::new(c, 2.0, Init::default(), &mut rng(0)).unwrap();
        assert_eq!(m.param_count(), c * h + h * 9 + h * c + (h + h + c));
    }

    #[test]
    fn conv3_is_lighter_than_ffn() {
        for c in [8, 64, 384] {
            let a = Conv3Post::<f32>::new(c, Init::default(), &mut rng(0)).param_count();
            let b = Ffn::<f32>::new(c, 2.0, Init::default(), &mut rng(0))
                .unwrap()
                .param_count();
            assert!(a < b, "{c}: {a} vs {b}");
        }
    }

    #[test]
    fn ffn_is_per_position() {
        let f = Ffn::<f64>::new(4, 2.0, Init::random(0.4), &mut rng(9)).unwrap();
        let x = input(4, 1, 6, 10);
        let perm = [3, 0, 5, 1, 4, 2];
        let permute =
            |t: &Tensor<f64>| Tensor::from_fn(&[4, 1, 6], |i| t.data()[(i / 6) * 6 + perm[i % 6]]);
        let y = f.forward(&mut Eager::new(), &x).unwrap();
        let yp = f.forward(&mut Eager::new(), &permute(&x)).unwrap();
        assert_eq!(yp, permute(&y));
    }

    #[test]
    fn cpe_matches_oracle_and_identity_kernel_doubles() {
        let mut cpe = Cpe::<f64>::new(3, Init::random(0.5), &mut rng(11));
        let x = input(3, 5, 5, 12);
        let y = cpe.forward(&mut Eager::new(), &x).unwrap();
        let mut want = naive_conv(&x, &cpe.dw.weight, 1, 1, 3);
        let b = cpe.dw.bias.clone().unwrap();
        for (i, v) in want.data_mut().iter_mut().enumerate() {
            *v += b.data()[i / 25] + x.data()[i];
        }
        assert!(y.max_rel_diff(&want).unwrap() < 1e-12);

        cpe.zero_params();
        for ch in 0..3 {
            cpe.dw.weight.data_mut()[ch * 9 + 4] = 1.0;
        }
        let y = cpe.forward(&mut Eager::new(), &x).unwrap();
        assert_eq!(y, tensor::scale(&x, 2.0));
    }

    #[test]
    fn stem_shapes_and_errors() {
        let stem = Stem::<f32>::new(3, 48, Init::default(), &mut rng(0));
        let x = Tensor::<f32>::randn(&[3, 224, 224], 1.0, &mut rng(1));
        let y = stem.forward(&mut Eager::new(), &x).unwrap();
        assert_eq!(y.shape(), &[48, 56, 56]);
        let y2 = stem.forward(&mut Eager::new(), &x).unwrap();
        assert_eq!(y, y2);
        let small = stem
            .forward(&mut Eager::new(), &Tensor::zeros(&[3, 8, 8]))
            .unwrap();
        assert_eq!(small.shape(), &[48, 2, 2]);
        assert!(matches!(
            stem.forward(&mut Eager::new(), &Tensor::zeros(&[3, 10, 8])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn downsample_matches_strided_oracle() {
        let d = Downsample::<f64>::new(64, 128, Init::random(0.1), &mut rng(2));
        let x = input(64, 28, 28, 3);
        let y = d.forward(&mut Eager::new(), &x).unwrap();
        assert_eq!(y.shape(), &[128, 14, 14]);
        // Default batch norm: scale 1/sqrt(1 + eps), shift 0.
        let s = 1.0 / (1.0 + tensor::ops::NORM_EPS).sqrt();
        let want = tensor::scale(&naive_conv(&x, &d.conv.weight, 2, 1, 1), s);
        assert!(y.max_rel_diff(&want).unwrap() < 1e-10);

        let d = Downsample::<f32>::new(8, 16, Init::default(), &mut rng(2));
        let y = d
            .forward(&mut Eager::new(), &Tensor::zeros(&[8, 2, 2]))
            .unwrap();
        assert_eq!(y.shape(), &[16, 1, 1]);
        assert!(matches!(
            d.forward(&mut Eager::new(), &Tensor::zeros(&[8, 3, 2])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = input(5, 4, 4, 0);
        for b in all_blocks(8) {
            assert!(matches!(b.apply(&x), Err(Error::Config(_))), "{b:?}");
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = BlockSpec::same(BlockKind::Elrf, 8, 2.0);
        assert!(s.validate().is_ok());
        s.stride = 2;
        assert!(s.validate().is_err());
        s.kind = BlockKind::Downsample;
        s.channels_out = 16;
        assert!(s.validate().is_ok());
        let mut c = BlockSpec::same(BlockKind::Cpe, 8, 1.0);
        c.channels_out = 4;
        assert!(c.validate().is_err());
        assert!("bogus".parse::<PostAttnKind>().is_err());
        for k in PostAttnKind::ALL {
            assert_eq!(k.as_str().parse::<PostAttnKind>().unwrap(), k);
        }
    }
}
