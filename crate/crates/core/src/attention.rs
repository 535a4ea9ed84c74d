//! Softmax attention, ReLU linear attention, the convolutional sigmoid gate,
//! and the gated block that combines them.
//!
//! Token matrices are `N×d` (one row per spatial position). The linear
//! kernel never forms an `N×N` matrix: it reduces keys and values into a
//! `d×d` summary plus a `d`-vector first and then makes one pass over the
//! queries, so both time and memory are linear in `N`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Eager, Ops};
use crate::scalar::Scalar;
use crate::tensor::{self, Conv2dSpec, Tensor};

/// Default floor on the linear-attention denominator.
pub const DEFAULT_EPS: f64 = 1e-6;

fn check_qkv<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (n, d) = q.rows_cols()?;
    let (nk, dk) = k.rows_cols()?;
    let (nv, e) = v.rows_cols()?;
    if n != nk || n != nv || d != dk {
        return dim_err(format!(
            "attention shapes disagree: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok((n, d, e))
}

/// `softmax(Q·Kᵀ/sqrt(d))·V`. Materializes the full `N×N` weight matrix.
pub fn softmax_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let weights = softmax_attention_weights(q, k, v)?;
    tensor::matmul(&weights, v)
}

/// The row-stochastic `N×N` matrix used by [`softmax_attention`].
pub fn softmax_attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, d, _) = check_qkv(q, k, v)?;
    let mut scores = tensor::matmul(q, &k.transpose_2d()?)?;
    let s = T::one() / T::lit(d as f64).sqrt();
    for x in scores.data_mut() {
        *x = *x * s;
    }
    tensor::softmax_rows_in_place(&mut scores)?;
    Ok(scores)
}

#[inline]
fn pos<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Key/value reduction shared by the forward and backward passes:
/// `S = ReLU(K)ᵀV` (`d×e`) and `z = ReLU(K)ᵀ1` (`d`).
fn kv_summary<T: Scalar>(k: &[T], v: &[T], n: usize, d: usize, e: usize) -> (Vec<T>, Vec<T>) {
    let mut s = vec![T::zero(); d * e];
    let mut z = vec![T::zero(); d];
    for j in 0..n {
        let vj = &v[j * e..(j + 1) * e];
        for a in 0..d {
            let ka = pos(k[j * d + a]);
            if ka == T::zero() {
                continue;
            }
            z[a] = z[a] + ka;
            for (sv, &vv) in s[a * e..(a + 1) * e].iter_mut().zip(vj) {
                *sv = *sv + ka * vv;
            }
        }
    }
    (s, z)
}

/// Allowance for tensor headers (shape vectors) on top of the data buffers.
pub const HEADER_SLACK_BYTES: usize = 256;

/// Scratch bytes [`relu_linear_attention`] may allocate for an `N×d` query
/// and `N×e` values: the output, the `d×e` summary and the key sums. Linear
/// in `N`.
pub fn linear_scratch_bytes(n: usize, d: usize, e: usize, scalar_bytes: usize) -> usize {
    (n * e + d * e + d) * scalar_bytes + HEADER_SLACK_BYTES
}

/// `ReLU(Q)(ReLU(K)ᵀV) / max(ReLU(Q)(ReLU(K)ᵀ1), eps)`, row by row.
///
/// Allocates only the output, the `d×e` summary, and the `d`-vector of key
/// sums.
pub fn relu_linear_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, d, e) = check_qkv(q, k, v)?;
    let (s, z) = kv_summary(k.data(), v.data(), n, d, e);
    let mut out = vec![T::zero(); n * e];
    for (i, row) in out.chunks_mut(e).enumerate() {
        let qi = &q.data()[i * d..(i + 1) * d];
        let mut den = T::zero();
        for (a, &qa) in qi.iter().enumerate() {
            let fa = pos(qa);
            if fa == T::zero() {
                continue;
            }
            den = den + fa * z[a];
            for (o, &sv) in row.iter_mut().zip(&s[a * e..(a + 1) * e]) {
                *o = *o + fa * sv;
            }
        }
        let inv = T::one() / den.max(eps);
        for o in row.iter_mut() {
            *o = *o * inv;
        }
    }
    Tensor::new(&[n, e], out)
}

/// Gradients of [`relu_linear_attention`] with respect to `(Q, K, V)`.
/// Runs in the same factored order, `O(N·d·e)` time and `O(N·(d + e))` memory.
pub(crate) fn relu_linear_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    eps: T,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d, e) = check_qkv(q, k, v)?;
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let (s, z) = kv_summary(kd, vd, n, d, e);

    let mut dq = vec![T::zero(); n * d];
    let mut g_s = vec![T::zero(); d * e];
    let mut g_z = vec![T::zero(); d];
    let mut num = vec![T::zero(); e];
    let mut g_num = vec![T::zero(); e];
    for i in 0..n {
        let qi = &qd[i * d..(i + 1) * d];
        let gi = &gd[i * e..(i + 1) * e];
        num.fill(T::zero());
        let mut den = T::zero();
        for (a, &qa) in qi.iter().enumerate() {
            let fa = pos(qa);
            den = den + fa * z[a];
            for (nv, &sv) in num.iter_mut().zip(&s[a * e..(a + 1) * e]) {
                *nv = *nv + fa * sv;
            }
        }
        let floored = den.max(eps);
        let mut g_d = T::zero();
        for c in 0..e {
            g_num[c] = gi[c] / floored;
            g_d = g_d - gi[c] * num[c] / (floored * floored);
        }
        let g_den = if den > eps { g_d } else { T::zero() };
        for (a, &qa) in qi.iter().enumerate() {
            let fa = pos(qa);
            if qa > T::zero() {
                let srow = &s[a * e..(a + 1) * e];
                let dot = srow
                    .iter()
                    .zip(&g_num)
                    .fold(T::zero(), |acc, (&sv, &gv)| acc + sv * gv);
                dq[i * d + a] = dot + g_den * z[a];
            }
            if fa != T::zero() {
                for (gs, &gv) in g_s[a * e..(a + 1) * e].iter_mut().zip(&g_num) {
                    *gs = *gs + fa * gv;
                }
                g_z[a] = g_z[a] + fa * g_den;
            }
        }
    }

    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * e];
    for j in 0..n {
        let vj = &vd[j * e..(j + 1) * e];
        let dvj = &mut dv[j * e..(j + 1) * e];
        for a in 0..d {
            let ka = kd[j * d + a];
            if ka <= T::zero() {
                continue;
            }
            let gsrow = &g_s[a * e..(a + 1) * e];
            let dot = gsrow
                .iter()
                .zip(vj)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            dk[j * d + a] = dot + g_z[a];
            for (o, &gs) in dvj.iter_mut().zip(gsrow) {
                *o = *o + ka * gs;
            }
        }
    }
    Ok((
        Tensor::new(&[n, d], dq)?,
        Tensor::new(&[n, d], dk)?,
        Tensor::new(&[n, e], dv)?,
    ))
}

/// Quadratic references built only from tensor primitives.
pub mod reference {
    use super::*;

    /// Unfactored ReLU attention: forms `A = ReLU(Q)·ReLU(K)ᵀ` explicitly and
    /// normalizes its rows.
    pub fn naive_relu_linear_attention<T: Scalar>(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        check_qkv(q, k, v)?;
        let a = tensor::matmul(&tensor::relu(q), &tensor::relu(k).transpose_2d()?)?;
        let (n, _) = a.rows_cols()?;
        let av = tensor::matmul(&a, v)?;
        let (_, e) = av.rows_cols()?;
        let mut out = av.into_data();
        for i in 0..n {
            let r: T = a.data()[i * n..(i + 1) * n].iter().copied().sum();
            let den = r.max(eps);
            for o in &mut out[i * e..(i + 1) * e] {
                *o = *o / den;
            }
        }
        Tensor::new(&[n, e], out)
    }
}

/// Gating applied around the linear-attention context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum GateVariant {
    /// Plain linear attention.
    NoGate,
    /// Gate multiplies the context; values are projected from the raw input.
    GateDecoupled,
    /// Gate multiplies the context and also the value-path input.
    #[default]
    GateFull,
}

impl GateVariant {
    pub const ALL: [GateVariant; 3] = [Self::NoGate, Self::GateDecoupled, Self::GateFull];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoGate => "none",
            Self::GateDecoupled => "decoupled",
            Self::GateFull => "full",
        }
    }
}

impl fmt::Display for GateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "nogate" | "no_gate" => Ok(Self::NoGate),
            "decoupled" | "gate*" | "gatedecoupled" => Ok(Self::GateDecoupled),
            "full" | "gate" | "gatefull" => Ok(Self::GateFull),
            _ => config_err(format!(
                "unknown gate variant `{s}` (expected none, decoupled, full)"
            )),
        }
    }
}

/// Weights of one gated attention unit over `d` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Scalar = f32> {
    /// `d×d×1×1` pointwise projections.
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// `d×1×3×3` depthwise gate kernel and its `d` biases.
    pub gate_w: Tensor<T>,
    pub gate_b: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d, 1, 1]),
            wk: Tensor::zeros(&[d, d, 1, 1]),
            wv: Tensor::zeros(&[d, d, 1, 1]),
            gate_w: Tensor::zeros(&[d, 1, 3, 3]),
            gate_b: Tensor::zeros(&[d]),
            eps: T::lit(DEFAULT_EPS),
        }
    }

    /// Identity projections, zero gate.
    pub fn identity(d: usize) -> Self {
        let eye = Tensor::eye(d)
            .reshape(&[d, d, 1, 1])
            .expect("square identity");
        Self {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye,
            ..Self::zeros(d)
        }
    }

    /// Independent normal draws with the given standard deviation.
    pub fn random<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        Self {
            wq: Tensor::randn(&[d, d, 1, 1], std, rng),
            wk: Tensor::randn(&[d, d, 1, 1], std, rng),
            wv: Tensor::randn(&[d, d, 1, 1], std, rng),
            gate_w: Tensor::randn(&[d, 1, 3, 3], std, rng),
            gate_b: Tensor::randn(&[d], std, rng),
            eps: T::lit(DEFAULT_EPS),
        }
    }

    pub fn dim(&self) -> usize {
        self.gate_b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, t) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if t.shape() != [d, d, 1, 1] {
                return config_err(format!(
                    "{name} has shape {:?}, expected [{d}, {d}, 1, 1]",
                    t.shape()
                ));
            }
        }
        if self.gate_w.shape() != [d, 1, 3, 3] {
            return config_err(format!(
                "gate weight has shape {:?}, expected [{d}, 1, 3, 3]",
                self.gate_w.shape()
            ));
        }
        if self.eps.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return config_err("attention epsilon must be positive");
        }
        Ok(())
    }
}

/// `sigmoid(DWConv3×3(x) + bias)`.
pub fn conv_gate<T: Scalar>(
    x: &Tensor<T>,
    gate_w: &Tensor<T>,
    gate_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    conv_gate_in(&mut Eager::new(), x, gate_w, gate_b)
}

pub fn conv_gate_in<T: Scalar, G: Ops<T>>(
    g: &mut G,
    x: &G::Var,
    gate_w: &Tensor<T>,
    gate_b: &Tensor<T>,
) -> Result<G::Var> {
    let c = g.value(x).chw()?.0;
    let pre = g.conv2d(x, gate_w, Some(gate_b), Conv2dSpec::depthwise(c, 3))?;
    Ok(g.sigmoid(&pre))
}

/// Gated linear attention over a `C×H×W` map; output has the input's shape.
pub fn rgma_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    variant: GateVariant,
) -> Result<Tensor<T>> {
    rgma_in(&mut Eager::new(), x, params, variant)
}

pub fn rgma_in<T: Scalar, G: Ops<T>>(
    g: &mut G,
    x: &G::Var,
    params: &AttentionParams<T>,
    variant: GateVariant,
) -> Result<G::Var> {
    let (c, h, w) = g.value(x).chw()?;
    if c != params.dim() {
        return config_err(format!(
            "input has {c} channels but attention weights expect {}",
            params.dim()
        ));
    }
    params.validate()?;
    let pw = Conv2dSpec::pointwise();
    let gate = match variant {
        GateVariant::NoGate => None,
        _ => Some(conv_gate_in(g, x, &params.gate_w, &params.gate_b)?),
    };
    let q = g.conv2d(x, &params.wq, None, pw)?;
    let k = g.conv2d(x, &params.wk, None, pw)?;
    let v = match (&gate, variant) {
        (Some(gt), GateVariant::GateFull) => {
            let gated = g.mul(gt, x)?;
            g.conv2d(&gated, &params.wv, None, pw)?
        }
        _ => g.conv2d(x, &params.wv, None, pw)?,
    };
    let q = g.flatten_spatial(&q)?;
    let k = g.flatten_spatial(&k)?;
    let v = g.flatten_spatial(&v)?;
    let ctx = g.relu_linear_attention(&q, &k, &v, params.eps)?;
    let ctx = g.unflatten_spatial(&ctx, h, w)?;
    match gate {
        Some(gt) => g.mul(&gt, &ctx),
        None => Ok(ctx),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn softmax_attention_single_token_returns_value() {
        let mut r = rng(1);
        let q = Tensor::<f64>::randn(&[1, 4], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[1, 4], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[1, 4], 1.0, &mut r);
        let out = softmax_attention(&q, &k, &v).unwrap();
        assert!(out.max_rel_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_attention_zero_query_averages_values() {
        let mut r = rng(2);
        let q = Tensor::<f64>::zeros(&[5, 3]);
        let k = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
        let out = softmax_attention(&q, &k, &v).unwrap();
        for c in 0..3 {
            let mean = (0..5).map(|j| v.at(&[j, c])).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.at(&[i, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_attention_rows_are_stochastic() {
        let mut r = rng(3);
        let q = Tensor::<f64>::randn(&[6, 4], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[6, 4], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[6, 4], 1.0, &mut r);
        let w = softmax_attention_weights(&q, &k, &v).unwrap();
        for row in w.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_attention_matches_naive_form() {
        let mut r = rng(4);
        let q = Tensor::<f64>::randn(&[16, 8], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[16, 8], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[16, 8], 1.0, &mut r);
        let fast = relu_linear_attention(&q, &k, &v, 1e-6).unwrap();
        let slow = reference::naive_relu_linear_attention(&q, &k, &v, 1e-6).unwrap();
        assert!(fast.max_rel_diff(&slow).unwrap() < 1e-5);
    }

    #[test]
    fn negative_queries_give_exact_zero() {
        let mut r = rng(5);
        let q = Tensor::<f32>::uniform(&[7, 3], -2.0, -0.1, &mut r);
        let k = Tensor::<f32>::randn(&[7, 3], 1.0, &mut r);
        let v = Tensor::<f32>::randn(&[7, 3], 1.0, &mut r);
        let out = relu_linear_attention(&q, &k, &v, 1e-6).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_positive_token_returns_value() {
        let mut r = rng(6);
        let q = Tensor::<f64>::uniform(&[1, 5], 0.1, 1.0, &mut r);
        let k = Tensor::<f64>::uniform(&[1, 5], 0.1, 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[1, 5], 1.0, &mut r);
        let out = relu_linear_attention(&q, &k, &v, 1e-6).unwrap();
        assert!(out.max_rel_diff(&v).unwrap() < 1e-12);
    }

    #[test]
    fn attention_shape_mismatch_is_rejected() {
        let q = Tensor::<f32>::zeros(&[4, 3]);
        let k = Tensor::<f32>::zeros(&[5, 3]);
        let v = Tensor::<f32>::zeros(&[4, 3]);
        assert!(matches!(
            relu_linear_attention(&q, &k, &v, 1e-6),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            softmax_attention(&q, &k, &v),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gate_range_and_saturation() {
        let mut r = rng(7);
        let x = Tensor::<f64>::randn(&[3, 5, 5], 1.0, &mut r);
        let zero_w = Tensor::zeros(&[3, 1, 3, 3]);
        let half = conv_gate(&x, &zero_w, &Tensor::zeros(&[3])).unwrap();
        assert!(half.data().iter().all(|&g| g == 0.5));
        let sat = conv_gate(&x, &zero_w, &Tensor::full(&[3], 20.0)).unwrap();
        assert!(sat.data().iter().all(|&g| g >= 1.0 - 1e-8));
        let w = Tensor::randn(&[3, 1, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let gt = conv_gate(&x, &w, &b).unwrap();
        assert!(gt.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn identity_projections_on_constant_map_return_values() {
        let x = Tensor::<f64>::from_fn(&[4, 3, 3], |i| 0.5 + (i / 9) as f64);
        let p = AttentionParams::identity(4);
        let out = rgma_forward(&x, &p, GateVariant::NoGate).unwrap();
        assert!(out.max_rel_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn zero_gate_halves_ungated_output() {
        let mut r = rng(8);
        let x = Tensor::<f64>::randn(&[4, 5, 5], 1.0, &mut r);
        let mut p = AttentionParams::random(4, 0.5, &mut r);
        p.gate_w = Tensor::zeros(&[4, 1, 3, 3]);
        p.gate_b = Tensor::zeros(&[4]);
        let plain = rgma_forward(&x, &p, GateVariant::NoGate).unwrap();
        let gated = rgma_forward(&x, &p, GateVariant::GateDecoupled).unwrap();
        let half = tensor::scale(&plain, 0.5);
        assert!(gated.max_rel_diff(&half).unwrap() < 1e-15);
    }

    #[test]
    fn variants_differ_and_preserve_shape() {
        let mut r = rng(9);
        let x = Tensor::<f32>::randn(&[8, 6, 6], 1.0, &mut r);
        let p = AttentionParams::random(8, 0.5, &mut r);
        let outs: Vec<_> = GateVariant::ALL
            .iter()
            .map(|&v| rgma_forward(&x, &p, v).unwrap())
            .collect();
        for o in &outs {
            assert_eq!(o.shape(), &[8, 6, 6]);
            assert!(o.is_finite());
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let diff = tensor::sub(&outs[i], &outs[j]).unwrap().max_abs();
                assert!(diff > 1e-6, "variants {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = Tensor::<f32>::zeros(&[3, 4, 4]);
        let p = AttentionParams::zeros(5);
        assert!(matches!(
            rgma_forward(&x, &p, GateVariant::GateFull),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gate_variant_round_trips_through_strings() {
        for v in GateVariant::ALL {
            assert_eq!(v.as_str().parse::<GateVariant>().unwrap(), v);
        }
        assert!("sideways".parse::<GateVariant>().is_err());
    }
}
