use super::{gemm, Tensor};
use crate::error::{config_err, dim_err, Result};
use crate::par;
use crate::scalar::Scalar;

/// Epsilon inside the normalization square roots.
pub const NORM_EPS: f64 = 1e-6;

/// `sqrt(2/pi)` for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044715;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.rows_cols()?;
    let (k2, p) = b.rows_cols()?;
    if k != k2 {
        return dim_err(format!(
            "matmul inner dimensions disagree: {:?} × {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * p];
    gemm(m, k, p, a.data(), b.data(), &mut out);
    Tensor::new(&[m, p], out)
}

/// Stride, zero padding, and channel grouping of a 2-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Unit-stride `k×k` depthwise conv with "same" padding.
    pub const fn depthwise(channels: usize, k: usize) -> Self {
        Self::new(1, k / 2, channels)
    }

    pub const fn pointwise() -> Self {
        Self::new(1, 0, 1)
    }
}

/// Resolved geometry of one conv call.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.spec.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.spec.groups
    }
}

pub fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<ConvGeom> {
    let (c_in, h, w) = input.chw()?;
    let Conv2dSpec {
        stride,
        padding,
        groups,
    } = spec;
    if stride == 0 {
        return config_err("conv stride must be positive");
    }
    if groups == 0 || c_in % groups != 0 {
        return config_err(format!(
            "{c_in} input channels are not divisible into {groups} groups"
        ));
    }
    let [c_out, cin_g, kh, kw] = weight.shape()[..] else {
        return config_err(format!(
            "conv weight must be rank 4 (out, in/groups, k, k), got {:?}",
            weight.shape()
        ));
    };
    if kh != kw || kh % 2 == 0 {
        return config_err(format!("conv kernel must be square and odd, got {kh}×{kw}"));
    }
    if cin_g * groups != c_in {
        return config_err(format!(
            "weight expects {} input channels per group, input has {} over {groups} groups",
            cin_g,
            c_in / groups
        ));
    }
    if c_out % groups != 0 {
        return config_err(format!(
            "{c_out} output channels are not divisible into {groups} groups"
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return config_err(format!(
                "conv bias shape {:?} does not match {c_out} output channels",
                b.shape()
            ));
        }
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return config_err(format!(
            "{kh}×{kw} kernel does not fit {h}×{w} input with padding {padding}"
        ));
    }
    Ok(ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k: kh,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
        spec,
    })
}

/// Grouped 2-d cross-correlation with zero padding; `weight` is
/// `C_out × (C_in/groups) × k × k`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, spec)?;
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.c_out * plane];
    let x = input.data();
    let wt = weight.data();

    if g.k == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1 {
        gemm(g.c_out, g.c_in, plane, wt, x, &mut out);
    } else if spec.groups == g.c_in && g.c_out == g.c_in {
        par::for_each_chunk(&mut out, plane, |c, dst| {
            depthwise_plane(
                &x[c * g.h * g.w..(c + 1) * g.h * g.w],
                &wt[c * g.k * g.k..(c + 1) * g.k * g.k],
                &g,
                dst,
            );
        });
    } else {
        let cin_g = g.cin_per_group();
        let cout_g = g.cout_per_group();
        let rows = cin_g * g.k * g.k;
        let mut col = vec![T::zero(); rows * plane];
        for grp in 0..spec.groups {
            im2col(x, &g, grp * cin_g, cin_g, &mut col);
            let w_g = &wt[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let o_g = &mut out[grp * cout_g * plane..(grp + 1) * cout_g * plane];
            gemm(cout_g, rows, plane, w_g, &col, o_g);
        }
    }

    if let Some(b) = bias {
        for (dst, &bv) in out.chunks_mut(plane).zip(b.data()) {
            for v in dst {
                *v = *v + bv;
            }
        }
    }
    Tensor::new(&[g.c_out, g.oh, g.ow], out)
}

fn depthwise_plane<T: Scalar>(src: &[T], kern: &[T], g: &ConvGeom, dst: &mut [T]) {
    let s = g.spec.stride;
    let p = g.spec.padding as isize;
    for kh in 0..g.k {
        for kw in 0..g.k {
            let wv = kern[kh * g.k + kw];
            // valid output columns: 0 <= ow*s + kw - p < w
            let off = kw as isize - p;
            let ow_lo = if off >= 0 {
                0
            } else {
                ((-off) as usize).div_ceil(s)
            };
            let ow_hi = if (g.w as isize) - off <= 0 {
                0
            } else {
                (((g.w as isize - off) as usize).div_ceil(s)).min(g.ow)
            };
            if ow_lo >= ow_hi {
                continue;
            }
            for oh in 0..g.oh {
                let ih = (oh * s + kh) as isize - p;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                let row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                let out_row = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                if s == 1 {
                    let start = (ow_lo as isize + off) as usize;
                    let n = ow_hi - ow_lo;
                    for (o, &v) in out_row[ow_lo..ow_hi].iter_mut().zip(&row[start..start + n]) {
                        *o = *o + wv * v;
                    }
                } else {
                    for (ow, o) in out_row.iter_mut().enumerate().take(ow_hi).skip(ow_lo) {
                        let iw = (ow * s) as isize + off;
                        *o = *o + wv * row[iw as usize];
                    }
                }
            }
        }
    }
}

/// Unfolds channels `c0..c0+cin` into a `(cin·k·k) × (oh·ow)` patch matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, c0: usize, cin: usize, col: &mut [T]) {
    let s = g.spec.stride;
    let p = g.spec.padding as isize;
    let plane = g.oh * g.ow;
    for ci in 0..cin {
        let src = &x[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let r = (ci * g.k + kh) * g.k + kw;
                let dst = &mut col[r * plane..(r + 1) * plane];
                for oh in 0..g.oh {
                    let ih = (oh * s + kh) as isize - p;
                    for ow in 0..g.ow {
                        let iw = (ow * s + kw) as isize - p;
                        dst[oh * g.ow + ow] =
                            if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                T::zero()
                            } else {
                                src[ih as usize * g.w + iw as usize]
                            };
                    }
                }
            }
        }
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Tanh approximation: `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu_scalar<T: Scalar>(v: T) -> T {
    let u = T::lit(GELU_C) * (v + T::lit(GELU_A) * v * v * v);
    T::lit(0.5) * v * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(v: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let t = (c * (v + a * v * v * v)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * v * v)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    softmax_rows_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_rows_in_place<T: Scalar>(x: &mut Tensor<T>) -> Result<()> {
    let (_, n) = x.rows_cols()?;
    for row in x.data_mut().chunks_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    Ok(())
}

/// Window `[start, end)` of output cell `i` when `len` inputs are split into
/// `out` disjoint covering pieces.
#[inline]
pub fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

/// Averages disjoint covering windows of each channel down to `out_h×out_w`.
pub fn adaptive_avg_pool<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if out_h == 0 || out_w == 0 {
        return config_err(format!(
            "adaptive pool output must be positive, got {out_h}×{out_w}"
        ));
    }
    if out_h > h || out_w > w {
        return config_err(format!(
            "adaptive pool cannot enlarge {h}×{w} to {out_h}×{out_w}"
        ));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..out_h {
            let (r0, r1) = pool_window(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1) = pool_window(j, w, out_w);
                let mut s = T::zero();
                for r in r0..r1 {
                    for v in &plane[r * w + c0..r * w + c1] {
                        s = s + *v;
                    }
                }
                out.push(s / T::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Repeats each pixel into a `factor×factor` block.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if factor == 0 {
        return config_err("upsample factor must be positive");
    }
    let (oh, ow) = (h * factor, w * factor);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            let row = &src[ch * h * w + (i / factor) * w..ch * h * w + (i / factor + 1) * w];
            out.extend((0..ow).map(|j| row[j / factor]));
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

fn check_channel_vec<T: Scalar>(name: &str, v: &Tensor<T>, c: usize) -> Result<()> {
    if v.shape() != [c] {
        return dim_err(format!("{name} has shape {:?}, expected [{c}]", v.shape()));
    }
    Ok(())
}

/// `y = x·scale[c] + shift[c]` per channel of a `C×H×W` tensor.
pub fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    check_channel_vec("scale", scale, c)?;
    check_channel_vec("shift", shift, c)?;
    let mut out = x.clone();
    for ((plane, &a), &b) in out
        .data_mut()
        .chunks_mut(h * w)
        .zip(scale.data())
        .zip(shift.data())
    {
        for v in plane {
            *v = *v * a + b;
        }
    }
    Ok(out)
}

/// Inference-form batch norm: `(x − mean)/sqrt(var + eps)·gamma + beta`.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (scale, shift) = fold_batch_norm(gamma, beta, mean, var)?;
    channel_affine(x, &scale, &shift)
}

/// Folds batch-norm statistics into a per-channel `(scale, shift)` pair.
pub fn fold_batch_norm<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = gamma.len();
    for (n, t) in [("beta", beta), ("mean", mean), ("var", var)] {
        check_channel_vec(n, t, c)?;
    }
    if var.data().iter().any(|&v| v < T::zero()) {
        return config_err("batch-norm variance must be non-negative");
    }
    let eps = T::lit(NORM_EPS);
    let scale = gamma.zip_map(var, |g, v| g / (v + eps).sqrt())?;
    let shift = Tensor::from_fn(&[c], |i| beta.data()[i] - mean.data()[i] * scale.data()[i]);
    Ok((scale, shift))
}

/// Splits a shape around `axis` into `(outer, len, inner)` strides.
pub fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Normalizes every slice along `axis` to zero mean and unit variance.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    Ok(layer_norm_with_stats(x, axis)?.0)
}

/// Layer norm plus the per-slice `1/sqrt(var + eps)` needed by its gradient.
pub fn layer_norm_with_stats<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Vec<T>)> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let mut inv_std = Vec::with_capacity(outer * inner);
    let n = T::lit(len as f64);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mean = (0..len).fold(T::zero(), |a, j| a + src[idx(j)]) / n;
            let var = (0..len).fold(T::zero(), |a, j| {
                let d = src[idx(j)] - mean;
                a + d * d
            }) / n;
            let r = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            for j in 0..len {
                out[idx(j)] = (src[idx(j)] - mean) * r;
            }
            inv_std.push(r);
        }
    }
    Ok((Tensor::new(x.shape(), out)?, inv_std))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

/// Adds `bias[j]` to column `j` of an `M×P` matrix.
pub fn add_row_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, p) = x.rows_cols()?;
    if bias.len() != p {
        return dim_err(format!(
            "row bias of length {} does not match {p} columns",
            bias.len()
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(p) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

/// Mean over the rows of an `N×d` matrix, as a `1×d` matrix.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.rows_cols()?;
    let mut acc = vec![T::zero(); d];
    for row in x.data().chunks(d) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    let inv = T::one() / T::lit(n as f64);
    Tensor::new(&[1, d], acc.into_iter().map(|v| v * inv).collect())
}

/// Floor applied to row norms inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Mean over rows of `1 − cos(a_i, b_i)`.
pub fn cosine_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.expect_same_shape(b)?;
    let (n, d) = a.rows_cols()?;
    let eps = T::lit(COSINE_EPS);
    let mut total = T::zero();
    for (ra, rb) in a.data().chunks(d).zip(b.data().chunks(d)) {
        let (mut ab, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
        for (&x, &y) in ra.iter().zip(rb) {
            ab = ab + x * y;
            aa = aa + x * x;
            bb = bb + y * y;
        }
        let cos = ab / (aa.sqrt().max(eps) * bb.sqrt().max(eps));
        total = total + (T::one() - cos);
    }
    Ok(total / T::lit(n as f64))
}
