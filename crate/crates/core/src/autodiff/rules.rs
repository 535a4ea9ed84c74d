//! Backward rules: given the output gradient of a node, produce one gradient
//! per input, each shaped like that input's value.

use super::{Node, Op, Tape};
use crate::attention;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{self, axis_split, conv_geometry, pool_window, Tensor};

pub(super) fn backward<T: Scalar>(
    tape: &Tape<T>,
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let input = |i: usize| tape.value(node.inputs[i]);
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), g.map(|v| -v)],
        Op::Mul => vec![tensor::mul(g, input(1))?, tensor::mul(g, input(0))?],
        Op::Scale(s) => vec![tensor::scale(g, *s)],
        Op::MatMul => {
            let (a, b) = (input(0), input(1));
            vec![
                tensor::matmul(g, &b.transpose_2d()?)?,
                tensor::matmul(&a.transpose_2d()?, g)?,
            ]
        }
        Op::Transpose => vec![g.transpose_2d()?],
        Op::Reshape => vec![g.reshape(input(0).shape())?],
        Op::FlattenSpatial => {
            let (_, h, w) = input(0).chw()?;
            vec![g.unflatten_spatial(h, w)?]
        }
        Op::UnflattenSpatial => vec![g.flatten_spatial()?],
        Op::Conv2d(spec) => {
            let bias = node.inputs.get(2).map(|&b| tape.value(b));
            conv2d_backward(input(0), input(1), bias, *spec, g)?
        }
        Op::Relu => vec![input(0).zip_map(g, |x, gv| if x > T::zero() { gv } else { T::zero() })?],
        Op::Sigmoid => vec![out.zip_map(g, |s, gv| gv * s * (T::one() - s))?],
        Op::Gelu => vec![input(0).zip_map(g, |x, gv| gv * tensor::gelu_grad_scalar(x))?],
        Op::SoftmaxRows => {
            let (_, n) = out.rows_cols()?;
            let mut dx = Vec::with_capacity(out.len());
            for (y, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                let dot = y
                    .iter()
                    .zip(gr)
                    .fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                dx.extend(y.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
            }
            vec![Tensor::new(out.shape(), dx)?]
        }
        Op::LayerNorm { axis, inv_std } => vec![layer_norm_backward(out, inv_std, *axis, g)?],
        Op::ChannelAffine => channel_affine_backward(input(0), input(1), g)?,
        Op::BatchNorm => batch_norm_backward(input(0), input(1), input(3), input(4), g)?,
        Op::AdaptiveAvgPool => vec![adaptive_pool_backward(input(0), g)?],
        Op::UpsampleNearest(f) => vec![upsample_backward(input(0), *f, g)?],
        Op::AddRowBias => {
            let (_, p) = g.rows_cols()?;
            let mut db = vec![T::zero(); p];
            for row in g.data().chunks(p) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            vec![g.clone(), Tensor::new(input(1).shape(), db)?]
        }
        Op::MeanRows => {
            let (n, d) = input(0).rows_cols()?;
            let inv = T::one() / T::lit(n as f64);
            let row = g.data();
            vec![Tensor::from_fn(&[n, d], |i| row[i % d] * inv)]
        }
        Op::Sum => {
            let s = g.data()[0];
            vec![Tensor::full(input(0).shape(), s)]
        }
        Op::ReluLinearAttention(eps) => {
            let (dq, dk, dv) =
                attention::relu_linear_attention_backward(input(0), input(1), input(2), *eps, g)?;
            vec![dq, dk, dv]
        }
        Op::CosineLoss => cosine_loss_backward(input(0), input(1), g.data()[0])?,
    })
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: tensor::Conv2dSpec,
    g: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let geo = conv_geometry(x, w, bias, spec)?;
    let (cin_g, cout_g, k) = (geo.cin_per_group(), geo.cout_per_group(), geo.k);
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wd.len()];
    for co in 0..geo.c_out {
        let grp = co / cout_g;
        let g_plane = &gd[co * geo.oh * geo.ow..(co + 1) * geo.oh * geo.ow];
        for cl in 0..cin_g {
            let ci = grp * cin_g + cl;
            for kh in 0..k {
                for kw in 0..k {
                    let widx = ((co * cin_g + cl) * k + kh) * k + kw;
                    let wv = wd[widx];
                    let mut acc = T::zero();
                    for oh in 0..geo.oh {
                        let ih = oh as isize * s + kh as isize - p;
                        if ih < 0 || ih >= geo.h as isize {
                            continue;
                        }
                        for ow in 0..geo.ow {
                            let iw = ow as isize * s + kw as isize - p;
                            if iw < 0 || iw >= geo.w as isize {
                                continue;
                            }
                            let xi = (ci * geo.h + ih as usize) * geo.w + iw as usize;
                            let gv = g_plane[oh * geo.ow + ow];
                            acc = acc + xd[xi] * gv;
                            dx[xi] = dx[xi] + wv * gv;
                        }
                    }
                    dw[widx] = dw[widx] + acc;
                }
            }
        }
    }
    let mut grads = vec![Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?];
    if bias.is_some() {
        let plane = geo.oh * geo.ow;
        grads.push(Tensor::from_fn(&[geo.c_out], |c| {
            gd[c * plane..(c + 1) * plane]
                .iter()
                .fold(T::zero(), |a, &v| a + v)
        }));
    }
    Ok(grads)
}

fn layer_norm_backward<T: Scalar>(
    y: &Tensor<T>,
    inv_std: &[T],
    axis: usize,
    g: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); yd.len()];
    let n = T::lit(len as f64);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let r = inv_std[o * inner + i];
            let (mut mg, mut mgy) = (T::zero(), T::zero());
            for j in 0..len {
                mg = mg + gd[idx(j)];
                mgy = mgy + gd[idx(j)] * yd[idx(j)];
            }
            mg = mg / n;
            mgy = mgy / n;
            for j in 0..len {
                dx[idx(j)] = r * (gd[idx(j)] - mg - yd[idx(j)] * mgy);
            }
        }
    }
    Tensor::new(y.shape(), dx)
}

fn channel_affine_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let mut dx = g.clone();
    let mut ds = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for ch in 0..c {
        let a = scale.data()[ch];
        let xs = &x.data()[ch * plane..(ch + 1) * plane];
        let gs = &g.data()[ch * plane..(ch + 1) * plane];
        for ((d, &xv), &gv) in dx.data_mut()[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .zip(xs)
            .zip(gs)
        {
            *d = gv * a;
            ds[ch] = ds[ch] + gv * xv;
            db[ch] = db[ch] + gv;
        }
    }
    Ok(vec![dx, Tensor::new(&[c], ds)?, Tensor::new(&[c], db)?])
}

fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let eps = T::lit(tensor::NORM_EPS);
    let mut dx = g.clone();
    let (mut dg, mut db, mut dm, mut dv) = (
        vec![T::zero(); c],
        vec![T::zero(); c],
        vec![T::zero(); c],
        vec![T::zero(); c],
    );
    for ch in 0..c {
        let r = T::one() / (var.data()[ch] + eps).sqrt();
        let (gm, mu) = (gamma.data()[ch], mean.data()[ch]);
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for i in ch * plane..(ch + 1) * plane {
            let gv = g.data()[i];
            let xc = x.data()[i] - mu;
            dx.data_mut()[i] = gv * r * gm;
            sg = sg + gv;
            sgx = sgx + gv * xc;
        }
        dg[ch] = sgx * r;
        db[ch] = sg;
        dm[ch] = -sg * r * gm;
        dv[ch] = sgx * gm * T::lit(-0.5) * r * r * r;
    }
    Ok(vec![
        dx,
        Tensor::new(&[c], dg)?,
        Tensor::new(&[c], db)?,
        Tensor::new(&[c], dm)?,
        Tensor::new(&[c], dv)?,
    ])
}

fn adaptive_pool_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let (_, oh, ow) = g.chw()?;
    let mut dx = vec![T::zero(); x.len()];
    for ch in 0..c {
        for i in 0..oh {
            let (r0, r1) = pool_window(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = pool_window(j, w, ow);
                let share =
                    g.data()[(ch * oh + i) * ow + j] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    for col in c0..c1 {
                        dx[(ch * h + r) * w + col] = dx[(ch * h + r) * w + col] + share;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), dx)
}

fn upsample_backward<T: Scalar>(x: &Tensor<T>, f: usize, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![T::zero(); x.len()];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let d = &mut dx[(ch * h + i / f) * w + j / f];
                *d = *d + g.data()[(ch * oh + i) * ow + j];
            }
        }
    }
    Tensor::new(x.shape(), dx)
}

/// Gradient of `mean_i (1 − <a_i, b_i> / (max(|a_i|, eps)·max(|b_i|, eps)))`.
fn cosine_loss_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: T) -> Result<Vec<Tensor<T>>> {
    let (n, d) = a.rows_cols()?;
    let eps = T::lit(tensor::COSINE_EPS);
    let scale = -g / T::lit(n as f64);
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    for i in 0..n {
        let ra = &a.data()[i * d..(i + 1) * d];
        let rb = &b.data()[i * d..(i + 1) * d];
        let (mut ab, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
        for (&x, &y) in ra.iter().zip(rb) {
            ab = ab + x * y;
            aa = aa + x * x;
            bb = bb + y * y;
        }
        let (na, nb) = (aa.sqrt(), bb.sqrt());
        let (fa, fb) = (na.max(eps), nb.max(eps));
        let cos = ab / (fa * fb);
        // d cos / d a = b/(fa fb) − cos·a/na²  (second term only when the norm is unfloored)
        let ka = if na > eps { cos / (na * na) } else { T::zero() };
        let kb = if nb > eps { cos / (nb * nb) } else { T::zero() };
        for j in 0..d {
            da[i * d + j] = scale * (rb[j] / (fa * fb) - ka * ra[j]);
            db[i * d + j] = scale * (ra[j] / (fa * fb) - kb * rb[j]);
        }
    }
    Ok(vec![
        Tensor::new(a.shape(), da)?,
        Tensor::new(b.shape(), db)?,
    ])
}
