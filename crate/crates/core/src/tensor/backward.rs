//! Vector-Jacobian products for the kernels in [`ops`](super::ops).

use super::element::matmul;
use super::ops::{axis_split, channel_layout, linear_dims, ConvGeom, LerpAxis, Padding};
use super::{Element, Tensor};
use crate::error::Result;

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: Padding,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    dy.expect_same_shape(&Tensor::zeros([g.n, g.cout, g.ho, g.wo]), "conv2d grad")?;
    let l = g.out_len();
    let k = g.patch_len();
    let in_img = g.cin * g.h * g.w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cout];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * l] };
    let mut dcols = vec![T::zero(); if pointwise { 0 } else { k * l }];
    for n in 0..g.n {
        let img = &x.data()[n * in_img..(n + 1) * in_img];
        let gout = &dy.data()[n * g.cout * l..(n + 1) * g.cout * l];
        for (co, chunk) in gout.chunks(l).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let dimg = &mut dx[n * in_img..(n + 1) * in_img];
        if pointwise {
            matmul(g.cout, l, k, gout, false, img, true, &mut dw, true);
            matmul(k, g.cout, l, weight.data(), true, gout, false, dimg, false);
        } else {
            g.im2col(img, &mut cols);
            matmul(g.cout, l, k, gout, false, &cols, true, &mut dw, true);
            matmul(k, g.cout, l, weight.data(), true, gout, false, &mut dcols, false);
            g.col2im(&dcols, dimg);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(x.shape().to_vec(), dx)?,
        weight: Tensor::from_vec(weight.shape().to_vec(), dw)?,
        bias: Tensor::from_vec([g.cout], db)?,
    })
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (rows, in_f, out_f) = linear_dims(x.shape(), weight.shape())?;
    let mut dx = vec![T::zero(); rows * in_f];
    let mut dw = vec![T::zero(); out_f * in_f];
    matmul(rows, out_f, in_f, dy.data(), false, weight.data(), false, &mut dx, false);
    matmul(out_f, rows, in_f, dy.data(), true, x.data(), false, &mut dw, false);
    let mut db = vec![T::zero(); out_f];
    for row in dy.data().chunks(out_f) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_vec(x.shape().to_vec(), dx)?,
        weight: Tensor::from_vec(weight.shape().to_vec(), dw)?,
        bias: Tensor::from_vec([out_f], db)?,
    })
}

/// `dx = y * (dy - sum(dy * y))` along `axis`, given the softmax output `y`.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), dx)
}

pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn layer_norm_backward<T: Element>(
    xhat: &Tensor<T>,
    rstd: &[T],
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<NormGrads<T>> {
    let c = gamma.len();
    let inv_c = T::of(1.0 / c as f64);
    let mut dx = vec![T::zero(); xhat.len()];
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for (t, ((xh, g), out)) in xhat
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .zip(dx.chunks_mut(c))
        .enumerate()
    {
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for ch in 0..c {
            dg[ch] += g[ch] * xh[ch];
            db[ch] += g[ch];
            let d = g[ch] * gamma.data()[ch];
            mean_d += d;
            mean_dx += d * xh[ch];
        }
        mean_d = mean_d * inv_c;
        mean_dx = mean_dx * inv_c;
        for ch in 0..c {
            let d = g[ch] * gamma.data()[ch];
            out[ch] = rstd[t] * (d - mean_d - xh[ch] * mean_dx);
        }
    }
    Ok(NormGrads {
        input: Tensor::from_vec(xhat.shape().to_vec(), dx)?,
        gamma: Tensor::from_vec([c], dg)?,
        beta: Tensor::from_vec([c], db)?,
    })
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let plane: usize = input_shape[2..].iter().product();
    let inv = T::of(1.0 / plane as f64);
    let mut dx = Vec::with_capacity(dy.len() * plane);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_vec(input_shape.to_vec(), dx)
}

pub fn prelu_backward<T: Element>(
    x: &Tensor<T>,
    slope: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, inner) = channel_layout(x.shape())?;
    let mut dx = dy.data().to_vec();
    let mut ds = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let a = slope.data()[ch];
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let xv = x.data()[i];
                if xv < T::zero() {
                    ds[ch] += dy.data()[i] * xv;
                    dx[i] = dx[i] * a;
                }
            }
        }
    }
    Ok((Tensor::from_vec(x.shape().to_vec(), dx)?, Tensor::from_vec([c], ds)?))
}

pub fn gelu_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::of(0.5);
    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    x.zip_map(dy, |v, g| {
        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
        let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
        g * (cdf + v * pdf)
    })
}

pub fn resize_bilinear_backward<T: Element>(
    input_shape: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let [_, _, oh, ow] = dy.dims4()?;
    if (oh, ow) == (h, w) {
        return Ok(dy.clone());
    }
    let ry = LerpAxis::<T>::new(h, oh);
    let rx = LerpAxis::<T>::new(w, ow);
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (plane, gplane) in dx.chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for (oy, &(y0, y1, wy0, wy1)) in ry.taps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in rx.taps.iter().enumerate() {
                let g = gplane[oy * ow + ox];
                plane[y0 * w + x0] += g * wy0 * wx0;
                plane[y0 * w + x1] += g * wy0 * wx1;
                plane[y1 * w + x0] += g * wy1 * wx0;
                plane[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    Tensor::from_vec(input_shape.to_vec(), dx)
}

pub struct AttentionGrads<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// Backward of [`multi_head_attention`](super::ops::multi_head_attention).
///
/// `logit_scale` is the factor applied to `dS` when forming the query/key
/// gradients; for a correct gradient it equals the forward scale.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    heads: usize,
    logit_scale: T,
    dout: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let [b, l, c] = [q.shape()[0], q.shape()[1], q.shape()[2]];
    let d = c / heads;
    let (qd, kd, vd, pd, gd) = (q.data(), k.data(), v.data(), probs.data(), dout.data());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); l];
    for bi in 0..b {
        let base = bi * l * c;
        for hd in 0..heads {
            let off = hd * d;
            let p = &pd[(bi * heads + hd) * l * l..(bi * heads + hd + 1) * l * l];
            for i in 0..l {
                let gi = &gd[base + i * c + off..base + i * c + off + d];
                let row = &p[i * l..(i + 1) * l];
                // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                let mut dot = T::zero();
                for j in 0..l {
                    let vj = &vd[base + j * c + off..base + j * c + off + d];
                    let dp: T = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    ds[j] = dp;
                    dot += dp * row[j];
                    let dvj = &mut dv[base + j * c + off..base + j * c + off + d];
                    for (o, &g) in dvj.iter_mut().zip(gi) {
                        *o += row[j] * g;
                    }
                }
                for j in 0..l {
                    let s = row[j] * (ds[j] - dot) * logit_scale;
                    if s == T::zero() {
                        continue;
                    }
                    let kj = base + j * c + off;
                    let qi = base + i * c + off;
                    for t in 0..d {
                        dq[qi + t] += s * kd[kj + t];
                        dk[kj + t] += s * qd[qi + t];
                    }
                }
            }
        }
    }
    Ok(AttentionGrads {
        q: Tensor::from_vec(q.shape().to_vec(), dq)?,
        k: Tensor::from_vec(k.shape().to_vec(), dk)?,
        v: Tensor::from_vec(v.shape().to_vec(), dv)?,
    })
}

/// Gradient of the mean Charbonnier penalty with respect to `pred`.
pub fn charbonnier_backward<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    eps: f64,
    dloss: T,
) -> Result<Tensor<T>> {
    let e2 = T::of(eps * eps);
    let scale = dloss / T::of(pred.len() as f64);
    pred.zip_map(target, |p, t| {
        let d = p - t;
        scale * d / (d * d + e2).sqrt()
    })
}
