//! Forward kernels. All functions are pure: inputs are borrowed, outputs are
//! freshly allocated.

use super::element::matmul;
use super::{reflect_index, Element, Tensor};
use crate::error::{Error, Result};

/// Spatial padding applied on all four borders before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Zero(n) | Padding::Reflect(n) => n,
        }
    }
}

/// Index bookkeeping shared by the convolution forward and backward passes.
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    /// `rows[oh * kh + ki]` is the source row for output row `oh`, tap `ki`.
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: Padding) -> Result<Self> {
        let [n, cin, h, w] = match *x {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape(format!("conv2d input must be rank 4, got {x:?}"))),
        };
        let [cout, wcin, kh, kw] = match *weight {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape(format!("conv2d weight must be rank 4, got {weight:?}"))),
        };
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be positive"));
        }
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        let p = pad.amount();
        if h + 2 * p < kh || w + 2 * p < kw || kh == 0 || kw == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * p,
                w + 2 * p
            )));
        }
        let ho = (h + 2 * p - kh) / stride + 1;
        let wo = (w + 2 * p - kw) / stride + 1;
        let table = |out: usize, k: usize, len: usize| -> Vec<Option<usize>> {
            let mut t = Vec::with_capacity(out * k);
            for o in 0..out {
                for ki in 0..k {
                    let s = (o * stride + ki) as isize - p as isize;
                    t.push(if s >= 0 && (s as usize) < len {
                        Some(s as usize)
                    } else {
                        match pad {
                            Padding::Zero(_) => None,
                            Padding::Reflect(_) => Some(reflect_index(s, len)),
                        }
                    });
                }
            }
            t
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            rows: table(ho, kh, h),
            cols: table(wo, kw, w),
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1, stride-1, unpadded convolution needs no unfolding.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.ho == self.h && self.wo == self.w && {
            self.rows.iter().enumerate().all(|(i, r)| *r == Some(i))
                && self.cols.iter().enumerate().all(|(i, c)| *c == Some(i))
        }
    }

    /// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
    pub fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        let l = self.out_len();
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * l;
                    let dst = &mut cols[row..row + l];
                    for oh in 0..self.ho {
                        let src_r = self.rows[oh * self.kh + ki];
                        let line = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        match src_r {
                            None => line.iter_mut().for_each(|v| *v = T::zero()),
                            Some(r) => {
                                let src = &plane[r * self.w..(r + 1) * self.w];
                                for (ow, v) in line.iter_mut().enumerate() {
                                    *v = match self.cols[ow * self.kw + kj] {
                                        Some(c) => src[c],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds columns back into an image.
    pub fn col2im<T: Element>(&self, cols: &[T], img: &mut [T]) {
        let l = self.out_len();
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * l;
                    let src = &cols[row..row + l];
                    for oh in 0..self.ho {
                        let Some(r) = self.rows[oh * self.kh + ki] else { continue };
                        for ow in 0..self.wo {
                            if let Some(c) = self.cols[ow * self.kw + kj] {
                                plane[r * self.w + c] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `weight` is `[out_c, in_c, kh, kw]`; output
/// spatial size is `floor((h + 2p - kh) / stride) + 1`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(format!(
                "conv2d bias must be [{}], got {:?}",
                g.cout,
                b.shape()
            )));
        }
    }
    let l = g.out_len();
    let k = g.patch_len();
    let in_img = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * l];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * l] };
    for n in 0..g.n {
        let img = &x.data()[n * in_img..(n + 1) * in_img];
        let dst = &mut out[n * g.cout * l..(n + 1) * g.cout * l];
        let rhs: &[T] = if pointwise {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        matmul(g.cout, k, l, weight.data(), false, rhs, false, dst, false);
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(l).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_vec([g.n, g.cout, g.ho, g.wo], out)
}

/// Affine map over the last axis: `y = x W^T + b`, `weight` is `[out_f, in_f]`.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (rows, in_f, out_f) = linear_dims(x.shape(), weight.shape())?;
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(Error::shape(format!("linear bias must be [{out_f}], got {:?}", b.shape())));
        }
    }
    let mut out = vec![T::zero(); rows * out_f];
    matmul(rows, in_f, out_f, x.data(), false, weight.data(), true, &mut out, false);
    if let Some(b) = bias {
        for row in out.chunks_mut(out_f) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::from_vec(shape, out)
}

pub(crate) fn linear_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize)> {
    let [out_f, in_f] = match *w {
        [a, b] => [a, b],
        _ => return Err(Error::shape(format!("linear weight must be rank 2, got {w:?}"))),
    };
    match x.last() {
        Some(&last) if last == in_f => Ok((x.iter().product::<usize>() / in_f.max(1), in_f, out_f)),
        _ => Err(Error::shape(format!(
            "linear expects last extent {in_f}, input shape is {x:?}"
        ))),
    }
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::arg(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(src[at(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Per-token statistics produced by [`layer_norm_stats`].
pub(crate) struct NormStats<T> {
    pub normalized: Tensor<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_stats<T: Element>(x: &Tensor<T>, eps: f64) -> Result<NormStats<T>> {
    if eps <= 0.0 {
        return Err(Error::arg("layer_norm eps must be positive"));
    }
    let c = *x.shape().last().ok_or_else(|| Error::shape("layer_norm on rank-0 tensor"))?;
    if c == 0 {
        return Err(Error::shape("layer_norm over an empty axis"));
    }
    let inv_c = T::of(1.0 / c as f64);
    let eps = T::of(eps);
    let mut normalized = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / c);
    for tok in x.data().chunks(c) {
        let mean = tok.iter().copied().sum::<T>() * inv_c;
        let var = tok.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let r = T::one() / (var + eps).sqrt();
        normalized.extend(tok.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    Ok(NormStats { normalized: Tensor::from_vec(x.shape().to_vec(), normalized)?, rstd })
}

/// Layer normalization over the last axis followed by `gamma`/`beta` affine.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let stats = layer_norm_stats(x, eps)?;
    norm_affine(&stats.normalized, gamma, beta)
}

pub(crate) fn norm_affine<T: Element>(
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let c = *xhat.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm affine must be [{c}], got gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut out = xhat.data().to_vec();
    for tok in out.chunks_mut(c) {
        for ((v, &g), &b) in tok.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::from_vec(xhat.shape().to_vec(), out)
}

/// Per-channel spatial mean: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool over an empty spatial extent"));
    }
    let inv = T::of(1.0 / (h * w) as f64);
    let data = x.data().chunks(h * w).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

/// Channel count and spatial size of a tensor with channels on axis 1.
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("expected a channel axis, got shape {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Parametric ReLU with one slope per channel (axis 1).
pub fn prelu<T: Element>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, inner) = channel_layout(x.shape())?;
    if slope.shape() != [c] {
        return Err(Error::shape(format!("prelu slope must be [{c}], got {:?}", slope.shape())));
    }
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let a = slope.data()[ch];
            let base = (b * c + ch) * inner;
            for v in &mut out[base..base + inner] {
                if *v < T::zero() {
                    *v = *v * a;
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()))
}

/// Depth-to-space: `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`, with
/// `out[n, c, h*r + i, w*r + j] = in[n, c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cr2, h, w] = x.dims4()?;
    if r == 0 || cr2 % (r * r) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {cr2} channels not divisible by {r}^2"
        )));
    }
    let c = cr2 / (r * r);
    let mut out = vec![T::zero(); x.len()];
    let (ho, wo) = (h * r, w * r);
    let src = x.data();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let sc = ch * r * r + i * r + j;
                    for y in 0..h {
                        let srow = ((b * cr2 + sc) * h + y) * w;
                        let drow = ((b * c + ch) * ho + y * r + i) * wo;
                        for xw in 0..w {
                            out[drow + xw * r + j] = src[srow + xw];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, c, ho, wo], out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, ho, wo] = x.dims4()?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle: spatial {ho}x{wo} not divisible by {r}"
        )));
    }
    let (h, w) = (ho / r, wo / r);
    let cr2 = c * r * r;
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dc = ch * r * r + i * r + j;
                    for y in 0..h {
                        let drow = ((b * cr2 + dc) * h + y) * w;
                        let srow = ((b * c + ch) * ho + y * r + i) * wo;
                        for xw in 0..w {
                            out[drow + xw] = src[srow + xw * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, cr2, h, w], out)
}

/// One axis of a bilinear resampling: for each output index the two source
/// taps and their weights.
pub(crate) struct LerpAxis<T> {
    pub taps: Vec<(usize, usize, T, T)>,
}

impl<T: Element> LerpAxis<T> {
    /// Half-pixel centers: `src = (dst + 0.5) * in/out - 0.5`, clamped at 0.
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let frac = src - i0 as f64;
                (i0, i1, T::of(1.0 - frac), T::of(frac))
            })
            .collect();
        Self { taps }
    }
}

/// Bilinear resize of the two trailing spatial axes with half-pixel centers
/// (`align_corners = false`, no antialiasing).
pub fn resize_bilinear<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "resize_bilinear: cannot resize {h}x{w} to {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ry = LerpAxis::<T>::new(h, out_h);
    let rx = LerpAxis::<T>::new(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, wy0, wy1) in &ry.taps {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, wx0, wx1) in &rx.taps {
                let top = r0[x0] * wx0 + r0[x1] * wx1;
                let bot = r1[x0] * wx0 + r1[x1] * wx1;
                out.push(top * wy0 + bot * wy1);
            }
        }
    }
    Tensor::from_vec([n, c, out_h, out_w], out)
}

/// `[N, C, H, W] -> [N, H*W, C]`.
pub fn to_tokens<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let l = h * w;
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for b in 0..n {
        for ch in 0..c {
            let s = &src[(b * c + ch) * l..(b * c + ch + 1) * l];
            for (t, &v) in s.iter().enumerate() {
                out[(b * l + t) * c + ch] = v;
            }
        }
    }
    Tensor::from_vec([n, l, c], out)
}

/// `[N, H*W, C] -> [N, C, H, W]`.
pub fn from_tokens<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, l, c] = match x.shape() {
        &[a, b, c] => [a, b, c],
        s => return Err(Error::shape(format!("token tensor must be rank 3, got {s:?}"))),
    };
    if l != h * w {
        return Err(Error::shape(format!("{l} tokens cannot form a {h}x{w} map")));
    }
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for b in 0..n {
        for t in 0..l {
            for ch in 0..c {
                out[(b * c + ch) * l + t] = src[(b * l + t) * c + ch];
            }
        }
    }
    Tensor::from_vec([n, c, h, w], out)
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::arg("concat of zero tensors"))?;
    let [n, _, h, w] = first.dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat: {:?} does not match {:?}",
                p.shape(),
                first.shape()
            )));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (p, &pc) in parts.iter().zip(&channels) {
            out.extend_from_slice(&p.data()[b * pc * plane..(b + 1) * pc * plane]);
        }
    }
    Tensor::from_vec([n, total, h, w], out)
}

/// Reflect-pads the bottom and right borders of `[N, C, H, W]`.
pub fn reflect_pad_end<T: Element>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if pad_h == 0 && pad_w == 0 {
        return Ok(x.clone());
    }
    let (hp, wp) = (h + pad_h, w + pad_w);
    let mut out = Vec::with_capacity(n * c * hp * wp);
    for plane in x.data().chunks(h * w) {
        for y in 0..hp {
            let sy = reflect_index(y as isize, h);
            for xx in 0..wp {
                out.push(plane[sy * w + reflect_index(xx as isize, w)]);
            }
        }
    }
    Tensor::from_vec([n, c, hp, wp], out)
}

/// Keeps the top-left `h x w` window of every plane.
pub fn crop<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, hx, wx] = x.dims4()?;
    if h > hx || w > wx {
        return Err(Error::shape(format!("cannot crop {hx}x{wx} to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(hx * wx) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * wx..y * wx + w]);
        }
    }
    Tensor::from_vec([n, c, h, w], out)
}

/// Multi-head scaled dot-product attention over `[B, L, C]` tokens.
///
/// Heads split the channel axis into `heads` contiguous groups of
/// `C / heads`. Returns the attended values and the attention
/// probabilities `[B, heads, L, L]`.
pub fn multi_head_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    scale: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, l, c] = match q.shape() {
        &[a, b, c] => [a, b, c],
        s => return Err(Error::shape(format!("attention tokens must be rank 3, got {s:?}"))),
    };
    q.expect_same_shape(k, "attention q/k")?;
    q.expect_same_shape(v, "attention q/v")?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!("{c} channels not divisible into {heads} heads")));
    }
    let d = c / heads;
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); b * heads * l * l];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for bi in 0..b {
        let base = bi * l * c;
        for hd in 0..heads {
            let off = hd * d;
            let p = &mut probs[(bi * heads + hd) * l * l..(bi * heads + hd + 1) * l * l];
            for i in 0..l {
                let qi = &qd[base + i * c + off..base + i * c + off + d];
                let row = &mut p[i * l..(i + 1) * l];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kd[base + j * c + off..base + j * c + off + d];
                    let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s = *s / total;
                }
                let oi = &mut out[base + i * c + off..base + i * c + off + d];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vd[base + j * c + off..base + j * c + off + d];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(q.shape().to_vec(), out)?, Tensor::from_vec([b, heads, l, l], probs)?))
}

/// Mean of `sqrt((pred - target)^2 + eps^2)` over all elements. Summed as
/// excess over `eps` so identical inputs give exactly `eps`.
pub fn charbonnier<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<T> {
    pred.expect_same_shape(target, "charbonnier")?;
    if eps <= 0.0 {
        return Err(Error::arg("charbonnier eps must be positive"));
    }
    if pred.is_empty() {
        return Err(Error::shape("charbonnier over an empty tensor"));
    }
    let e = T::of(eps);
    let e2 = e * e;
    let excess: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| ((p - t) * (p - t) + e2).sqrt() - e)
        .sum();
    Ok(e + excess / T::of(pred.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let [n, ci, h, wd] = x.dims4().unwrap();
        let [co, _, kh, kw] = w.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        for b_ in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let sy = (y * stride + i) as isize - pad as isize;
                                    let sx = (xx * stride + j) as isize - pad as isize;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at4(b_, c, sy as usize, sx as usize)
                                        * w.at4(o, c, i, j);
                                }
                            }
                        }
                        out.data_mut()[((b_ * co + o) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_box_sum() {
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let w = Tensor::<f32>::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, Padding::Zero(1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 2, 2), 4.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = random(&[2, 1, 4, 5], 3);
        let w = Tensor::ones([1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, None, 1, Padding::Zero(0)).unwrap(), x);
    }

    #[test]
    fn conv_matches_nested_loops() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (3, 2)] {
            let x = random(&[2, 3, 7, 6], 1);
            let w = random(&[4, 3, 3, 3], 2);
            let b = random(&[4], 9);
            let got = conv2d(&x, &w, Some(&b), stride, Padding::Zero(pad)).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_reflect_pad_matches_padded_input() {
        let x = random(&[1, 2, 5, 4], 5);
        let w = random(&[3, 2, 3, 3], 6);
        let got = conv2d(&x, &w, None, 1, Padding::Reflect(1)).unwrap();
        // Build the reflect-padded input explicitly.
        let [_, c, h, wd] = x.dims4().unwrap();
        let padded = Tensor::from_fn([1, c, h + 2, wd + 2], |i| {
            let xx = i % (wd + 2);
            let y = (i / (wd + 2)) % (h + 2);
            let ch = i / ((wd + 2) * (h + 2));
            x.at4(0, ch, reflect_index(y as isize - 1, h), reflect_index(xx as isize - 1, wd))
        });
        let want = conv2d(&padded, &w, None, 1, Padding::Zero(0)).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, 1, Padding::Zero(1)).is_err());
        let w = Tensor::<f32>::zeros([1, 2, 3, 3]);
        assert!(conv2d(&x, &w, None, 0, Padding::Zero(1)).is_err());
    }

    #[test]
    fn linear_hand_arithmetic() {
        let x = Tensor::<f64>::from_vec([1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec([2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let b = Tensor::zeros([2]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_identity_and_mismatch() {
        let x = random(&[3, 4, 5], 7);
        let eye = Tensor::from_fn([5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, Some(&Tensor::zeros([5]))).unwrap(), x);
        assert!(linear(&x, &Tensor::zeros([5, 4]), None).is_err());
    }

    #[test]
    fn linear_matches_dot_products() {
        let x = random(&[7, 5], 11);
        let w = random(&[3, 5], 12);
        let b = random(&[3], 13);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for r in 0..7 {
            for o in 0..3 {
                let dot: f64 = (0..5).map(|i| x.data()[r * 5 + i] * w.data()[o * 5 + i]).sum();
                assert!((y.data()[r * 3 + o] - dot - b.data()[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::<f64>::from_vec([3], vec![0.0, 0.0, 0.0]).unwrap();
        for v in softmax(&t, 0).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::<f64>::from_vec([3], vec![2f64.ln(), 0.0, 0.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.25).abs() < 1e-15);
        let t = Tensor::<f64>::from_vec([3], vec![1000.0, 0.0, 0.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-12 && s.data()[1] >= 0.0);
        let bad = Tensor::<f64>::from_vec([2], vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax(&bad, 0).is_err());
    }

    #[test]
    fn softmax_inner_axis() {
        let x = random(&[2, 3, 4], 21);
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|j| s.data()[(o * 3 + j) * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::<f64>::from_vec([1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let y = layer_norm(&x, &Tensor::ones([3]), &Tensor::zeros([3]), 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let x = random(&[4, 6], 30);
        let beta = random(&[6], 31);
        let y = layer_norm(&x, &Tensor::zeros([6]), &beta, 1e-5).unwrap();
        for tok in y.data().chunks(6) {
            assert_eq!(tok, beta.data());
        }
        let x = random(&[5, 16], 32).scale(10.0);
        let y = layer_norm(&x, &Tensor::ones([16]), &Tensor::zeros([16]), 1e-5).unwrap();
        for tok in y.data().chunks(16) {
            let mean: f64 = tok.iter().sum::<f64>() / 16.0;
            let var: f64 = tok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(layer_norm(&x, &Tensor::ones([3]), &Tensor::zeros([3]), 1e-5).is_err());
    }

    #[test]
    fn gap_cases() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let x = random(&[2, 3, 7, 5], 40);
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.shape(), &[2, 3, 1, 1]);
        for (i, plane) in x.data().chunks(35).enumerate() {
            let mean = plane.iter().sum::<f64>() / 35.0;
            assert!((g.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn prelu_cases() {
        let slope = Tensor::<f64>::full([1], 0.25);
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0, -4.0]).unwrap();
        assert_eq!(prelu(&x, &slope).unwrap().data(), &[2.0, -1.0]);
        let x = random(&[2, 3, 4, 4], 41);
        assert_eq!(prelu(&x, &Tensor::ones([3])).unwrap(), x);
        assert!(prelu(&x, &Tensor::ones([2])).is_err());
    }

    #[test]
    fn pixel_shuffle_definition() {
        let x = Tensor::<f32>::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let x = random(&[2, 3, 4, 5], 50);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&random(&[1, 6, 2, 2], 1), 2).is_err());
    }

    #[test]
    fn resize_closed_form() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        // Half-pixel source coordinates -0.25 (clamped), 0.25, 0.75, 1.25.
        let lerp = |s: f64| {
            let s = s.max(0.0).min(1.0);
            1.0 + 2.0 * s
        };
        let want: Vec<f64> = [-0.25, 0.25, 0.75, 1.25].iter().map(|&s| lerp(s)).collect();
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Tensor::<f64>::full([1, 2, 3, 5], 0.7);
        let r = resize_bilinear(&c, 7, 2).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(resize_bilinear(&c, 0, 2).is_err());
    }

    #[test]
    fn tokens_roundtrip() {
        let x = random(&[2, 3, 4, 5], 60);
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[2, 20, 3]);
        assert_eq!(t.data()[(20 + 7) * 3 + 2], x.at4(1, 2, 1, 2));
        assert_eq!(from_tokens(&t, 4, 5).unwrap(), x);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = random(&[1, 2, 3, 5], 61);
        let p = reflect_pad_end(&x, 4, 2).unwrap();
        assert_eq!(p.shape(), &[1, 2, 7, 7]);
        assert_eq!(crop(&p, 3, 5).unwrap(), x);
        assert_eq!(p.at4(0, 1, 3, 0), x.at4(0, 1, 1, 0));
    }

    #[test]
    fn charbonnier_cases() {
        let x = random(&[2, 3], 70);
        assert_eq!(charbonnier(&x, &x, 1e-3).unwrap(), 1e-3);
        let y = x.map(|v| v + 2.0);
        let l = charbonnier(&x, &y, 1e-3).unwrap();
        assert!((l - 2.0).abs() <= 1e-6 / 4.0 + 1e-15);
    }

    #[test]
    fn attention_single_token_is_value() {
        let q = random(&[3, 1, 4], 80);
        let k = random(&[3, 1, 4], 81);
        let v = random(&[3, 1, 4], 82);
        let (o, p) = multi_head_attention(&q, &k, &v, 2, 0.5).unwrap();
        assert_eq!(o, v);
        assert!(p.data().iter().all(|&x| x == 1.0));
    }
}
