//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! A [`Graph`] records every operation whose inputs depend on a trainable
//! leaf. Values flow through [`Var`] handles that share their tensor by
//! reference count, so a graph created with [`Graph::inference`] records
//! nothing and frees intermediates as soon as their handles drop.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::backward as bw;
use crate::tensor::ops::{self, Padding};
use crate::tensor::window::{tiling_for_grid, Tiling};
use crate::tensor::{Element, Tensor};

/// Deliberate gradient corruptions, used to show that the finite-difference
/// check catches a broken backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFault {
    /// Attention backward forgets the `1/sqrt(d_head)` logit scale.
    DropAttentionScale,
}

#[derive(Clone)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Returns the tensor, cloning only if other handles still share it.
    pub fn into_tensor(self) -> Tensor<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

type Id = Option<usize>;

enum Op<T> {
    Leaf,
    Param(String),
    Add(Id, Id),
    Mul(Var<T>, Var<T>),
    Scale(Id, T),
    Sum(Id, Vec<usize>),
    Reshape(Id, Vec<usize>),
    Conv2d { x: Var<T>, w: Var<T>, b: Id, stride: usize, pad: Padding },
    Linear { x: Var<T>, w: Var<T>, b: Id },
    LayerNorm { x: Id, gamma: Var<T>, beta: Id, xhat: Tensor<T>, rstd: Vec<T> },
    Softmax { x: Id, y: Rc<Tensor<T>>, axis: usize },
    Gelu(Var<T>),
    Prelu(Var<T>, Var<T>),
    GlobalAvgPool(Id, Vec<usize>),
    PixelShuffle(Id, usize),
    Resize(Id, Vec<usize>),
    ToTokens(Id, usize, usize),
    FromTokens(Id),
    WindowPartition(Id, Tiling),
    WindowReverse(Id, Tiling),
    Concat(Vec<(Id, usize)>),
    Attention { q: Var<T>, k: Var<T>, v: Var<T>, probs: Tensor<T>, heads: usize, scale: T },
    SampleScale { x: Var<T>, alpha: Var<T>, index: usize },
    Charbonnier { pred: Var<T>, target: Var<T>, eps: f64 },
}

pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Op<T>>>,
    params: RefCell<HashMap<(u64, String), Var<T>>>,
    recording: bool,
    fault: Option<GradFault>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// A graph that records operations for [`backward`](Self::backward).
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            recording: true,
            fault: None,
        }
    }

    /// A graph that only evaluates; nothing is recorded.
    pub fn inference() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn with_fault(mut self, fault: GradFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var { value: Rc::new(t), id: None }
    }

    /// A differentiable input that is not part of a [`ParamStore`].
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        let id = self.recording.then(|| self.record(Op::Leaf));
        Var { value: Rc::new(t), id }
    }

    /// Binds a stored parameter. Repeated requests for one name from an
    /// unmodified store share a node.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var<T>> {
        let key = (store.revision(), name.to_string());
        if let Some(v) = self.params.borrow().get(&key) {
            return Ok(v.clone());
        }
        let value = store.value(name)?.clone();
        let id = self.recording.then(|| self.record(Op::Param(name.to_string())));
        let var = Var { value: Rc::new(value), id };
        self.params.borrow_mut().insert(key, var.clone());
        Ok(var)
    }

    fn record(&self, op: Op<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(op);
        nodes.len() - 1
    }

    fn emit(&self, value: Tensor<T>, tracked: bool, op: impl FnOnce() -> Op<T>) -> Var<T> {
        let id = (self.recording && tracked).then(|| self.record(op()));
        Var { value: Rc::new(value), id }
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let v = a.value.add(&b.value)?;
        Ok(self.emit(v, a.id.is_some() || b.id.is_some(), || Op::Add(a.id, b.id)))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let v = a.value.mul(&b.value)?;
        Ok(self.emit(v, a.id.is_some() || b.id.is_some(), || Op::Mul(a.clone(), b.clone())))
    }

    pub fn scale(&self, a: &Var<T>, factor: T) -> Var<T> {
        self.emit(a.value.scale(factor), a.id.is_some(), || Op::Scale(a.id, factor))
    }

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let v = Tensor::scalar(a.value.sum());
        self.emit(v, a.id.is_some(), || Op::Sum(a.id, a.shape().to_vec()))
    }

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let v = a.value.reshape(shape.to_vec())?;
        Ok(self.emit(v, a.id.is_some(), || Op::Reshape(a.id, a.shape().to_vec())))
    }

    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var<T>> {
        let v = ops::conv2d(&x.value, &w.value, b.map(|b| &*b.value), stride, pad)?;
        let b_id = b.and_then(|b| b.id);
        let tracked = x.id.is_some() || w.id.is_some() || b_id.is_some();
        Ok(self.emit(v, tracked, || Op::Conv2d { x: x.clone(), w: w.clone(), b: b_id, stride, pad }))
    }

    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let v = ops::linear(&x.value, &w.value, b.map(|b| &*b.value))?;
        let b_id = b.and_then(|b| b.id);
        let tracked = x.id.is_some() || w.id.is_some() || b_id.is_some();
        Ok(self.emit(v, tracked, || Op::Linear { x: x.clone(), w: w.clone(), b: b_id }))
    }

    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let stats = ops::layer_norm_stats(&x.value, eps)?;
        let v = ops::norm_affine(&stats.normalized, &gamma.value, &beta.value)?;
        let tracked = x.id.is_some() || gamma.id.is_some() || beta.id.is_some();
        Ok(self.emit(v, tracked, || Op::LayerNorm {
            x: x.id,
            gamma: gamma.clone(),
            beta: beta.id,
            xhat: stats.normalized,
            rstd: stats.rstd,
        }))
    }

    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        let y = Rc::new(ops::softmax(&x.value, axis)?);
        let id = (self.recording && x.id.is_some())
            .then(|| self.record(Op::Softmax { x: x.id, y: y.clone(), axis }));
        Ok(Var { value: y, id })
    }

    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        self.emit(ops::gelu(&x.value), x.id.is_some(), || Op::Gelu(x.clone()))
    }

    pub fn prelu(&self, x: &Var<T>, slope: &Var<T>) -> Result<Var<T>> {
        let v = ops::prelu(&x.value, &slope.value)?;
        let tracked = x.id.is_some() || slope.id.is_some();
        Ok(self.emit(v, tracked, || Op::Prelu(x.clone(), slope.clone())))
    }

    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let v = ops::global_avg_pool(&x.value)?;
        Ok(self.emit(v, x.id.is_some(), || Op::GlobalAvgPool(x.id, x.shape().to_vec())))
    }

    pub fn pixel_shuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let v = ops::pixel_shuffle(&x.value, r)?;
        Ok(self.emit(v, x.id.is_some(), || Op::PixelShuffle(x.id, r)))
    }

    pub fn resize_bilinear(&self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let v = ops::resize_bilinear(&x.value, h, w)?;
        Ok(self.emit(v, x.id.is_some(), || Op::Resize(x.id, x.shape().to_vec())))
    }

    pub fn to_tokens(&self, x: &Var<T>) -> Result<Var<T>> {
        let [_, _, h, w] = x.value.dims4()?;
        let v = ops::to_tokens(&x.value)?;
        Ok(self.emit(v, x.id.is_some(), || Op::ToTokens(x.id, h, w)))
    }

    pub fn from_tokens(&self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let v = ops::from_tokens(&x.value, h, w)?;
        Ok(self.emit(v, x.id.is_some(), || Op::FromTokens(x.id)))
    }

    /// `[N, C, h, w] -> [windows, W*W, C]` (see [`crate::tensor::window`]).
    pub fn window_partition(&self, x: &Var<T>, window: usize) -> Result<Var<T>> {
        let [n, c, h, w] = x.value.dims4()?;
        let t = Tiling::new(n, c, h, w, window)?;
        let v = Tensor::from_vec(t.grid_shape(), t.partition(x.value.data()))?;
        Ok(self.emit(v, x.id.is_some(), || Op::WindowPartition(x.id, t)))
    }

    pub fn window_reverse(&self, grid: &Var<T>, window: usize, h: usize, w: usize) -> Result<Var<T>> {
        let t = tiling_for_grid(grid.shape(), window, h, w)?;
        let v = Tensor::from_vec([t.n, t.c, h, w], t.reverse(grid.value.data()))?;
        Ok(self.emit(v, grid.id.is_some(), || Op::WindowReverse(grid.id, t)))
    }

    pub fn concat_channels(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &*p.value).collect();
        let v = ops::concat_channels(&tensors)?;
        let tracked = parts.iter().any(|p| p.id.is_some());
        Ok(self.emit(v, tracked, || {
            Op::Concat(parts.iter().map(|p| (p.id, p.shape()[1])).collect())
        }))
    }

    /// Multi-head softmax attention with the `1/sqrt(d_head)` logit scale.
    pub fn attention(&self, q: &Var<T>, k: &Var<T>, v: &Var<T>, heads: usize) -> Result<Var<T>> {
        let c = *q.shape().last().unwrap_or(&0);
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape(format!("{c} channels not divisible into {heads} heads")));
        }
        let scale = T::of(1.0 / ((c / heads) as f64).sqrt());
        let (out, probs) = ops::multi_head_attention(&q.value, &k.value, &v.value, heads, scale)?;
        let tracked = q.id.is_some() || k.id.is_some() || v.id.is_some();
        Ok(self.emit(out, tracked, || Op::Attention {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
            heads,
            scale,
        }))
    }

    /// `out[n] = alpha[n, index] * x[n]` for `alpha` of shape `[N, S]`.
    pub fn sample_scale(&self, x: &Var<T>, alpha: &Var<T>, index: usize) -> Result<Var<T>> {
        let n = x.shape()[0];
        let s = match alpha.shape() {
            &[an, s] if an == n && index < s => s,
            other => {
                return Err(Error::shape(format!(
                    "sample_scale: weights {other:?} do not fit batch {n} index {index}"
                )))
            }
        };
        let per = x.value.len() / n.max(1);
        let mut out = x.value.data().to_vec();
        for (b, chunk) in out.chunks_mut(per).enumerate() {
            let a = alpha.value.data()[b * s + index];
            chunk.iter_mut().for_each(|v| *v *= a);
        }
        let v = Tensor::from_vec(x.shape().to_vec(), out)?;
        let tracked = x.id.is_some() || alpha.id.is_some();
        Ok(self.emit(v, tracked, || Op::SampleScale { x: x.clone(), alpha: alpha.clone(), index }))
    }

    pub fn charbonnier(&self, pred: &Var<T>, target: &Var<T>, eps: f64) -> Result<Var<T>> {
        let v = Tensor::scalar(ops::charbonnier(&pred.value, &target.value, eps)?);
        let tracked = pred.id.is_some() || target.id.is_some();
        Ok(self.emit(v, tracked, || Op::Charbonnier {
            pred: pred.clone(),
            target: target.clone(),
            eps,
        }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let root = loss.id.ok_or(Error::NotRecorded)?;
        if loss.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.shape().to_vec(), T::one()));
        let mut out = Gradients { by_node: HashMap::new(), params: Vec::new() };

        fn acc<T: Element>(grads: &mut [Option<Tensor<T>>], id: Id, g: Tensor<T>) -> Result<()> {
            let Some(id) = id else { return Ok(()) };
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &nodes[idx] {
                Op::Leaf => {
                    out.by_node.insert(idx, g);
                }
                Op::Param(name) => {
                    out.params.push((name.clone(), idx));
                    out.by_node.insert(idx, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone())?;
                    acc(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    if a.id.is_some() {
                        acc(&mut grads, a.id, g.mul(&b.value)?)?;
                    }
                    if b.id.is_some() {
                        acc(&mut grads, b.id, g.mul(&a.value)?)?;
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.scale(*f))?,
                Op::Sum(a, shape) => acc(&mut grads, *a, Tensor::full(shape.clone(), g.data()[0]))?,
                Op::Reshape(a, shape) => acc(&mut grads, *a, g.into_reshape(shape.clone())?)?,
                Op::Conv2d { x, w, b, stride, pad } => {
                    let cg = bw::conv2d_backward(&x.value, &w.value, *stride, *pad, &g)?;
                    acc(&mut grads, x.id, cg.input)?;
                    acc(&mut grads, w.id, cg.weight)?;
                    acc(&mut grads, *b, cg.bias)?;
                }
                Op::Linear { x, w, b } => {
                    let lg = bw::linear_backward(&x.value, &w.value, &g)?;
                    acc(&mut grads, x.id, lg.input)?;
                    acc(&mut grads, w.id, lg.weight)?;
                    acc(&mut grads, *b, lg.bias)?;
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let ng = bw::layer_norm_backward(xhat, rstd, &gamma.value, &g)?;
                    acc(&mut grads, *x, ng.input)?;
                    acc(&mut grads, gamma.id, ng.gamma)?;
                    acc(&mut grads, *beta, ng.beta)?;
                }
                Op::Softmax { x, y, axis } => acc(&mut grads, *x, bw::softmax_backward(y, &g, *axis)?)?,
                Op::Gelu(x) => acc(&mut grads, x.id, bw::gelu_backward(&x.value, &g)?)?,
                Op::Prelu(x, slope) => {
                    let (dx, ds) = bw::prelu_backward(&x.value, &slope.value, &g)?;
                    acc(&mut grads, x.id, dx)?;
                    acc(&mut grads, slope.id, ds)?;
                }
                Op::GlobalAvgPool(x, shape) => {
                    acc(&mut grads, *x, bw::global_avg_pool_backward(shape, &g)?)?
                }
                Op::PixelShuffle(x, r) => acc(&mut grads, *x, ops::pixel_unshuffle(&g, *r)?)?,
                Op::Resize(x, shape) => acc(&mut grads, *x, bw::resize_bilinear_backward(shape, &g)?)?,
                Op::ToTokens(x, h, w) => acc(&mut grads, *x, ops::from_tokens(&g, *h, *w)?)?,
                Op::FromTokens(x) => acc(&mut grads, *x, ops::to_tokens(&g)?)?,
                Op::WindowPartition(x, t) => {
                    let dx = Tensor::from_vec([t.n, t.c, t.h, t.w], t.partition_adjoint(g.data()))?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::WindowReverse(x, t) => {
                    let dx = Tensor::from_vec(t.grid_shape(), t.reverse_adjoint(g.data()))?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::Concat(parts) => {
                    let [n, _, h, w] = g.dims4()?;
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let plane = h * w;
                    let mut start = 0;
                    for &(id, c) in parts {
                        if id.is_some() {
                            let mut d = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                let off = (b * total + start) * plane;
                                d.extend_from_slice(&g.data()[off..off + c * plane]);
                            }
                            acc(&mut grads, id, Tensor::from_vec([n, c, h, w], d)?)?;
                        }
                        start += c;
                    }
                }
                Op::Attention { q, k, v, probs, heads, scale } => {
                    let logit_scale = match self.fault {
                        Some(GradFault::DropAttentionScale) => T::one(),
                        None => *scale,
                    };
                    let ag = bw::attention_backward(
                        &q.value, &k.value, &v.value, probs, *heads, logit_scale, &g,
                    )?;
                    acc(&mut grads, q.id, ag.q)?;
                    acc(&mut grads, k.id, ag.k)?;
                    acc(&mut grads, v.id, ag.v)?;
                }
                Op::SampleScale { x, alpha, index } => {
                    let n = x.shape()[0];
                    let s = alpha.shape()[1];
                    let per = x.value.len() / n.max(1);
                    if x.id.is_some() {
                        let mut dx = g.data().to_vec();
                        for (b, chunk) in dx.chunks_mut(per).enumerate() {
                            let a = alpha.value.data()[b * s + index];
                            chunk.iter_mut().for_each(|v| *v *= a);
                        }
                        acc(&mut grads, x.id, Tensor::from_vec(x.shape().to_vec(), dx)?)?;
                    }
                    if alpha.id.is_some() {
                        let mut da = Tensor::zeros([n, s]);
                        for b in 0..n {
                            let xs = &x.value.data()[b * per..(b + 1) * per];
                            let gs = &g.data()[b * per..(b + 1) * per];
                            da.data_mut()[b * s + index] =
                                xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        }
                        acc(&mut grads, alpha.id, da)?;
                    }
                }
                Op::Charbonnier { pred, target, eps } => {
                    let dp = bw::charbonnier_backward(&pred.value, &target.value, *eps, g.data()[0])?;
                    if target.id.is_some() {
                        acc(&mut grads, target.id, dp.scale(-T::one()))?;
                    }
                    acc(&mut grads, pred.id, dp)?;
                }
            }
        }
        out.params.reverse();
        Ok(out)
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
    params: Vec<(String, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf or parameter handle; `None` if it did not
    /// influence the loss.
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.by_node.get(&id))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.by_node.get(id))
    }

    /// Parameters that received a gradient, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, id)| (n.as_str(), &self.by_node[id]))
    }
}
