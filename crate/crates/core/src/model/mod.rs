//! The deblurring network: dual-view patch embedding, windowed-attention
//! feature extraction, cascaded dynamic multi-scale reconstruction and a
//! pixel-shuffle upsampling head.
//!
//! Every stage is a free function over a [`Ctx`] (a graph plus the parameter
//! store) and a name prefix, so stages compose freely in tests. [`Dmtnet`]
//! bundles a config with its parameters for whole-image inference.

mod layout;
mod recon;
mod stem;
mod transformer;

pub use layout::param_specs;
pub use recon::{
    adaptive_scale_select, dmssrm_forward, rbm_forward, reconstruction, residual_module,
    rgm_forward, scale_logits, ModuleScales, ScaleTrace,
};
pub use stem::{cnn_stem, patch_partition, upsample_head};
pub use transformer::{attention_residual, feature_extraction, mlp_residual, transformer_block, wmsa};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{ops, Element, Tensor};

/// Epsilon of every layer normalization in the network.
pub const LN_EPS: f64 = 1e-5;

/// A graph paired with the parameters it binds.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T: Element> {
    pub graph: &'a Graph<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(graph: &'a Graph<T>, params: &'a ParamStore<T>) -> Self {
        Self { graph, params }
    }

    pub fn p(&self, name: &str) -> Result<Var<T>> {
        self.graph.param(self.params, name)
    }
}

/// Full forward pass from the right/left views to the restored image.
///
/// Inputs are `[N, 3, H, W]` with `H` and `W` divisible by the stem stride.
/// The output is not clamped, so it can feed a loss.
pub fn dmtnet_forward<T: Element>(
    ctx: &Ctx<'_, T>,
    cfg: &ModelConfig,
    right: &Var<T>,
    left: &Var<T>,
    trace: Option<&mut ScaleTrace<T>>,
) -> Result<Var<T>> {
    let features = if cfg.use_transformer_stem {
        let tokens = patch_partition(ctx, cfg, right, left)?;
        feature_extraction(ctx, cfg, &tokens)?
    } else {
        cnn_stem(ctx, cfg, right, left)?
    };
    let sharp = reconstruction(ctx, cfg, &features, trace)?;
    upsample_head(ctx, cfg, &sharp)
}

/// A configured network with its parameters.
#[derive(Debug, Clone)]
pub struct Dmtnet<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Dmtnet<T> {
    /// Freshly initialized network.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_specs(&param_specs(&config), seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking they fit `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&param_specs(&config))?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, graph: &Graph<T>, right: &Var<T>, left: &Var<T>) -> Result<Var<T>> {
        dmtnet_forward(&Ctx::new(graph, &self.params), &self.config, right, left, None)
    }

    /// Restores an image pair of any size: reflect-pads to the stem stride,
    /// runs the network without recording, crops and clamps to `[0, 1]`.
    pub fn infer(&self, right: &Tensor<T>, left: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_impl(right, left, None)
    }

    /// As [`infer`](Self::infer), also collecting per-module scale weights
    /// and per-scale features.
    pub fn infer_traced(&self, right: &Tensor<T>, left: &Tensor<T>) -> Result<(Tensor<T>, ScaleTrace<T>)> {
        let mut trace = ScaleTrace::default();
        let out = self.infer_impl(right, left, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn infer_impl(
        &self,
        right: &Tensor<T>,
        left: &Tensor<T>,
        trace: Option<&mut ScaleTrace<T>>,
    ) -> Result<Tensor<T>> {
        right.expect_same_shape(left, "view pair")?;
        let [_, c, h, w] = right.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("views must have 3 channels, got {c}")));
        }
        let s = self.config.stem_stride();
        let (ph, pw) = (h.div_ceil(s) * s - h, w.div_ceil(s) * s - w);
        let graph = Graph::inference();
        let r = graph.constant(ops::reflect_pad_end(right, ph, pw)?);
        let l = graph.constant(ops::reflect_pad_end(left, ph, pw)?);
        let ctx = Ctx::new(&graph, &self.params);
        let out = dmtnet_forward(&ctx, &self.config, &r, &l, trace)?.into_tensor();
        let out = ops::crop(&out, h, w)?;
        Ok(out.clamp(T::zero(), T::one()))
    }
}

pub(crate) fn expect_channels<T: Element>(v: &Var<T>, c: usize, what: &str) -> Result<[usize; 4]> {
    let dims = v.value().dims4()?;
    if dims[1] != c {
        return Err(Error::shape(format!("{what}: expected {c} channels, got {}", dims[1])));
    }
    Ok(dims)
}
