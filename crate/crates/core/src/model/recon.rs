use super::{expect_channels, Ctx};
use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::tensor::{Element, Padding, Tensor};

/// Scale weights and per-scale group outputs of one reconstruction module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleScales<T> {
    /// `[N, S]`, rows sum to one.
    pub alpha: Tensor<T>,
    /// Output of each branch's residual group at branch resolution.
    pub features: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaleTrace<T> {
    pub modules: Vec<ModuleScales<T>>,
}

fn conv<T: Element>(ctx: &Ctx<'_, T>, prefix: &str, x: &Var<T>, pad: usize) -> Result<Var<T>> {
    ctx.graph.conv2d(
        x,
        &ctx.p(&format!("{prefix}.weight"))?,
        Some(&ctx.p(&format!("{prefix}.bias"))?),
        1,
        Padding::Zero(pad),
    )
}

/// `x + conv(PReLU(conv(x)))`.
pub fn residual_module<T: Element>(ctx: &Ctx<'_, T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let g = ctx.graph;
    let y = conv(ctx, &format!("{prefix}.conv1"), x, 1)?;
    let y = g.prelu(&y, &ctx.p(&format!("{prefix}.act.slope"))?)?;
    let y = conv(ctx, &format!("{prefix}.conv2"), &y, 1)?;
    g.add(x, &y)
}

pub fn rbm_forward<T: Element>(ctx: &Ctx<'_, T>, cfg: &ModelConfig, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let mut y = x.clone();
    for m in 0..cfg.rm_per_rbm {
        y = residual_module(ctx, &format!("{prefix}.rm.{m}"), &y)?;
    }
    ctx.graph.add(x, &y)
}

pub fn rgm_forward<T: Element>(ctx: &Ctx<'_, T>, cfg: &ModelConfig, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let mut y = x.clone();
    for b in 0..cfg.rbm_per_rgm {
        y = rbm_forward(ctx, cfg, &format!("{prefix}.rbm.{b}"), &y)?;
    }
    ctx.graph.add(x, &y)
}

/// Unnormalized scale scores `[N, S]`: global average pool then a 1x1 conv.
pub fn scale_logits<T: Element>(ctx: &Ctx<'_, T>, prefix: &str, f: &Var<T>) -> Result<Var<T>> {
    let g = ctx.graph;
    let pooled = g.global_avg_pool(f)?;
    let logits = conv(ctx, &format!("{prefix}.select"), &pooled, 0)?;
    let n = f.shape()[0];
    let s = logits.shape()[1];
    g.reshape(&logits, &[n, s])
}

/// Softmax over [`scale_logits`].
pub fn adaptive_scale_select<T: Element>(ctx: &Ctx<'_, T>, prefix: &str, f: &Var<T>) -> Result<Var<T>> {
    let logits = scale_logits(ctx, prefix, f)?;
    ctx.graph.softmax(&logits, 1)
}

/// One dynamic multi-scale sub-reconstruction module.
///
/// Branch `j` projects to the reconstruction width, resamples to
/// `1 / 2^j` resolution, runs a residual group, resamples back and projects
/// to `C`. Branch outputs are weighted per sample, summed with the input
/// and fused by a 1x1 conv.
pub fn dmssrm_forward<T: Element>(
    ctx: &Ctx<'_, T>,
    cfg: &ModelConfig,
    prefix: &str,
    f_prev: &Var<T>,
    trace: Option<&mut ScaleTrace<T>>,
) -> Result<Var<T>> {
    let g = ctx.graph;
    let [n, _, h, w] = expect_channels(f_prev, cfg.embed_dim, "reconstruction module")?;
    let s = cfg.num_scales;
    let alpha = if cfg.use_dynamic_selection {
        adaptive_scale_select(ctx, prefix, f_prev)?
    } else {
        g.constant(Tensor::full([n, s], T::of(1.0 / s as f64)))
    };
    let mut features = Vec::with_capacity(s);
    let mut acc: Option<Var<T>> = None;
    for j in 0..s {
        let branch = format!("{prefix}.branch.{j}");
        let mut u = conv(ctx, &format!("{branch}.in_proj"), f_prev, 0)?;
        let (bh, bw) = ((h >> j).max(1), (w >> j).max(1));
        if (bh, bw) != (h, w) {
            u = g.resize_bilinear(&u, bh, bw)?;
        }
        let mut r = rgm_forward(ctx, cfg, &format!("{branch}.rgm"), &u)?;
        if trace.is_some() {
            features.push(r.value().clone());
        }
        if (bh, bw) != (h, w) {
            r = g.resize_bilinear(&r, h, w)?;
        }
        let fj = conv(ctx, &format!("{branch}.out_proj"), &r, 0)?;
        let weighted = g.sample_scale(&fj, &alpha, j)?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(&a, &weighted)?,
        });
    }
    if let Some(trace) = trace {
        trace.modules.push(ModuleScales { alpha: alpha.value().clone(), features });
    }
    let sum = g.add(&acc.expect("at least one scale"), f_prev)?;
    conv(ctx, &format!("{prefix}.fusion"), &sum, 0)
}

/// Cascade of `num_dmssrm` modules with a long skip from the extracted
/// features; the identity when there are no modules.
pub fn reconstruction<T: Element>(
    ctx: &Ctx<'_, T>,
    cfg: &ModelConfig,
    features: &Var<T>,
    mut trace: Option<&mut ScaleTrace<T>>,
) -> Result<Var<T>> {
    if cfg.num_dmssrm == 0 {
        return Ok(features.clone());
    }
    let mut x = features.clone();
    for i in 0..cfg.num_dmssrm {
        x = dmssrm_forward(ctx, cfg, &format!("dmssrm.{i}"), &x, trace.as_deref_mut())?;
    }
    ctx.graph.add(&x, features)
}
