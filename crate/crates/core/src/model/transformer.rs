use super::{expect_channels, Ctx, LN_EPS};
use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::tensor::Element;

/// Multi-head self-attention inside each window.
///
/// `windows` is `[B, L, C]`; tokens attend only to tokens of the same
/// window. Returns the projected `[B, L, C]` output.
pub fn wmsa<T: Element>(ctx: &Ctx<'_, T>, prefix: &str, windows: &Var<T>, heads: usize) -> Result<Var<T>> {
    let g = ctx.graph;
    let p = |s: &str| ctx.p(&format!("{prefix}.{s}"));
    let q = g.linear(windows, &p("q.weight")?, Some(&p("q.bias")?))?;
    let k = g.linear(windows, &p("k.weight")?, None)?;
    let v = g.linear(windows, &p("v.weight")?, Some(&p("v.bias")?))?;
    let a = g.attention(&q, &k, &v, heads)?;
    g.linear(&a, &p("proj.weight")?, Some(&p("proj.bias")?))
}

/// `X + WMSA(LN(X))` on a `[N, C, h, w]` map. Maps whose sides are not
/// multiples of the window are reflect-padded before windowing and cropped
/// after.
pub fn attention_residual<T: Element>(
    ctx: &Ctx<'_, T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: &Var<T>,
) -> Result<Var<T>> {
    let g = ctx.graph;
    let [_, _, h, w] = expect_channels(x, cfg.embed_dim, "transformer block")?;
    let t = g.to_tokens(x)?;
    let t = g.layer_norm(&t, &ctx.p(&format!("{prefix}.norm1.gamma"))?, &ctx.p(&format!("{prefix}.norm1.beta"))?, LN_EPS)?;
    let normed = g.from_tokens(&t, h, w)?;
    let windows = g.window_partition(&normed, cfg.window_size)?;
    let attended = wmsa(ctx, &format!("{prefix}.attn"), &windows, cfg.num_heads)?;
    let back = g.window_reverse(&attended, cfg.window_size, h, w)?;
    g.add(x, &back)
}

/// `X + MLP(LN(X))` with a GELU hidden layer.
pub fn mlp_residual<T: Element>(
    ctx: &Ctx<'_, T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: &Var<T>,
) -> Result<Var<T>> {
    let g = ctx.graph;
    let [_, _, h, w] = expect_channels(x, cfg.embed_dim, "transformer block")?;
    let p = |s: &str| ctx.p(&format!("{prefix}.{s}"));
    let t = g.to_tokens(x)?;
    let t = g.layer_norm(&t, &p("norm2.gamma")?, &p("norm2.beta")?, LN_EPS)?;
    let hdn = g.gelu(&g.linear(&t, &p("mlp.fc1.weight")?, Some(&p("mlp.fc1.bias")?))?);
    let out = g.linear(&hdn, &p("mlp.fc2.weight")?, Some(&p("mlp.fc2.bias")?))?;
    g.add(x, &g.from_tokens(&out, h, w)?)
}

pub fn transformer_block<T: Element>(
    ctx: &Ctx<'_, T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: &Var<T>,
) -> Result<Var<T>> {
    let x = attention_residual(ctx, cfg, prefix, x)?;
    mlp_residual(ctx, cfg, prefix, &x)
}

/// The stack of `num_blocks` transformer blocks.
pub fn feature_extraction<T: Element>(ctx: &Ctx<'_, T>, cfg: &ModelConfig, x: &Var<T>) -> Result<Var<T>> {
    let mut x = x.clone();
    for i in 0..cfg.num_blocks {
        x = transformer_block(ctx, cfg, &format!("blocks.{i}"), &x)?;
    }
    Ok(x)
}
