use super::{expect_channels, Ctx, LN_EPS};
use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Padding};

fn check_views<T: Element>(right: &Var<T>, left: &Var<T>, stride: usize) -> Result<()> {
    let [_, _, h, w] = expect_channels(right, 3, "right view")?;
    expect_channels(left, 3, "left view")?;
    if right.shape() != left.shape() {
        return Err(Error::shape(format!(
            "views differ in shape: {:?} vs {:?}",
            right.shape(),
            left.shape()
        )));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!("{h}x{w} input is not divisible by stride {stride}")));
    }
    Ok(())
}

/// Concatenates the views (right first), embeds non-overlapping
/// `P x P` patches with a strided conv and normalizes each token.
/// Returns `[N, C, H/P, W/P]`.
pub fn patch_partition<T: Element>(
    ctx: &Ctx<'_, T>,
    cfg: &ModelConfig,
    right: &Var<T>,
    left: &Var<T>,
) -> Result<Var<T>> {
    let p = cfg.patch_size;
    check_views(right, left, p)?;
    let g = ctx.graph;
    let pair = g.concat_channels(&[right, left])?;
    let x = g.conv2d(
        &pair,
        &ctx.p("patch_embed.proj.weight")?,
        Some(&ctx.p("patch_embed.proj.bias")?),
        p,
        Padding::Zero(0),
    )?;
    let [_, _, h, w] = x.value().dims4()?;
    let t = g.to_tokens(&x)?;
    let t = g.layer_norm(&t, &ctx.p("patch_embed.norm.gamma")?, &ctx.p("patch_embed.norm.beta")?, LN_EPS)?;
    g.from_tokens(&t, h, w)
}

/// Convolutional replacement for the transformer feature extractor:
/// two stride-2 3x3 convs with PReLU, `6 -> C -> C` channels.
pub fn cnn_stem<T: Element>(
    ctx: &Ctx<'_, T>,
    cfg: &ModelConfig,
    right: &Var<T>,
    left: &Var<T>,
) -> Result<Var<T>> {
    check_views(right, left, 4)?;
    let g = ctx.graph;
    let mut x = g.concat_channels(&[right, left])?;
    for i in 1..=2 {
        x = g.conv2d(
            &x,
            &ctx.p(&format!("cnn_stem.conv{i}.weight"))?,
            Some(&ctx.p(&format!("cnn_stem.conv{i}.bias"))?),
            2,
            Padding::Zero(1),
        )?;
        x = g.prelu(&x, &ctx.p(&format!("cnn_stem.act{i}.slope"))?)?;
    }
    expect_channels(&x, cfg.embed_dim, "cnn stem output")?;
    Ok(x)
}

/// 3x3 conv to `3 P^2` channels followed by a pixel shuffle back to input
/// resolution.
pub fn upsample_head<T: Element>(ctx: &Ctx<'_, T>, cfg: &ModelConfig, features: &Var<T>) -> Result<Var<T>> {
    expect_channels(features, cfg.embed_dim, "head input")?;
    let g = ctx.graph;
    let x = g.conv2d(
        features,
        &ctx.p("head.conv.weight")?,
        Some(&ctx.p("head.conv.bias")?),
        1,
        Padding::Zero(1),
    )?;
    g.pixel_shuffle(&x, cfg.stem_stride())
}
