//! Parameter names, shapes and initializers for a [`ModelConfig`].
//!
//! Final projections of residual branches start at zero and the fusion
//! convolution starts at identity, so a fresh network's reconstruction
//! stage passes features through unchanged.

use crate::config::ModelConfig;
use crate::params::{Init, ParamSpec};

const ATTN_STD: f64 = 0.02;

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let c = cfg.embed_dim;
    if cfg.use_transformer_stem {
        let p = cfg.patch_size;
        specs.push(ParamSpec::new("patch_embed.proj.weight", [c, 6, p, p], Init::FanIn { fan_in: 6 * p * p }));
        specs.push(ParamSpec::new("patch_embed.proj.bias", [c], Init::Zeros));
        norm(&mut specs, "patch_embed.norm", c);
        for i in 0..cfg.num_blocks {
            block(&mut specs, &format!("blocks.{i}"), cfg);
        }
    } else {
        specs.push(ParamSpec::new("cnn_stem.conv1.weight", [c, 6, 3, 3], Init::FanIn { fan_in: 54 }));
        specs.push(ParamSpec::new("cnn_stem.conv1.bias", [c], Init::Zeros));
        specs.push(ParamSpec::new("cnn_stem.act1.slope", [c], Init::Constant(0.25)));
        specs.push(ParamSpec::new("cnn_stem.conv2.weight", [c, c, 3, 3], Init::FanIn { fan_in: 9 * c }));
        specs.push(ParamSpec::new("cnn_stem.conv2.bias", [c], Init::Zeros));
        specs.push(ParamSpec::new("cnn_stem.act2.slope", [c], Init::Constant(0.25)));
    }
    for i in 0..cfg.num_dmssrm {
        dmssrm(&mut specs, &format!("dmssrm.{i}"), cfg);
    }
    let out = 3 * cfg.patch_size * cfg.patch_size;
    specs.push(ParamSpec::new("head.conv.weight", [out, c, 3, 3], Init::FanIn { fan_in: 9 * c }));
    specs.push(ParamSpec::new("head.conv.bias", [out], Init::Zeros));
    specs
}

fn norm(specs: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.gamma"), [c], Init::Constant(1.0)));
    specs.push(ParamSpec::new(format!("{prefix}.beta"), [c], Init::Zeros));
}

fn block(specs: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    let c = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let tn = Init::TruncNormal { std: ATTN_STD };
    norm(specs, &format!("{prefix}.norm1"), c);
    specs.push(ParamSpec::new(format!("{prefix}.attn.q.weight"), [c, c], tn));
    specs.push(ParamSpec::new(format!("{prefix}.attn.q.bias"), [c], Init::Zeros));
    // A key bias shifts every logit of a query row equally; softmax ignores it.
    specs.push(ParamSpec::new(format!("{prefix}.attn.k.weight"), [c, c], tn));
    specs.push(ParamSpec::new(format!("{prefix}.attn.v.weight"), [c, c], tn));
    specs.push(ParamSpec::new(format!("{prefix}.attn.v.bias"), [c], Init::Zeros));
    specs.push(ParamSpec::new(format!("{prefix}.attn.proj.weight"), [c, c], Init::Zeros));
    specs.push(ParamSpec::new(format!("{prefix}.attn.proj.bias"), [c], Init::Zeros));
    norm(specs, &format!("{prefix}.norm2"), c);
    specs.push(ParamSpec::new(format!("{prefix}.mlp.fc1.weight"), [hidden, c], tn));
    specs.push(ParamSpec::new(format!("{prefix}.mlp.fc1.bias"), [hidden], Init::Zeros));
    specs.push(ParamSpec::new(format!("{prefix}.mlp.fc2.weight"), [c, hidden], Init::Zeros));
    specs.push(ParamSpec::new(format!("{prefix}.mlp.fc2.bias"), [c], Init::Zeros));
}

fn dmssrm(specs: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    let c = cfg.embed_dim;
    let r = cfg.recon_channels;
    let s = cfg.num_scales;
    for j in 0..s {
        let branch = format!("{prefix}.branch.{j}");
        specs.push(ParamSpec::new(format!("{branch}.in_proj.weight"), [r, c, 1, 1], Init::FanIn { fan_in: c }));
        specs.push(ParamSpec::new(format!("{branch}.in_proj.bias"), [r], Init::Zeros));
        for b in 0..cfg.rbm_per_rgm {
            for m in 0..cfg.rm_per_rbm {
                let rm = format!("{branch}.rgm.rbm.{b}.rm.{m}");
                specs.push(ParamSpec::new(format!("{rm}.conv1.weight"), [r, r, 3, 3], Init::FanIn { fan_in: 9 * r }));
                specs.push(ParamSpec::new(format!("{rm}.conv1.bias"), [r], Init::Zeros));
                specs.push(ParamSpec::new(format!("{rm}.act.slope"), [r], Init::Constant(0.25)));
                specs.push(ParamSpec::new(format!("{rm}.conv2.weight"), [r, r, 3, 3], Init::Zeros));
                specs.push(ParamSpec::new(format!("{rm}.conv2.bias"), [r], Init::Zeros));
            }
        }
        specs.push(ParamSpec::new(format!("{branch}.out_proj.weight"), [c, r, 1, 1], Init::Zeros));
        specs.push(ParamSpec::new(format!("{branch}.out_proj.bias"), [c], Init::Zeros));
    }
    if cfg.use_dynamic_selection {
        specs.push(ParamSpec::new(
            format!("{prefix}.select.weight"),
            [s, c, 1, 1],
            Init::TruncNormal { std: ATTN_STD },
        ));
        specs.push(ParamSpec::new(format!("{prefix}.select.bias"), [s], Init::Zeros));
    }
    specs.push(ParamSpec::new(format!("{prefix}.fusion.weight"), [c, c, 1, 1], Init::Identity));
    specs.push(ParamSpec::new(format!("{prefix}.fusion.bias"), [c], Init::Zeros));
}
