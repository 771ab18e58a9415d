//! Attention complexity, parameter accounting, FLOP estimates and
//! scale-selection dumps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imageio::save_gray_normalized;
use crate::model::{param_specs, Dmtnet, ScaleTrace};
use crate::tensor::{Element, Tensor};

/// Multiply counts of global and windowed self-attention over an
/// `h x w` map of `c`-channel tokens with `window x window` windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub h: u64,
    pub w: u64,
    pub channels: u64,
    pub window: u64,
    pub omega_msa: u128,
    pub omega_wmsa: u128,
    /// `omega_msa / omega_wmsa`.
    pub ratio: f64,
    /// `hw / (3 W^2)`, the large-map approximation of `ratio` when `C ~ W^2`.
    pub approx_ratio: f64,
}

pub fn complexity(h: u64, w: u64, channels: u64, window: u64) -> Result<ComplexityReport> {
    if h == 0 || w == 0 || channels == 0 || window == 0 {
        return Err(Error::arg("complexity inputs must all be at least 1"));
    }
    let hw = h as u128 * w as u128;
    let c = channels as u128;
    let ww = window as u128 * window as u128;
    let projections = 4 * hw * c * c;
    let omega_msa = projections + 2 * hw * hw * c;
    let omega_wmsa = projections + 2 * ww * hw * c;
    Ok(ComplexityReport {
        h,
        w,
        channels,
        window,
        omega_msa,
        omega_wmsa,
        ratio: omega_msa as f64 / omega_wmsa as f64,
        approx_ratio: hw as f64 / (3 * ww) as f64,
    })
}

/// Parameter counts grouped by top-level submodule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// `(submodule, count)` in network order.
    pub submodules: Vec<(String, u64)>,
    pub total: u64,
    /// Parameters added by one more reconstruction module.
    pub per_dmssrm: u64,
}

fn submodule_of(name: &str) -> &str {
    let mut parts = name.splitn(3, '.');
    let first = parts.next().unwrap_or(name);
    match (first, parts.next()) {
        ("blocks" | "dmssrm", Some(idx)) => &name[..first.len() + 1 + idx.len()],
        _ => first,
    }
}

/// Counts parameters from the layout a store would be built from.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let mut submodules: Vec<(String, u64)> = Vec::new();
    for spec in param_specs(cfg) {
        let key = submodule_of(&spec.name);
        match submodules.last_mut() {
            Some((k, n)) if k == key => *n += spec.numel() as u64,
            _ => submodules.push((key.to_string(), spec.numel() as u64)),
        }
    }
    let total = submodules.iter().map(|(_, n)| n).sum();
    Ok(ParamBreakdown { submodules, total, per_dmssrm: closed_form::dmssrm(cfg) })
}

/// Independent closed-form parameter formulas.
pub mod closed_form {
    use crate::config::ModelConfig;

    fn conv(cin: u64, cout: u64, k: u64) -> u64 {
        cout * cin * k * k + cout
    }

    /// `(conv weights + biases, PReLU slopes)` of one residual group.
    pub fn rgm(cfg: &ModelConfig) -> (u64, u64) {
        let r = cfg.recon_channels as u64;
        let modules = (cfg.rbm_per_rgm * cfg.rm_per_rbm) as u64;
        (modules * 2 * conv(r, r, 3), modules * r)
    }

    pub fn dmssrm(cfg: &ModelConfig) -> u64 {
        let c = cfg.embed_dim as u64;
        let r = cfg.recon_channels as u64;
        let s = cfg.num_scales as u64;
        let (convs, slopes) = rgm(cfg);
        let branch = conv(c, r, 1) + convs + slopes + conv(r, c, 1);
        let select = if cfg.use_dynamic_selection { conv(c, s, 1) } else { 0 };
        s * branch + select + conv(c, c, 1)
    }

    pub fn total(cfg: &ModelConfig) -> u64 {
        let c = cfg.embed_dim as u64;
        let p = cfg.patch_size as u64;
        let stem = if cfg.use_transformer_stem {
            let hidden = cfg.mlp_hidden() as u64;
            let block = 4 * c + 4 * c * c + 3 * c + hidden * c + hidden + c * hidden + c;
            conv(6, c, p) + 2 * c + cfg.num_blocks as u64 * block
        } else {
            conv(6, c, 3) + c + conv(c, c, 3) + c
        };
        stem + cfg.num_dmssrm as u64 * dmssrm(cfg) + conv(c, 3 * p * p, 3)
    }
}

/// Floating-point operations (two per multiply-accumulate) of one forward
/// pass on an `h x w` input. Biases, normalization, activations and
/// resampling are not counted. Attention uses the windowed multiply count
/// on the window-padded token map.
pub fn model_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<u128> {
    cfg.validate()?;
    let s = cfg.stem_stride();
    if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!("{h}x{w} input is not divisible by {s}")));
    }
    let (fh, fw) = ((h / s) as u128, (w / s) as u128);
    let c = cfg.embed_dim as u128;
    let mut macs: u128 = 0;
    if cfg.use_transformer_stem {
        let p = cfg.patch_size as u128;
        macs += fh * fw * c * 6 * p * p;
        let win = cfg.window_size as u128;
        let (ph, pw) = (fh.div_ceil(win) * win, fw.div_ceil(win) * win);
        let attn = complexity(ph as u64, pw as u64, c as u64, win as u64)?.omega_wmsa;
        let mlp = 2 * fh * fw * c * cfg.mlp_hidden() as u128;
        macs += cfg.num_blocks as u128 * (attn + mlp);
    } else {
        macs += (h as u128 / 2) * (w as u128 / 2) * c * 6 * 9;
        macs += fh * fw * c * c * 9;
    }
    let r = cfg.recon_channels as u128;
    let modules = (cfg.rbm_per_rgm * cfg.rm_per_rbm) as u128;
    let mut per_module = fh * fw * c * c;
    if cfg.use_dynamic_selection {
        per_module += c * cfg.num_scales as u128;
    }
    for j in 0..cfg.num_scales {
        let (bh, bw) = ((fh >> j).max(1), (fw >> j).max(1));
        per_module += 2 * fh * fw * c * r + modules * 2 * bh * bw * r * r * 9;
    }
    macs += cfg.num_dmssrm as u128 * per_module;
    let p = cfg.patch_size as u128;
    macs += fh * fw * 3 * p * p * c * 9;
    Ok(2 * macs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AlphaDump {
    modules: Vec<AlphaModule>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AlphaModule {
    module: usize,
    /// One row per sample.
    alpha: Vec<Vec<f64>>,
}

/// Files written by [`dump_scale_signals`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleDump {
    pub alpha_file: PathBuf,
    /// `(module, scale, path, height, width)` for each feature image.
    pub feature_images: Vec<(usize, usize, PathBuf, usize, usize)>,
    pub trace: ScaleTrace<f64>,
}

/// Runs the model on one view pair and writes each reconstruction module's
/// scale weights to `alpha.json` plus a channel-mean image of every
/// per-scale group output (first sample only) at its own resolution.
pub fn dump_scale_signals<T: Element>(
    model: &Dmtnet<T>,
    right: &Tensor<T>,
    left: &Tensor<T>,
    out_dir: &Path,
) -> Result<ScaleDump> {
    std::fs::create_dir_all(out_dir)?;
    let (_, trace) = model.infer_traced(right, left)?;
    let mut feature_images = Vec::new();
    let mut modules = Vec::new();
    for (i, m) in trace.modules.iter().enumerate() {
        let s = m.alpha.shape()[1];
        let alpha = m
            .alpha
            .data()
            .chunks(s)
            .map(|row| row.iter().map(|v| v.to_f64_lossy()).collect())
            .collect();
        modules.push(AlphaModule { module: i, alpha });
        for (j, f) in m.features.iter().enumerate() {
            let [_, c, h, w] = f.dims4()?;
            let plane = h * w;
            let mut mean = vec![0.0f64; plane];
            for ch in 0..c {
                for (acc, v) in mean.iter_mut().zip(&f.data()[ch * plane..(ch + 1) * plane]) {
                    *acc += v.to_f64_lossy() / c as f64;
                }
            }
            let path = out_dir.join(format!("dmssrm{i}_scale{j}.png"));
            save_gray_normalized(&mean, h, w, &path)?;
            feature_images.push((i, j, path, h, w));
        }
    }
    let alpha_file = out_dir.join("alpha.json");
    std::fs::write(&alpha_file, serde_json::to_string_pretty(&AlphaDump { modules })?)?;
    let trace = ScaleTrace {
        modules: trace
            .modules
            .into_iter()
            .map(|m| crate::model::ModuleScales {
                alpha: m.alpha.cast(),
                features: m.features.iter().map(Tensor::cast).collect(),
            })
            .collect(),
    };
    Ok(ScaleDump { alpha_file, feature_images, trace })
}

/// Reads back the per-module scale weights written by [`dump_scale_signals`].
pub fn read_alpha_file(path: &Path) -> Result<Vec<Vec<Vec<f64>>>> {
    let dump: AlphaDump = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(dump.modules.into_iter().map(|m| m.alpha).collect())
}
