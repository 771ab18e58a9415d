//! Architecture hyperparameters and the flat `key = value` config format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square patches tokenized by the strided embedding conv.
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Transformer blocks in the feature extractor.
    pub num_blocks: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub mlp_ratio: f64,
    /// Cascaded dynamic multi-scale sub-reconstruction modules.
    pub num_dmssrm: usize,
    pub num_scales: usize,
    pub recon_channels: usize,
    pub rbm_per_rgm: usize,
    pub rm_per_rbm: usize,
    pub use_transformer_stem: bool,
    pub use_dynamic_selection: bool,
}

const KEYS: [&str; 13] = [
    "patch_size",
    "embed_dim",
    "num_blocks",
    "num_heads",
    "window_size",
    "mlp_ratio",
    "num_dmssrm",
    "num_scales",
    "recon_channels",
    "rbm_per_rgm",
    "rm_per_rbm",
    "use_transformer_stem",
    "use_dynamic_selection",
];

/// Shipped preset names, smallest first.
pub const PRESETS: [&str; 7] =
    ["dmtnet-t", "dmtnet-s", "dmtnet-b", "dmtnet-l", "dmtnet-h", "micro", "toy"];

impl ModelConfig {
    /// Full-size architecture with `num_dmssrm` reconstruction modules
    /// (0, 1, 2, 3, 4 for the T, S, B, L, H variants).
    pub fn full(num_dmssrm: usize) -> Self {
        Self {
            patch_size: 4,
            embed_dim: 96,
            num_blocks: 5,
            num_heads: 6,
            window_size: 8,
            mlp_ratio: 4.0,
            num_dmssrm,
            num_scales: 3,
            recon_channels: 64,
            rbm_per_rgm: 5,
            rm_per_rbm: 10,
            use_transformer_stem: true,
            use_dynamic_selection: true,
        }
    }

    /// Smallest configuration that still exercises every parameter family;
    /// sized for finite-difference checking on a `1x3x8x8` input.
    pub fn micro() -> Self {
        Self {
            patch_size: 1,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            window_size: 2,
            mlp_ratio: 4.0,
            num_dmssrm: 1,
            num_scales: 2,
            recon_channels: 8,
            rbm_per_rgm: 1,
            rm_per_rbm: 1,
            use_transformer_stem: true,
            use_dynamic_selection: true,
        }
    }

    /// Small configuration for single-image overfitting runs.
    pub fn toy() -> Self {
        Self {
            patch_size: 2,
            embed_dim: 16,
            num_blocks: 1,
            num_heads: 2,
            window_size: 4,
            mlp_ratio: 2.0,
            num_dmssrm: 1,
            num_scales: 2,
            recon_channels: 16,
            rbm_per_rgm: 1,
            rm_per_rbm: 2,
            use_transformer_stem: true,
            use_dynamic_selection: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "dmtnet-t" => include_str!("../presets/dmtnet-t.cfg"),
            "dmtnet-s" => include_str!("../presets/dmtnet-s.cfg"),
            "dmtnet-b" => include_str!("../presets/dmtnet-b.cfg"),
            "dmtnet-l" => include_str!("../presets/dmtnet-l.cfg"),
            "dmtnet-h" => include_str!("../presets/dmtnet-h.cfg"),
            "micro" => include_str!("../presets/micro.cfg"),
            "toy" => include_str!("../presets/toy.cfg"),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Self::parse(text)
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    /// Total spatial downsampling between the input image and the features.
    pub fn stem_stride(&self) -> usize {
        if self.use_transformer_stem {
            self.patch_size
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 {
            return fail("patch_size must be at least 1".into());
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return fail("embed_dim and num_heads must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.window_size == 0 {
            return fail("window_size must be at least 1".into());
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        if self.num_scales == 0 {
            return fail("num_scales must be at least 1".into());
        }
        if self.recon_channels == 0 {
            return fail("recon_channels must be positive".into());
        }
        if !self.use_transformer_stem && self.patch_size != 4 {
            return fail(format!(
                "the convolutional stem downsamples by 4; patch_size is {}",
                self.patch_size
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses the flat format: one `key = value` per line, `#` comments.
    /// Every field must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: [Option<String>; 13] = Default::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)))?;
            if values[slot].is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            values[slot] = Some(value.trim().to_string());
        }
        let get = |i: usize| -> Result<&str> {
            values[i].as_deref().ok_or_else(|| Error::Config(format!("missing key `{}`", KEYS[i])))
        };
        let cfg = Self {
            patch_size: parse_int(KEYS[0], get(0)?)?,
            embed_dim: parse_int(KEYS[1], get(1)?)?,
            num_blocks: parse_int(KEYS[2], get(2)?)?,
            num_heads: parse_int(KEYS[3], get(3)?)?,
            window_size: parse_int(KEYS[4], get(4)?)?,
            mlp_ratio: get(5)?
                .parse()
                .map_err(|_| Error::Config(format!("mlp_ratio: `{}` is not a number", get(5).unwrap())))?,
            num_dmssrm: parse_int(KEYS[6], get(6)?)?,
            num_scales: parse_int(KEYS[7], get(7)?)?,
            recon_channels: parse_int(KEYS[8], get(8)?)?,
            rbm_per_rgm: parse_int(KEYS[9], get(9)?)?,
            rm_per_rbm: parse_int(KEYS[10], get(10)?)?,
            use_transformer_stem: parse_bool(KEYS[11], get(11)?)?,
            use_dynamic_selection: parse_bool(KEYS[12], get(12)?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a single `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let mut text = self.to_text();
        let (key, _) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        text = text
            .lines()
            .filter(|l| l.split('=').next().map(str::trim) != Some(key))
            .map(|l| format!("{l}\n"))
            .collect();
        text.push_str(assignment);
        text.push('\n');
        *self = Self::parse(&text)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fields: [String; 13] = [
            self.patch_size.to_string(),
            self.embed_dim.to_string(),
            self.num_blocks.to_string(),
            self.num_heads.to_string(),
            self.window_size.to_string(),
            format!("{:?}", self.mlp_ratio),
            self.num_dmssrm.to_string(),
            self.num_scales.to_string(),
            self.recon_channels.to_string(),
            self.rbm_per_rgm.to_string(),
            self.rm_per_rbm.to_string(),
            self.use_transformer_stem.to_string(),
            self.use_dynamic_selection.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(fields) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn parse_int(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: `{v}` is not a non-negative integer")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}
