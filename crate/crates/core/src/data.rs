//! Dual-pixel samples, manifests, patch tiling and flip augmentation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::load_image;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneCategory {
    Indoor,
    Outdoor,
}

impl fmt::Display for SceneCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneCategory::Indoor => "indoor",
            SceneCategory::Outdoor => "outdoor",
        })
    }
}

impl FromStr for SceneCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "indoor" => Ok(SceneCategory::Indoor),
            "outdoor" => Ok(SceneCategory::Outdoor),
            _ => Err(Error::arg(format!("unknown scene category `{s}`"))),
        }
    }
}

/// Two defocused views and the all-in-focus target, each `[1, 3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample<T> {
    pub id: String,
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub target: Tensor<T>,
    pub category: SceneCategory,
}

impl<T: Element> ImageSample<T> {
    pub fn new(
        id: impl Into<String>,
        left: Tensor<T>,
        right: Tensor<T>,
        target: Tensor<T>,
        category: SceneCategory,
    ) -> Result<Self> {
        let [n, c, _, _] = left.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::shape(format!("sample images must be [1, 3, H, W], got {:?}", left.shape())));
        }
        left.expect_same_shape(&right, "left/right views")?;
        left.expect_same_shape(&target, "views/target")?;
        Ok(Self { id: id.into(), left, right, target, category })
    }

    pub fn height(&self) -> usize {
        self.left.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[3]
    }

    /// The `size x size` window at `(top, left)` of all three images.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            left: crop_region(&self.left, top, left, size, size)?,
            right: crop_region(&self.right, top, left, size, size)?,
            target: crop_region(&self.target, top, left, size, size)?,
            category: self.category,
        })
    }
}

/// Extracts `x[.., top..top+h, left..left+w]`.
pub fn crop_region<T: Element>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, xh, xw] = x.dims4()?;
    if top + h > xh || left + w > xw {
        return Err(Error::shape(format!("{h}x{w} window at ({top}, {left}) exceeds {xh}x{xw}")));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(xh * xw) {
        for r in top..top + h {
            out.extend_from_slice(&plane[r * xw + left..r * xw + left + w]);
        }
    }
    Tensor::from_vec([n, c, h, w], out)
}

/// Concatenates `[1, C, H, W]` tensors along the batch axis.
pub fn stack_batch<T: Element>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::arg("cannot stack an empty batch"))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape(format!("batch items differ: {:?} vs {:?}", first.shape(), t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    shape[0] *= items.len();
    Tensor::from_vec(shape, data)
}

/// Sliding-window patch geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub overlap: f64,
}

impl PatchSpec {
    pub fn new(size: usize, overlap: f64) -> Result<Self> {
        let spec = Self { size, overlap };
        spec.stride()?;
        Ok(spec)
    }

    /// `floor(size * (1 - overlap))`.
    pub fn stride(&self) -> Result<usize> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::arg(format!("overlap {} is outside [0, 1)", self.overlap)));
        }
        let stride = (self.size as f64 * (1.0 - self.overlap)).floor() as usize;
        if self.size == 0 || stride == 0 {
            return Err(Error::arg(format!("patch size {} with overlap {} has zero stride", self.size, self.overlap)));
        }
        Ok(stride)
    }
}

fn axis_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + size <= dim).collect();
    if v.last().is_some_and(|&o| o + size < dim) {
        v.push(dim - size);
    }
    v
}

/// Top-left corners of the patches tiling an `h x w` image, row-major.
/// Origins step by the stride; a final clamped origin per axis covers the
/// far edge.
pub fn extract_patches(h: usize, w: usize, spec: &PatchSpec) -> Result<Vec<(usize, usize)>> {
    let stride = spec.stride()?;
    if h < spec.size || w < spec.size {
        return Err(Error::arg(format!("{h}x{w} image is smaller than the {} patch", spec.size)));
    }
    let rows = axis_origins(h, spec.size, stride);
    let cols = axis_origins(w, spec.size, stride);
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Flip {
    None,
    /// Mirror columns.
    H,
    /// Mirror rows.
    V,
    HV,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::None, Flip::H, Flip::V, Flip::HV];

    pub fn apply<T: Element>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = x.dims4()?;
        let (fh, fv) = match self {
            Flip::None => return Ok(x.clone()),
            Flip::H => (true, false),
            Flip::V => (false, true),
            Flip::HV => (true, true),
        };
        let mut out = Vec::with_capacity(x.len());
        for plane in x.data().chunks(h * w) {
            for r in 0..h {
                let src = if fv { h - 1 - r } else { r };
                let row = &plane[src * w..(src + 1) * w];
                if fh {
                    out.extend(row.iter().rev());
                } else {
                    out.extend_from_slice(row);
                }
            }
        }
        Tensor::from_vec(x.shape().to_vec(), out)
    }
}

/// Applies the same flip to both views and the target.
pub fn augment_flip<T: Element>(sample: &ImageSample<T>, flip: Flip) -> Result<ImageSample<T>> {
    Ok(ImageSample {
        id: sample.id.clone(),
        left: flip.apply(&sample.left)?,
        right: flip.apply(&sample.right)?,
        target: flip.apply(&sample.target)?,
        category: sample.category,
    })
}

/// One manifest line: `id  left  right  target  category`, tab-separated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub left: PathBuf,
    pub right: PathBuf,
    pub target: PathBuf,
    pub category: SceneCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses tab-separated records; blank lines and `#` comments are
    /// skipped. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Manifest { line: i + 1, message };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            let category = fields[4].trim().parse().map_err(|e: Error| bad(e.to_string()))?;
            let path = |f: &str| base.join(f.trim());
            entries.push(ManifestEntry {
                id: fields[0].trim().to_string(),
                left: path(fields[1]),
                right: path(fields[2]),
                target: path(fields[3]),
                category,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        self.entries
            .iter()
            .map(|e| {
                format!("{}\t{}\t{}\t{}\t{}\n", e.id, rel(&e.left), rel(&e.right), rel(&e.target), e.category)
            })
            .collect()
    }
}

pub fn load_sample<T: Element>(entry: &ManifestEntry) -> Result<ImageSample<T>> {
    ImageSample::new(
        entry.id.clone(),
        load_image(&entry.left)?,
        load_image(&entry.right)?,
        load_image(&entry.target)?,
        entry.category,
    )
}

/// A procedural dual-pixel triple: a smooth colour texture as the target
/// and two views shifted `disparity` pixels in opposite horizontal
/// directions, then box-blurred with radius `blur`.
pub fn synthetic_sample<T: Element>(
    id: impl Into<String>,
    h: usize,
    w: usize,
    disparity: usize,
    blur: usize,
    seed: u64,
) -> Result<ImageSample<T>> {
    if h == 0 || w == 0 {
        return Err(Error::arg("synthetic image must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target = vec![0.0f64; 3 * h * w];
    for plane in target.chunks_mut(h * w) {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(0.5..3.0) * std::f64::consts::TAU / h as f64,
                    rng.random_range(0.5..3.0) * std::f64::consts::TAU / w as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.3..1.0),
                ]
            })
            .collect();
        let norm: f64 = waves.iter().map(|v| v[3]).sum();
        for r in 0..h {
            for c in 0..w {
                let v: f64 = waves.iter().map(|&[fy, fx, ph, a]| a * (fy * r as f64 + fx * c as f64 + ph).sin()).sum();
                plane[r * w + c] = 0.5 + 0.35 * v / norm;
            }
        }
    }
    let view = |dir: isize| {
        let mut out = vec![0.0f64; target.len()];
        for (src, dst) in target.chunks(h * w).zip(out.chunks_mut(h * w)) {
            let at = |r: isize, c: isize| {
                let r = r.clamp(0, h as isize - 1) as usize;
                let c = (c - dir * disparity as isize).clamp(0, w as isize - 1) as usize;
                src[r * w + c]
            };
            let k = blur as isize;
            let taps = ((2 * k + 1) * (2 * k + 1)) as f64;
            for r in 0..h as isize {
                for c in 0..w as isize {
                    let mut acc = 0.0;
                    for dr in -k..=k {
                        for dc in -k..=k {
                            acc += at(r + dr, c + dc);
                        }
                    }
                    dst[r as usize * w + c as usize] = acc / taps;
                }
            }
        }
        out
    };
    let tensor = |v: Vec<f64>| Tensor::from_vec([1, 3, h, w], v.into_iter().map(T::of).collect());
    ImageSample::new(id, tensor(view(-1))?, tensor(view(1))?, tensor(target)?, SceneCategory::Indoor)
}
