//! PSNR, SSIM and MAE plus manifest-wide evaluation reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_sample, Manifest, ManifestEntry, SceneCategory};
use crate::error::{Error, Result};
use crate::model::Dmtnet;
use crate::tensor::{Element, Tensor};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DATA_RANGE: f64 = 1.0;

fn paired<'a, T: Element>(pred: &'a Tensor<T>, target: &'a Tensor<T>) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    pred.expect_same_shape(target, "metric inputs")?;
    if pred.is_empty() {
        return Err(Error::shape("metric over an empty tensor"));
    }
    Ok(pred.data().iter().zip(target.data()).map(|(&p, &t)| (p.to_f64_lossy(), t.to_f64_lossy())))
}

pub fn mse<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let n = pred.len() as f64;
    Ok(paired(pred, target)?.map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// `10 log10(peak^2 / mse)`; identical inputs give `+inf`.
pub fn psnr<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<f64> {
    let mse = mse(pred, target)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn mae<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let n = pred.len() as f64;
    Ok(paired(pred, target)?.map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-region separable Gaussian filtering of one `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = g.iter().enumerate().map(|(i, gi)| gi * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = g.iter().enumerate().map(|(i, gi)| gi * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), data range
/// 1, valid region only, averaged over channels and batch.
pub fn ssim<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(target, "ssim inputs")?;
    let [n, c, h, w] = pred.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for (px, ty) in pred.data().chunks(plane).zip(target.data().chunks(plane)) {
        let x: Vec<f64> = px.iter().map(|v| v.to_f64_lossy()).collect();
        let y: Vec<f64> = ty.iter().map(|v| v.to_f64_lossy()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, exx, eyy, exy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &g));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / (n * c) as f64)
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
mod float_or_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("unexpected float string `{s}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub category: SceneCategory,
    #[serde(with = "float_or_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// Means over a group of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    #[serde(with = "float_or_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

impl Aggregate {
    pub fn of<'a>(images: impl IntoIterator<Item = &'a ImageMetrics>) -> Option<Self> {
        let (mut count, mut psnr, mut ssim, mut mae) = (0usize, 0.0, 0.0, 0.0);
        for m in images {
            count += 1;
            psnr += m.psnr;
            ssim += m.ssim;
            mae += m.mae;
        }
        (count > 0).then(|| {
            let n = count as f64;
            Self { count, psnr: psnr / n, ssim: ssim / n, mae: mae / n }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedEntry {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Sorted by id.
    pub images: Vec<ImageMetrics>,
    pub indoor: Option<Aggregate>,
    pub outdoor: Option<Aggregate>,
    /// Mean over all images.
    pub combined: Option<Aggregate>,
    /// Entries that could not be loaded or restored.
    pub missing: Vec<FailedEntry>,
}

impl MetricsReport {
    pub fn from_images(mut images: Vec<ImageMetrics>, mut missing: Vec<FailedEntry>) -> Self {
        images.sort_by(|a, b| a.id.cmp(&b.id));
        missing.sort_by(|a, b| a.id.cmp(&b.id));
        let of = |c| Aggregate::of(images.iter().filter(|m| m.category == c));
        Self {
            indoor: of(SceneCategory::Indoor),
            outdoor: of(SceneCategory::Outdoor),
            combined: Aggregate::of(&images),
            images,
            missing,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Indoor, Outdoor and Combined summary followed by per-image rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>6} {:>10} {:>8} {:>8}", "Scenes", "Images", "PSNR (dB)", "SSIM", "MAE");
        for (label, agg) in [("Indoor", &self.indoor), ("Outdoor", &self.outdoor), ("Combined", &self.combined)] {
            match agg {
                Some(a) => {
                    let _ = writeln!(
                        s,
                        "{label:<10} {:>6} {:>10} {:>8.4} {:>8.4}",
                        a.count,
                        fmt_db(a.psnr),
                        a.ssim,
                        a.mae
                    );
                }
                None => {
                    let _ = writeln!(s, "{label:<10} {:>6} {:>10} {:>8} {:>8}", 0, "-", "-", "-");
                }
            }
        }
        if !self.images.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<24} {:<8} {:>10} {:>8} {:>8}", "Image", "Scene", "PSNR (dB)", "SSIM", "MAE");
            for m in &self.images {
                let _ = writeln!(
                    s,
                    "{:<24} {:<8} {:>10} {:>8.4} {:>8.4}",
                    m.id,
                    m.category.to_string(),
                    fmt_db(m.psnr),
                    m.ssim,
                    m.mae
                );
            }
        }
        for f in &self.missing {
            let _ = writeln!(s, "missing {}: {}", f.id, f.reason);
        }
        s
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "inf".to_string()
    }
}

/// Anything that maps a `(right, left)` view pair to a restored image of
/// the same size with values in `[0, 1]`.
pub trait Restorer: Sync {
    fn restore(&self, right: &Tensor<f32>, left: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Restorer for Dmtnet<f32> {
    fn restore(&self, right: &Tensor<f32>, left: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.infer(right, left)
    }
}

fn evaluate_entry(model: &dyn Restorer, entry: &ManifestEntry) -> Result<ImageMetrics> {
    let sample = load_sample::<f32>(entry)?;
    let pred = model.restore(&sample.right, &sample.left)?.clamp(0.0, 1.0);
    Ok(ImageMetrics {
        id: entry.id.clone(),
        category: entry.category,
        psnr: psnr(&pred, &sample.target, 1.0)?,
        ssim: ssim(&pred, &sample.target)?,
        mae: mae(&pred, &sample.target)?,
    })
}

/// Restores and scores every manifest entry in parallel. Entries that fail
/// are listed in `missing` and skipped.
pub fn evaluate(model: &dyn Restorer, manifest: &Manifest) -> MetricsReport {
    let results: Vec<_> = manifest
        .entries
        .par_iter()
        .map(|e| evaluate_entry(model, e).map_err(|err| FailedEntry { id: e.id.clone(), reason: err.to_string() }))
        .collect();
    let (mut images, mut missing) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(m) => images.push(m),
            Err(f) => missing.push(f),
        }
    }
    MetricsReport::from_images(images, missing)
}
