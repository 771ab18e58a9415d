//! PNG input and output for `[1, 3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Sample depth used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), message: message.to_string() }
}

/// Loads an 8- or 16-bit RGB image, normalized by the bit-depth maximum.
pub fn load_image<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (raw, max): (Vec<f64>, f64) = match img {
        DynamicImage::ImageRgb8(buf) => (buf.into_raw().into_iter().map(f64::from).collect(), 255.0),
        DynamicImage::ImageRgb16(buf) => (buf.into_raw().into_iter().map(f64::from).collect(), 65535.0),
        other => return Err(image_err(path, format!("expected an RGB image, found {:?}", other.color()))),
    };
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::of(px[c] / max);
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

fn quantize<T: Element>(v: T, max: f64) -> f64 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * max).round()
}

/// Writes the first image of a `[N, 3, H, W]` tensor as an RGB PNG,
/// rounding to the nearest level after clamping to `[0, 1]`.
pub fn save_image<T: Element>(t: &Tensor<T>, path: &Path, depth: BitDepth) -> Result<()> {
    let [_, c, h, w] = t.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("saving an RGB image needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = t.data();
    let max = depth.max_value();
    let interleaved = (0..plane).flat_map(|i| (0..3).map(move |c| quantize(d[c * plane + i], max)));
    let (w32, h32) = (w as u32, h as u32);
    let result = match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = interleaved.map(|v| v as u8).collect();
            ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, raw).expect("buffer sized").save(path)
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = interleaved.map(|v| v as u16).collect();
            ImageBuffer::<Rgb<u16>, _>::from_raw(w32, h32, raw).expect("buffer sized").save(path)
        }
    };
    result.map_err(|e| image_err(path, e))
}

/// Writes an `[H, W]` map as an 8-bit grayscale PNG, stretched so its
/// minimum is black and its maximum white.
pub fn save_gray_normalized<T: Element>(map: &[T], h: usize, w: usize, path: &Path) -> Result<()> {
    if map.len() != h * w {
        return Err(Error::shape(format!("{} values for a {h}x{w} map", map.len())));
    }
    let vals: Vec<f64> = map.iter().map(|v| v.to_f64_lossy()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let raw: Vec<u8> = vals.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
    ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized")
        .save(path)
        .map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        save_gray_normalized(&[0.0f32, 1.0, 0.5, 0.25], 2, 2, &p).unwrap();
        let err = load_image::<f32>(&p).unwrap_err().to_string();
        assert!(err.contains("RGB"), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_image::<f32>(Path::new("/nonexistent/x.png")).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.png"), "{err}");
    }
}
