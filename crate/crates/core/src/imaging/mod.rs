//! Image preprocessing: decoding, CLAHE contrast enhancement, bilinear
//! resizing, geometric augmentation and statistical normalization.
//!
//! Storage images are 8-bit grayscale; augmentation and normalization work on
//! float images in [0, 1].

mod augment;
mod clahe;
mod io;
mod resize;

pub use augment::{augment, augment_with, draw_augment_params, AugmentConfig, AugmentParams};
pub use clahe::{clahe, clip_histogram, ClaheConfig};
pub use io::{load_gray, save_pgm, save_png_gray, save_png_rgb};
pub use resize::resize_bilinear;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("empty image ({width}x{height})")]
    Empty { width: usize, height: usize },
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
    #[error("invalid imaging config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImagingError::Empty { width, height });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn constant(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Float working copy in [0, 1].
    pub fn to_float(&self) -> GrayImageF {
        GrayImageF {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        }
    }
}

/// Float grayscale working image; nominal range [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImageF {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImageF {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn to_u8(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

/// Floor applied to the standard deviation so constant images map to zeros.
pub const STD_FLOOR: f32 = 1e-7;

/// Per-image standardization to zero mean / unit variance, as a [1, H, W]
/// tensor plane.
pub fn normalize(img: &GrayImageF) -> Tensor<f32> {
    let n = img.pixels.len() as f32;
    let mean: f32 = img.pixels.iter().sum::<f32>() / n;
    let var: f32 = img.pixels.iter().map(|&p| (p - mean) * (p - mean)).sum::<f32>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    let data: Vec<f32> = img.pixels.iter().map(|&p| (p - mean) / std).collect();
    Tensor::new(vec![1, img.height, img.width], data).expect("image dims are positive")
}

/// Stacks per-image normalized planes into a [B, 1, H, W] batch.
pub fn normalize_batch(images: &[&GrayImageF]) -> Tensor<f32> {
    assert!(!images.is_empty(), "empty batch");
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert!(
            img.width == w && img.height == h,
            "mixed image sizes in batch"
        );
        data.extend_from_slice(normalize(img).data());
    }
    Tensor::new(vec![images.len(), 1, h, w], data).expect("consistent dims")
}

/// Deterministic preprocessing applied to every image (train and eval);
/// augmentation happens afterwards and only for training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub clahe: ClaheConfig,
    /// CLAHE at native resolution, then downscale (flag swaps the order).
    pub clahe_before_resize: bool,
    pub target_size: (usize, usize),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clahe: ClaheConfig::default(),
            clahe_before_resize: true,
            target_size: (256, 256),
        }
    }
}

/// CLAHE + resize in the configured order.
pub fn preprocess(img: &GrayImage, cfg: &PreprocessConfig) -> Result<GrayImage, ImagingError> {
    let (tw, th) = cfg.target_size;
    if cfg.clahe_before_resize {
        let enhanced = clahe(img, &cfg.clahe)?;
        resize_bilinear(&enhanced, tw, th)
    } else {
        let resized = resize_bilinear(img, tw, th)?;
        clahe(&resized, &cfg.clahe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_constant_image_is_all_zeros() {
        let img = GrayImage::constant(8, 4, 200).to_float();
        let t = normalize(&img);
        assert_eq!(t.shape(), &[1, 4, 8]);
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_hits_zero_mean_unit_std() {
        let img = GrayImage::from_fn(16, 16, |x, y| ((x * 13 + y * 31) % 251) as u8).to_float();
        let t = normalize(&img);
        let n = t.numel() as f64;
        let mean: f64 = t.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = t.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-5, "std {}", var.sqrt());
    }

    #[test]
    fn normalize_is_invariant_to_positive_affine_input_change() {
        let base = GrayImage::from_fn(12, 9, |x, y| ((x * 7 + y * 3) % 97) as u8).to_float();
        let mut scaled = base.clone();
        for p in scaled.pixels.iter_mut() {
            *p = 1.7 * *p + 0.25;
        }
        let a = normalize(&base);
        let b = normalize(&scaled);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn batch_stacks_planes() {
        let a = GrayImage::constant(4, 4, 10).to_float();
        let b = GrayImage::from_fn(4, 4, |x, _| (x * 60) as u8).to_float();
        let t = normalize_batch(&[&a, &b]);
        assert_eq!(t.shape(), &[2, 1, 4, 4]);
        assert!(t.data()[..16].iter().all(|&v| v == 0.0));
    }
}
