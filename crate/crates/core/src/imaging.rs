//! Slice decoding and preprocessing into model-ready tensors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: unsupported image format (expected png, jpg, jpeg or bmp)")]
    UnsupportedFormat { path: PathBuf },
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("invalid preprocessing config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

pub const SUPPORTED_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

pub fn is_supported_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Pixel storage: raw 8-bit intensities as decoded, or `[0, 1]` floats after resampling.
#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

/// Interleaved row-major image with one (grayscale) or three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Pixels,
}

impl SliceImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Pixels) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Invalid(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::Invalid(format!("{channels} channels; expected 1 or 3")));
        }
        let len = match &pixels {
            Pixels::U8(p) => p.len(),
            Pixels::F32(p) => {
                if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(ImagingError::Invalid(format!("float intensity {v} outside [0, 1]")));
                }
                p.len()
            }
        };
        if len != width * height * channels {
            return Err(ImagingError::Invalid(format!(
                "{len} values for a {width}x{height}x{channels} image"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn gray_u8(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, Pixels::U8(pixels))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &Pixels {
        &self.pixels
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn to_unit_f32(&self) -> Vec<f32> {
        match &self.pixels {
            Pixels::U8(p) => p.iter().map(|&v| v as f32 / 255.0).collect(),
            Pixels::F32(p) => p.clone(),
        }
    }
}

/// Decodes a PNG, JPEG or BMP slice. Grayscale files stay single-channel;
/// anything with color is decoded as RGB.
pub fn load_slice(path: &Path) -> Result<SliceImage> {
    if !is_supported_image(path) {
        return Err(ImagingError::UnsupportedFormat {
            path: path.to_path_buf(),
        });
    }
    let io_err = |source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let decoded = image::ImageReader::open(path)
        .map_err(io_err)?
        .with_guessed_format()
        .map_err(io_err)?
        .decode()
        .map_err(|e| ImagingError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if decoded.color().has_color() {
        SliceImage::new(w, h, 3, Pixels::U8(decoded.to_rgb8().into_raw()))
    } else {
        SliceImage::new(w, h, 1, Pixels::U8(decoded.to_luma8().into_raw()))
    }
}

/// Writes an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| ImagingError::Invalid(format!("{} bytes for {width}x{height}", pixels.len())))?;
    buf.save(path).map_err(|e| ImagingError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Source sample positions for each output coordinate: lower index, upper
/// index and the weight of the upper one. Half-pixel centers:
/// `src = (dst + 0.5) · in / out − 0.5`, clamped to the image.
fn sample_positions(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    (a + (b - a) * w).clamp(a.min(b), a.max(b))
}

/// Bilinear resampling to `width × height`. The result holds `[0, 1]` floats.
pub fn resize_bilinear_to(img: &SliceImage, width: usize, height: usize) -> Result<SliceImage> {
    if width == 0 || height == 0 {
        return Err(ImagingError::Invalid(format!("target size {width}x{height}")));
    }
    let src = img.to_unit_f32();
    let c = img.channels;
    let xs = sample_positions(img.width, width);
    let ys = sample_positions(img.height, height);
    let at = |x: usize, y: usize, ch: usize| src[(y * img.width + x) * c + ch] as f64;
    let mut out = Vec::with_capacity(width * height * c);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for ch in 0..c {
                let top = lerp(at(x0, y0, ch), at(x1, y0, ch), wx);
                let bottom = lerp(at(x0, y1, ch), at(x1, y1, ch), wx);
                out.push(lerp(top, bottom, wy) as f32);
            }
        }
    }
    SliceImage::new(width, height, c, Pixels::F32(out))
}

pub fn resize_bilinear(img: &SliceImage, target: usize) -> Result<SliceImage> {
    resize_bilinear_to(img, target, target)
}

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// `preprocess.*` settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            size: 224,
        }
    }
}

impl PreprocessConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(ImagingError::Config("preprocess.size must be at least 1".into()));
        }
        if self.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(ImagingError::Config(format!(
                "preprocess.std {:?} has a zero or non-finite component",
                self.std
            )));
        }
        Ok(())
    }
}

/// `[3 × H × W]` tensor: grayscale replicated to three channels, intensities
/// scaled to `[0, 1]`, then `(x − mean) / std` per channel.
pub fn to_model_tensor(img: &SliceImage, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor<f32>> {
    if let Some(s) = std.iter().find(|&&s| s == 0.0 || !s.is_finite()) {
        return Err(ImagingError::Config(format!("std component {s} is not usable")));
    }
    let unit = img.to_unit_f32();
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut out = Vec::with_capacity(3 * w * h);
    for ch in 0..3 {
        let src_ch = if c == 1 { 0 } else { ch };
        out.extend((0..w * h).map(|i| (unit[i * c + src_ch] - mean[ch]) / std[ch]));
    }
    Tensor::new(vec![3, h, w], out).map_err(|e| ImagingError::Invalid(e.to_string()))
}

/// Inverse of [`to_model_tensor`], giving a three-channel `[0, 1]` image.
pub fn from_model_tensor(t: &Tensor<f32>, mean: [f32; 3], std: [f32; 3]) -> Result<SliceImage> {
    let [c, h, w] = t.shape() else {
        return Err(ImagingError::Invalid(format!("expected [3, H, W], got {:?}", t.shape())));
    };
    if *c != 3 {
        return Err(ImagingError::Invalid(format!("expected 3 channels, got {c}")));
    }
    let plane = w * h;
    let d = t.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + i] * std[ch] + mean[ch]).clamp(0.0, 1.0));
        }
    }
    SliceImage::new(*w, *h, 3, Pixels::F32(out))
}

/// Load, resize and normalize one slice file.
pub fn preprocess_slice(path: &Path, config: &PreprocessConfig) -> Result<Tensor<f32>> {
    config.validate()?;
    let img = load_slice(path)?;
    let resized = resize_bilinear(&img, config.size)?;
    to_model_tensor(&resized, config.mean, config.std)
}
