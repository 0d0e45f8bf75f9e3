//! Image decoding and per-channel plane extraction.
//!
//! Every decoded image is brought to three real-valued planes in the 8-bit
//! range `[0, 255]`, regardless of the source bit depth or channel layout.
//! No resizing is ever applied.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported image format for {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },
    #[error("corrupt image {path}: {detail}")]
    CorruptImage { path: PathBuf, detail: String },
    #[error("invalid plane: {0}")]
    InvalidPlane(String),
}

/// One channel of an image as a row-major grid of reals in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    /// Builds a plane, checking the length and the `[0, 255]` range.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::InvalidPlane(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 255.0) {
            return Err(ImageError::InvalidPlane(format!("value {v} outside [0, 255]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Png,
    Jpeg,
    /// Built in memory rather than decoded from a file.
    Memory,
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceFormat::Png => "png",
            SourceFormat::Jpeg => "jpeg",
            SourceFormat::Memory => "memory",
        })
    }
}

/// Three same-sized planes in R, G, B order.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    planes: [ImagePlane; 3],
    source_path: String,
    source_format: SourceFormat,
    grayscale_source: bool,
}

impl RgbImage {
    pub fn from_planes(
        r: ImagePlane,
        g: ImagePlane,
        b: ImagePlane,
        source_path: impl Into<String>,
    ) -> Result<Self, ImageError> {
        let dims = (r.width, r.height);
        if (g.width, g.height) != dims || (b.width, b.height) != dims {
            return Err(ImageError::InvalidPlane("channel planes differ in size".to_string()));
        }
        Ok(Self {
            planes: [r, g, b],
            source_path: source_path.into(),
            source_format: SourceFormat::Memory,
            grayscale_source: false,
        })
    }

    pub fn width(&self) -> usize {
        self.planes[0].width
    }

    pub fn height(&self) -> usize {
        self.planes[0].height
    }

    pub fn planes(&self) -> &[ImagePlane; 3] {
        &self.planes
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn source_format(&self) -> SourceFormat {
        self.source_format
    }

    /// True when the file had a single luminance channel that was replicated.
    pub fn grayscale_source(&self) -> bool {
        self.grayscale_source
    }
}

/// Splits an image into its R, G and B planes.
pub fn to_planes(img: RgbImage) -> (ImagePlane, ImagePlane, ImagePlane) {
    let [r, g, b] = img.planes;
    (r, g, b)
}

/// Decodes a PNG or JPEG file into three `[0, 255]` planes.
///
/// Grayscale sources are replicated across the three channels, alpha is
/// dropped and 16-bit samples are rescaled by `1/257`.
pub fn decode_image(path: impl AsRef<Path>) -> Result<RgbImage, ImageError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(ImageError::FileNotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| ImageError::CorruptImage {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let format = image::guess_format(&bytes).map_err(|e| ImageError::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let source_format = match format {
        ImageFormat::Png => SourceFormat::Png,
        ImageFormat::Jpeg => SourceFormat::Jpeg,
        other => {
            return Err(ImageError::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("{other:?}"),
            })
        }
    };
    let decoded = image::load_from_memory_with_format(&bytes, format).map_err(|e| ImageError::CorruptImage {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let grayscale_source = !decoded.color().has_color();
    let mut img = planes_from_dynamic(&decoded, path)?;
    img.source_format = source_format;
    img.grayscale_source = grayscale_source;
    Ok(img)
}

fn planes_from_dynamic(decoded: &DynamicImage, path: &Path) -> Result<RgbImage, ImageError> {
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let n = width * height;
    let mut channels = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    let sixteen_bit = matches!(
        decoded,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    if sixteen_bit {
        for px in decoded.to_rgb16().pixels() {
            for (c, v) in px.0.iter().enumerate() {
                channels[c].push(f64::from(*v) / 257.0);
            }
        }
    } else {
        for px in decoded.to_rgb8().pixels() {
            for (c, v) in px.0.iter().enumerate() {
                channels[c].push(f64::from(*v));
            }
        }
    }
    let [r, g, b] = channels;
    RgbImage::from_planes(
        ImagePlane::new(width, height, r)?,
        ImagePlane::new(width, height, g)?,
        ImagePlane::new(width, height, b)?,
        path.to_string_lossy(),
    )
}
