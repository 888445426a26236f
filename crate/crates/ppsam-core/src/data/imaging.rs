//! Pixel-level sample preparation: resizing, normalization, mask
//! binarization, and restoring predictions to original resolution.
//!
//! Images and predicted probability maps resize bilinearly; ground-truth
//! masks resize nearest-neighbor so binarization never sees phantom gray
//! pixels. A prediction only counts as foreground when its probability is
//! strictly greater than the threshold.

use std::path::Path;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::geometry::{BinaryMask, Dimensions, ProbabilityMap};

use super::SampleRecord;

/// Fraction of a mask's maximum intensity above which a pixel counts as
/// foreground.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// Probability above which a restored prediction pixel counts as
/// foreground.
pub const DEFAULT_RESTORE_THRESHOLD: f64 = 0.5;

/// Per-channel normalization constants of the segmenter backbone. The
/// data pipeline treats them as opaque; each backend supplies its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// No-op normalization: raw [0, 1] channel values.
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Scales [0, 1] channels to [-1, 1].
    pub fn centered() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Normalized CHW pixel tensor (3 channels).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            3 * width as usize * height as usize,
            "image tensor must hold 3 channels"
        );
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> Dimensions {
        Dimensions::new(self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel plane as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.width as usize * self.height as usize;
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// A sample ready for the segmenter.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: ImageTensor,
    pub mask: BinaryMask,
    pub original_size: Dimensions,
}

fn open_image(path: &Path) -> Result<image::DynamicImage, DataError> {
    image::open(path).map_err(|e| DataError::CorruptFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Binarize a grayscale mask image at `threshold` of its maximum
/// intensity. An all-zero mask stays empty.
fn binarize(gray: &image::GrayImage, threshold: f64) -> BinaryMask {
    let max = gray.pixels().map(|p| p.0[0]).max().unwrap_or(0);
    let cut = threshold * f64::from(max);
    BinaryMask::new(
        gray.width(),
        gray.height(),
        gray.pixels().map(|p| f64::from(p.0[0]) > cut).collect(),
    )
}

/// Load, resize, normalize, and binarize one sample.
///
/// The image resizes bilinearly to `target` and normalizes per channel;
/// the mask resizes nearest-neighbor and binarizes at `mask_threshold` of
/// its maximum intensity. The original size is preserved for scoring.
pub fn prepare_sample(
    record: &SampleRecord,
    target: Dimensions,
    mask_threshold: f64,
    norm: &Normalization,
) -> Result<PreparedSample, DataError> {
    let image = open_image(&record.image_path)?.into_rgb8();
    let resized = if image.dimensions() == (target.width, target.height) {
        image
    } else {
        image::imageops::resize(&image, target.width, target.height, FilterType::Triangle)
    };
    let plane = target.pixel_count();
    let mut data = vec![0.0; 3 * plane];
    for (i, pixel) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (f64::from(pixel.0[c]) / 255.0 - norm.mean[c]) / norm.std[c];
        }
    }

    let mask_img = open_image(&record.mask_path)?.into_luma8();
    let mask_resized = if mask_img.dimensions() == (target.width, target.height) {
        mask_img
    } else {
        image::imageops::resize(&mask_img, target.width, target.height, FilterType::Nearest)
    };

    Ok(PreparedSample {
        image: ImageTensor::new(target.width, target.height, data),
        mask: binarize(&mask_resized, mask_threshold),
        original_size: record.original_dimensions(),
    })
}

/// Load the ground-truth mask at its stored resolution, binarized.
pub fn load_mask_original(
    record: &SampleRecord,
    mask_threshold: f64,
) -> Result<BinaryMask, DataError> {
    let mask_img = open_image(&record.mask_path)?.into_luma8();
    Ok(binarize(&mask_img, mask_threshold))
}

/// Bilinear resize of a scalar field (half-pixel-center convention).
/// Returns the input unchanged when the dimensions already match, so the
/// identity case is exact.
pub fn resize_bilinear(map: &ProbabilityMap, to: Dimensions) -> ProbabilityMap {
    if map.dimensions() == to {
        return map.clone();
    }
    let (sw, sh) = (map.width() as usize, map.height() as usize);
    let src = map.data();
    let scale_x = sw as f64 / to.width as f64;
    let scale_y = sh as f64 / to.height as f64;
    let mut out = vec![0.0; to.pixel_count()];
    for oy in 0..to.height as usize {
        let fy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for ox in 0..to.width as usize {
            let fx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bottom = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[oy * to.width as usize + ox] = top * (1.0 - wy) + bottom * wy;
        }
    }
    ProbabilityMap::new(to.width, to.height, out)
}

/// Resize a model-resolution probability map back to the original image
/// size and threshold it into the final predicted mask. This is the only
/// path predictions take before scoring.
pub fn restore_to_original(
    probs: &ProbabilityMap,
    original_size: Dimensions,
    threshold: f64,
) -> BinaryMask {
    resize_bilinear(probs, original_size).threshold(threshold)
}
