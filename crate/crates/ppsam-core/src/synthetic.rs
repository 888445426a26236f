//! Synthetic shape datasets for CPU-scale experiments and tests.
//!
//! Each sample is a noisy dark background with one bright primary
//! rectangle (the ground truth) and optionally a few smaller distractor
//! rectangles that are *not* part of the ground truth. A segmenter
//! therefore cannot rely on brightness alone once the prompt box grows
//! loose; the prompt has to disambiguate.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::DataError;
use crate::geometry::{BinaryMask, BoundingBox};

/// Parameters of a generated shape dataset.
#[derive(Debug, Clone)]
pub struct ShapeDatasetSpec {
    pub count: usize,
    pub image_size: u32,
    /// Primary rectangle side length range, in pixels.
    pub primary_side: (u32, u32),
    /// Number of distractor rectangles per image.
    pub distractors: usize,
    /// Distractor side length range, in pixels.
    pub distractor_side: (u32, u32),
    /// Peak-to-peak uniform pixel noise, in intensity levels.
    pub noise: u8,
}

impl Default for ShapeDatasetSpec {
    fn default() -> Self {
        Self {
            count: 100,
            image_size: 128,
            primary_side: (28, 60),
            distractors: 1,
            distractor_side: (10, 22),
            noise: 24,
        }
    }
}

/// One generated sample, in memory.
#[derive(Debug, Clone)]
pub struct ShapeSample {
    pub image: image::RgbImage,
    pub mask: image::GrayImage,
    pub gt_box: BoundingBox,
}

impl ShapeSample {
    /// Ground-truth mask as boolean grid.
    pub fn binary_mask(&self) -> BinaryMask {
        BinaryMask::new(
            self.mask.width(),
            self.mask.height(),
            self.mask.pixels().map(|p| p.0[0] > 127).collect(),
        )
    }
}

fn place_rect(rng: &mut ChaCha20Rng, image_size: u32, side: (u32, u32)) -> BoundingBox {
    let w = rng.random_range(side.0..=side.1).min(image_size - 2);
    let h = rng.random_range(side.0..=side.1).min(image_size - 2);
    let x0 = rng.random_range(1..image_size - w);
    let y0 = rng.random_range(1..image_size - h);
    BoundingBox::new(x0, y0, x0 + w, y0 + h).expect("placement keeps boxes valid")
}

/// Generate one sample. The sample index is folded into the seed so that
/// datasets are reproducible and samples independent.
pub fn generate_sample(spec: &ShapeDatasetSpec, seed: u64, index: u64) -> ShapeSample {
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    let size = spec.image_size;

    let background = rng.random_range(25..60u8);
    let primary_level = rng.random_range(170..=240u8);
    let gt_box = place_rect(&mut rng, size, spec.primary_side);

    let mut distractor_boxes = Vec::new();
    let mut attempts = 0;
    while distractor_boxes.len() < spec.distractors && attempts < 50 {
        attempts += 1;
        let candidate = place_rect(&mut rng, size, spec.distractor_side);
        if candidate.intersection_area(&gt_box) == 0
            && distractor_boxes
                .iter()
                .all(|b: &BoundingBox| candidate.intersection_area(b) == 0)
        {
            distractor_boxes.push(candidate);
        }
    }

    let mut image = image::RgbImage::new(size, size);
    let mut mask = image::GrayImage::new(size, size);
    let noise_span = spec.noise as i32;
    for y in 0..size {
        for x in 0..size {
            let mut level = background;
            if gt_box.contains_pixel(x, y) {
                level = primary_level;
                mask.put_pixel(x, y, image::Luma([255]));
            } else if distractor_boxes.iter().any(|b| b.contains_pixel(x, y)) {
                level = rng.random_range(150..=225u8).max(primary_level.saturating_sub(60));
            }
            let noise = if noise_span > 0 {
                rng.random_range(-noise_span..=noise_span)
            } else {
                0
            };
            let value = (i32::from(level) + noise).clamp(0, 255) as u8;
            image.put_pixel(x, y, image::Rgb([value, value, value]));
        }
    }

    ShapeSample {
        image,
        mask,
        gt_box,
    }
}

/// Generate `spec.count` samples in memory.
pub fn generate_samples(spec: &ShapeDatasetSpec, seed: u64) -> Vec<ShapeSample> {
    (0..spec.count as u64)
        .map(|i| generate_sample(spec, seed, i))
        .collect()
}

/// Write a dataset under `<root>/<name>/{images,masks}` in the layout the
/// manifest loader expects. Sample ids are zero-padded indices.
pub fn write_shape_dataset(
    root: &Path,
    name: &str,
    spec: &ShapeDatasetSpec,
    seed: u64,
) -> Result<(), DataError> {
    let base = root.join(name);
    let images = base.join("images");
    let masks = base.join("masks");
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    for (i, sample) in generate_samples(spec, seed).into_iter().enumerate() {
        let stem = format!("sample_{i:04}");
        let image_path = images.join(format!("{stem}.png"));
        sample.image.save(&image_path).map_err(|e| DataError::CorruptFile {
            path: image_path.clone(),
            reason: e.to_string(),
        })?;
        let mask_path = masks.join(format!("{stem}.png"));
        sample.mask.save(&mask_path).map_err(|e| DataError::CorruptFile {
            path: mask_path.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

/// A test set of plain rectangles with no distractors and no noise:
/// the ground-truth mask is exactly the primary rectangle, so overlap
/// scores against box prompts have closed forms.
pub fn rectangle_spec(count: usize, image_size: u32) -> ShapeDatasetSpec {
    ShapeDatasetSpec {
        count,
        image_size,
        primary_side: (image_size / 8, image_size / 2),
        distractors: 0,
        noise: 0,
        ..ShapeDatasetSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::extract_bbox;

    #[test]
    fn generation_is_deterministic() {
        let spec = ShapeDatasetSpec::default();
        let a = generate_sample(&spec, 7, 3);
        let b = generate_sample(&spec, 7, 3);
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.mask.as_raw(), b.mask.as_raw());
        assert_eq!(a.gt_box, b.gt_box);
        let c = generate_sample(&spec, 8, 3);
        assert_ne!(a.image.as_raw(), c.image.as_raw());
    }

    #[test]
    fn mask_matches_gt_box_exactly() {
        let spec = ShapeDatasetSpec::default();
        for i in 0..10 {
            let sample = generate_sample(&spec, 11, i);
            let mask = sample.binary_mask();
            let bbox = extract_bbox(&mask).unwrap();
            assert_eq!(bbox, sample.gt_box);
            assert_eq!(
                mask.foreground_count() as u64,
                sample.gt_box.area(),
                "mask must be exactly the primary rectangle"
            );
        }
    }

    #[test]
    fn distractors_do_not_touch_the_primary() {
        let spec = ShapeDatasetSpec {
            distractors: 3,
            ..ShapeDatasetSpec::default()
        };
        for i in 0..5 {
            let sample = generate_sample(&spec, 13, i);
            let mask = sample.binary_mask();
            // Every mask pixel is inside the gt box even with distractors
            // present in the image.
            for y in 0..mask.height() {
                for x in 0..mask.width() {
                    if mask.get(x, y) {
                        assert!(sample.gt_box.contains_pixel(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn writes_loadable_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = ShapeDatasetSpec {
            count: 3,
            ..ShapeDatasetSpec::default()
        };
        write_shape_dataset(tmp.path(), "shapes", &spec, 1).unwrap();
        assert!(tmp.path().join("shapes/images/sample_0000.png").exists());
        assert!(tmp.path().join("shapes/masks/sample_0002.png").exists());
    }
}
