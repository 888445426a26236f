//! Bounding boxes, binary masks, and prompt perturbation.
//!
//! Boxes use an inclusive-min / exclusive-max pixel convention, so
//! `x_max - x_min` is the width in pixels. Perturbation only ever enlarges
//! a box (outward moves on each side) and the result is clipped to the
//! image bounds, which keeps every prompt valid for the segmenter.
//!
//! All functions here are pure; random draws come from an explicit `Rng`
//! parameter so callers own seeding.

use rand::Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::GeometryError;

/// Image width/height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dimensions {
    pub width: u32,
    pub height: u32,
}

impl Dimensions {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width >= 1 && height >= 1, "dimensions must be positive");
        Self { width, height }
    }

    /// Square dimensions, the common case for model input resolutions.
    pub fn square(side: u32) -> Self {
        Self::new(side, side)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Per-pixel boolean foreground flags, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    /// # Panics
    /// If `data.len() != width * height` or either dimension is zero.
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Self {
        assert!(width >= 1 && height >= 1, "mask dimensions must be positive");
        assert_eq!(
            data.len(),
            width as usize * height as usize,
            "mask data length must equal width*height"
        );
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self::new(width, height, vec![value; width as usize * height as usize])
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    /// Number of foreground pixels.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }
}

/// Per-pixel values in `[0, 1]`, row-major. The segmenter's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl ProbabilityMap {
    /// # Panics
    /// If the length mismatches or any value is outside `[0, 1]` / non-finite.
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert!(width >= 1 && height >= 1, "map dimensions must be positive");
        assert_eq!(
            data.len(),
            width as usize * height as usize,
            "map data length must equal width*height"
        );
        debug_assert!(
            data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "probabilities must be finite and within [0, 1]"
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

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Threshold into a binary mask; a pixel is foreground iff its
    /// probability is strictly greater than `threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.data.iter().map(|&p| p > threshold).collect(),
        )
    }
}

/// Axis-aligned box prompt, inclusive-min / exclusive-max pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, GeometryError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box covering the whole image.
    pub fn full_frame(dims: Dimensions) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: dims.width,
            y_max: dims.height,
        }
    }

    pub fn x_min(&self) -> u32 {
        self.x_min
    }

    pub fn y_min(&self) -> u32 {
        self.y_min
    }

    pub fn x_max(&self) -> u32 {
        self.x_max
    }

    pub fn y_max(&self) -> u32 {
        self.y_max
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    /// True when `other` lies entirely within `self`.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// True when the pixel (x, y) lies inside the box.
    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    /// True when the box satisfies the clipped-to(image) invariant.
    pub fn fits_within(&self, dims: Dimensions) -> bool {
        self.x_max <= dims.width && self.y_max <= dims.height
    }

    /// Intersection area with another box (0 when disjoint).
    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        u64::from(w) * u64::from(h)
    }

    /// Rasterize the box interior as a mask of the given dimensions.
    pub fn to_mask(&self, dims: Dimensions) -> BinaryMask {
        let mut mask = BinaryMask::filled(dims.width, dims.height, false);
        for y in self.y_min..self.y_max.min(dims.height) {
            for x in self.x_min..self.x_max.min(dims.width) {
                mask.set(x, y, true);
            }
        }
        mask
    }
}

// Boxes travel through manifests and reports as `[x_min, y_min, x_max, y_max]`.
impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.x_min, self.y_min, self.x_max, self.y_max].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x_min, y_min, x_max, y_max] = <[u32; 4]>::deserialize(deserializer)?;
        BoundingBox::new(x_min, y_min, x_max, y_max).map_err(D::Error::custom)
    }
}

/// How a prompt box is enlarged before it reaches the segmenter.
///
/// `Fixed` moves all four sides outward by the same number of pixels
/// (inference sweeps); `Variable` draws an independent uniform integer in
/// `[0, max_pixels]` per side (training).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationPolicy {
    None,
    Fixed { pixels: u32 },
    Variable { max_pixels: u32 },
}

impl PerturbationPolicy {
    /// Apply the policy to a box. The RNG is only consumed in
    /// `Variable` mode (four draws: left, top, right, bottom).
    pub fn apply<R: Rng>(&self, bbox: BoundingBox, image: Dimensions, rng: &mut R) -> BoundingBox {
        match *self {
            PerturbationPolicy::None => bbox,
            PerturbationPolicy::Fixed { pixels } => perturb_fixed(bbox, pixels, image),
            PerturbationPolicy::Variable { max_pixels } => {
                perturb_variable(bbox, max_pixels, rng, image)
            }
        }
    }

    pub fn magnitude(&self) -> u32 {
        match *self {
            PerturbationPolicy::None => 0,
            PerturbationPolicy::Fixed { pixels } => pixels,
            PerturbationPolicy::Variable { max_pixels } => max_pixels,
        }
    }
}

// Serialized form: `{ mode = "variable", magnitude = 50 }`. `magnitude`
// may be omitted for mode = "none".
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRepr {
    mode: String,
    #[serde(default)]
    magnitude: u32,
}

impl Serialize for PerturbationPolicy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mode = match self {
            PerturbationPolicy::None => "none",
            PerturbationPolicy::Fixed { .. } => "fixed",
            PerturbationPolicy::Variable { .. } => "variable",
        };
        PolicyRepr {
            mode: mode.to_string(),
            magnitude: self.magnitude(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PerturbationPolicy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PolicyRepr::deserialize(deserializer)?;
        match repr.mode.as_str() {
            "none" => Ok(PerturbationPolicy::None),
            "fixed" => Ok(PerturbationPolicy::Fixed {
                pixels: repr.magnitude,
            }),
            "variable" => Ok(PerturbationPolicy::Variable {
                max_pixels: repr.magnitude,
            }),
            other => Err(D::Error::custom(format!(
                "unknown perturbation mode `{other}` (expected none|fixed|variable)"
            ))),
        }
    }
}

/// Tightest axis-aligned box containing every foreground pixel.
pub fn extract_bbox(mask: &BinaryMask) -> Result<BoundingBox, GeometryError> {
    let mut x_min = u32::MAX;
    let mut y_min = u32::MAX;
    let mut x_max = 0u32;
    let mut y_max = 0u32;
    let width = mask.width() as usize;
    for (i, &fg) in mask.data().iter().enumerate() {
        if fg {
            let x = (i % width) as u32;
            let y = (i / width) as u32;
            x_min = x_min.min(x);
            y_min = y_min.min(y);
            x_max = x_max.max(x);
            y_max = y_max.max(y);
        }
    }
    if x_min == u32::MAX {
        return Err(GeometryError::EmptyMask);
    }
    // +1: inclusive pixel index to exclusive max.
    BoundingBox::new(x_min, y_min, x_max + 1, y_max + 1)
}

/// Move all four sides outward by exactly `p` pixels, then clip.
pub fn perturb_fixed(bbox: BoundingBox, p: u32, image: Dimensions) -> BoundingBox {
    expand(bbox, p, p, p, p, image)
}

/// Move each side outward by an independent uniform draw in `[0, n]`,
/// then clip. Draw order is left, top, right, bottom.
pub fn perturb_variable<R: Rng>(
    bbox: BoundingBox,
    n: u32,
    rng: &mut R,
    image: Dimensions,
) -> BoundingBox {
    let left = rng.random_range(0..=n);
    let top = rng.random_range(0..=n);
    let right = rng.random_range(0..=n);
    let bottom = rng.random_range(0..=n);
    expand(bbox, left, top, right, bottom, image)
}

fn expand(
    bbox: BoundingBox,
    left: u32,
    top: u32,
    right: u32,
    bottom: u32,
    image: Dimensions,
) -> BoundingBox {
    let x_min = bbox.x_min().saturating_sub(left);
    let y_min = bbox.y_min().saturating_sub(top);
    let x_max = bbox.x_max().saturating_add(right).min(image.width);
    let y_max = bbox.y_max().saturating_add(bottom).min(image.height);
    BoundingBox::new(x_min, y_min, x_max, y_max)
        .expect("outward expansion preserves box validity")
}

/// Scale a box between image resolutions. Min coordinates floor and max
/// coordinates ceil, so rescaling never loses foreground coverage and a
/// from -> to -> from round trip drifts each coordinate by at most one
/// pixel.
pub fn rescale_bbox(
    bbox: BoundingBox,
    from: Dimensions,
    to: Dimensions,
) -> Result<BoundingBox, GeometryError> {
    let sx = f64::from(to.width) / f64::from(from.width);
    let sy = f64::from(to.height) / f64::from(from.height);
    let x_min = (f64::from(bbox.x_min()) * sx).floor() as u32;
    let y_min = (f64::from(bbox.y_min()) * sy).floor() as u32;
    let x_max = ((f64::from(bbox.x_max()) * sx).ceil() as u32).min(to.width);
    let y_max = ((f64::from(bbox.y_max()) * sy).ceil() as u32).min(to.height);
    if x_min >= x_max || y_min >= y_max {
        return Err(GeometryError::DegenerateBox {
            x_min,
            y_min,
            x_max,
            y_max,
        });
    }
    BoundingBox::new(x_min, y_min, x_max, y_max)
}
