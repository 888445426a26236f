//! Fine-tuning and robustness benchmarking for box-promptable
//! segmentation models.
//!
//! The crate turns a binary ground-truth mask into a bounding-box prompt,
//! enlarges that prompt — randomly per side during training, by a fixed
//! amount during inference sweeps — and measures how DICE accuracy decays
//! as prompts get sloppier. Three segmenter backends share one interface:
//! a protocol adapter for an external foundation model, a compact
//! trainable surrogate for CPU-scale experiments, and an analytic oracle
//! that makes the whole evaluation harness exactly verifiable.

pub mod data;
pub mod error;
pub mod finetune;
pub mod geometry;
pub mod metrics;
pub mod parallel;
pub mod segmenter;
pub mod sweep;
pub mod synthetic;

pub use error::{DataError, GeometryError, MetricsError, SegmenterError, SweepError, TrainError};
pub use geometry::{BinaryMask, BoundingBox, Dimensions, PerturbationPolicy, ProbabilityMap};
pub use metrics::{CurvePoint, DiceScore};
