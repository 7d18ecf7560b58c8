//! Data-side building blocks for spatio-temporal grounding: box and window
//! geometry, evaluation metrics, synthetic videos with their on-disk format,
//! and training-time frame sampling.

pub mod dataset;
pub mod geometry;
pub mod metrics;
pub mod sampling;
pub mod synth;

pub use geometry::{box_convert, box_giou, box_iou, temporal_iou, BoundingBox, BoxFormat, TemporalWindow, Tube};
pub use synth::VideoSample;
