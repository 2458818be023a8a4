//! Data plumbing: frame sampling and resizing, synthetic distorted clips
//! with known region-wise quality, and region-annotation files.

pub mod lpvq;
pub mod sampling;
pub mod synth;
