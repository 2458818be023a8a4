//! Desk-scale no-reference video quality assessment.
//!
//! The model couples a windowed-attention video backbone with two
//! per-position heads: a saliency branch that weights regions and a texture
//! branch that scores region-intrinsic quality. A fusion-window attention
//! module routes attention across the most correlated windows, a local
//! perception constraint keeps texture predictions independent of
//! neighboring regions, and the training objective combines a correlation
//! loss, a pairwise rank loss, and that constraint.


pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod fwa;
pub mod heads;
pub mod losses;
pub mod lpc;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;
pub mod tensor;

pub use error::{KvqError, Result};
