//! Dual prediction heads and the saliency ensemble.
//!
//! Both heads are per-position linear projections C -> 1 over the final
//! feature grid. The saliency branch's logits are fused with the per-block
//! significance maps, and a global softmax rescaled by T·H·W turns the fused
//! logits into a nonnegative weighting with mean one. The scalar quality is
//! the mean of the saliency-weighted texture map, so it always lies between
//! the extremes of the texture map.

use crate::error::{KvqError, Result};
use crate::tensor::{Tape, TensorId};
use std::sync::Arc;

/// Per-position linear projection of a `[T,H,W,C]` feature grid to a
/// `[T,H,W]` map. Used by both the texture and the saliency branch, with
/// independent parameters.
pub fn scalar_head(tape: &mut Tape, features: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(KvqError::shape(format!("scalar_head: need [T,H,W,C], got {shape:?}")));
    }
    let projected = tape.linear(features, w, Some(b))?;
    tape.reshape(projected, shape[..3].to_vec())
}

/// Brings a per-block significance map onto the common output grid: mean
/// pooling when the block grid is an integer multiple, trilinear resampling
/// otherwise.
pub fn to_common_grid(tape: &mut Tape, map: TensorId, common: [usize; 3]) -> Result<TensorId> {
    let shape = tape.shape(map).to_vec();
    if shape.len() != 3 {
        return Err(KvqError::shape(format!("to_common_grid: need rank 3, got {shape:?}")));
    }
    if shape == common {
        return Ok(map);
    }
    let integer_ratio = shape.iter().zip(&common).all(|(&s, &c)| c > 0 && s % c == 0);
    if integer_ratio {
        let window: Vec<usize> = shape.iter().zip(&common).map(|(&s, &c)| s / c).collect();
        tape.avg_pool(map, &window)
    } else {
        let resampled = tape.resample3d(map, &common)?;
        tape.avg_pool(resampled, &[1, 1, 1])
    }
}

/// Fuses the learned saliency logits with the per-block significance maps
/// (already on the common grid) using one learnable weight per source, then
/// normalizes with a global softmax rescaled to mean one:
/// `S = softmax(flatten(w0·logits + sum_l wl·map_l)) · T·H·W`.
pub fn ensemble_saliency(
    tape: &mut Tape,
    saliency_logits: TensorId,
    significance_maps: &[TensorId],
    weights: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(saliency_logits).to_vec();
    if shape.len() != 3 {
        return Err(KvqError::shape(format!(
            "ensemble_saliency: logits must be rank 3, got {shape:?}"
        )));
    }
    let n_sources = 1 + significance_maps.len();
    if tape.shape(weights) != [n_sources] {
        return Err(KvqError::shape(format!(
            "ensemble_saliency: {} weights for {} sources",
            tape.data(weights).len(),
            n_sources
        )));
    }
    let w0 = tape.index_select(weights, 0, Arc::new(vec![0]))?;
    let mut fused = tape.mul(saliency_logits, w0)?;
    for (l, &map) in significance_maps.iter().enumerate() {
        if tape.shape(map) != shape {
            return Err(KvqError::shape(format!(
                "ensemble_saliency: map {l} shape {:?} vs common {:?}",
                tape.shape(map),
                shape
            )));
        }
        let wl = tape.index_select(weights, 0, Arc::new(vec![l + 1]))?;
        let term = tape.mul(map, wl)?;
        fused = tape.add(fused, term)?;
    }
    let numel: usize = shape.iter().product();
    let flat = tape.reshape(fused, vec![numel])?;
    let soft = tape.softmax(flat, 0)?;
    let rescaled = tape.scale(soft, numel as f64);
    tape.reshape(rescaled, shape)
}

/// Scalar quality: the mean of the elementwise product of saliency and
/// texture maps. With mean-one saliency this is a weighted average of the
/// texture map.
pub fn aggregate_quality(tape: &mut Tape, saliency: TensorId, texture: TensorId) -> Result<TensorId> {
    if tape.shape(saliency) != tape.shape(texture) {
        return Err(KvqError::shape(format!(
            "aggregate_quality: {:?} vs {:?}",
            tape.shape(saliency),
            tape.shape(texture)
        )));
    }
    let weighted = tape.mul(saliency, texture)?;
    Ok(tape.mean_all(weighted))
}
