//! Local perception constraint.
//!
//! The input clip is sliced into spatiotemporal patches matching the model's
//! total output stride, so patch (i,j,k) corresponds to exactly one texture
//! cell. Each patch runs through the model on its own — no cross-patch
//! information can flow — and the reassembled per-patch texture map is pulled
//! toward the full-forward texture map by a cosine distance.

use crate::backbone::WindowMode;
use crate::error::{KvqError, Result};
use crate::model::{video_dims, KvqModel};
use crate::params::BoundParams;
use crate::tensor::{Tape, Tensor, TensorId};

/// Exact tiling of a clip into stride-sized sub-videos, indexed like the
/// texture grid.
pub struct PatchGrid {
    /// Patches in row-major (t, h, w) cell order, each `[s_t, s_h, s_w, 3]`.
    pub patches: Vec<Tensor>,
    /// Texture-grid dims this tiling maps onto.
    pub grid: [usize; 3],
    pub stride: [usize; 3],
}

/// Slices `video` into non-overlapping patches of size `stride`; every
/// dimension must divide exactly (no implicit padding).
pub fn slice_patches(video: &Tensor, stride: [usize; 3]) -> Result<PatchGrid> {
    let dims = video_dims(video)?;
    for d in 0..3 {
        if stride[d] == 0 || dims[d] % stride[d] != 0 {
            return Err(KvqError::shape(format!(
                "video {dims:?} not divisible by patch stride {stride:?}"
            )));
        }
    }
    let grid = [dims[0] / stride[0], dims[1] / stride[1], dims[2] / stride[2]];
    let data = video.data();
    let [_, hv, wv] = dims;
    let mut patches = Vec::with_capacity(grid.iter().product());
    for gt in 0..grid[0] {
        for gh in 0..grid[1] {
            for gw in 0..grid[2] {
                let mut buf = Vec::with_capacity(stride.iter().product::<usize>() * 3);
                for it in 0..stride[0] {
                    for ih in 0..stride[1] {
                        let t = gt * stride[0] + it;
                        let h = gh * stride[1] + ih;
                        let w0 = gw * stride[2];
                        let base = ((t * hv + h) * wv + w0) * 3;
                        buf.extend_from_slice(&data[base..base + stride[2] * 3]);
                    }
                }
                patches.push(Tensor::new(vec![stride[0], stride[1], stride[2], 3], buf)?);
            }
        }
    }
    Ok(PatchGrid { patches, grid, stride })
}

/// Inverse of [`slice_patches`], for round-trip checks.
pub fn reassemble_patches(grid: &PatchGrid) -> Result<Tensor> {
    let [gt, gh, gw] = grid.grid;
    let [st, sh, sw] = grid.stride;
    let dims = [gt * st, gh * sh, gw * sw];
    let mut data = vec![0.0; dims[0] * dims[1] * dims[2] * 3];
    for (p, patch) in grid.patches.iter().enumerate() {
        let pw = p % gw;
        let ph = (p / gw) % gh;
        let pt = p / (gw * gh);
        let pd = patch.data();
        for it in 0..st {
            for ih in 0..sh {
                let t = pt * st + it;
                let h = ph * sh + ih;
                let w0 = pw * sw;
                let dst = ((t * dims[1] + h) * dims[2] + w0) * 3;
                let src = ((it * sh + ih) * sw) * 3;
                data[dst..dst + sw * 3].copy_from_slice(&pd[src..src + sw * 3]);
            }
        }
    }
    Tensor::new(vec![dims[0], dims[1], dims[2], 3], data)
}

/// Runs the model on every patch independently and reassembles the scalar
/// texture outputs into a `[T,H,W]` map on the texture grid. The `bound`
/// parameter set is shared with the full forward, so the same weights see
/// both views; bind a non-trainable set to freeze this branch.
pub fn patchwise_texture(
    model: &KvqModel,
    tape: &mut Tape,
    grid: &PatchGrid,
    bound: &BoundParams,
) -> Result<TensorId> {
    let expect_stride = model.cfg.total_stride();
    if grid.stride != expect_stride {
        return Err(KvqError::contract(format!(
            "patch stride {:?} must equal the model output stride {:?}",
            grid.stride, expect_stride
        )));
    }
    let plan = model.plan(grid.stride, WindowMode::Clamp)?;
    let mut cells = Vec::with_capacity(grid.patches.len());
    for patch in &grid.patches {
        let vid = tape.constant(patch.clone());
        let q = model.forward_texture(tape, vid, &plan, bound)?;
        if tape.data(q).len() != 1 {
            return Err(KvqError::contract(format!(
                "per-patch texture output has shape {:?}, expected one cell",
                tape.shape(q)
            )));
        }
        cells.push(tape.reshape(q, vec![1])?);
    }
    let stacked = tape.concat(&cells, 0)?;
    tape.reshape(stacked, grid.grid.to_vec())
}

/// Norm product floor guarding the cosine against division by zero.
pub const LPC_EPS: f64 = 1e-8;

/// A loss term plus a flag marking inputs where the value is a defined
/// fallback rather than a computed statistic.
pub struct LossTerm {
    pub value: TensorId,
    pub degenerate: bool,
}

/// Cosine distance between the full-forward texture map and the per-patch
/// map: `1 - <Q, Q̂> / max(‖Q‖·‖Q̂‖, ε)`, in `[0, 2]`. When both maps are
/// numerically zero the loss is 0 with the degenerate flag set.
pub fn lpc_loss(tape: &mut Tape, q: TensorId, q_hat: TensorId) -> Result<LossTerm> {
    if tape.shape(q) != tape.shape(q_hat) {
        return Err(KvqError::shape(format!(
            "lpc_loss: {:?} vs {:?}",
            tape.shape(q),
            tape.shape(q_hat)
        )));
    }
    let norm_sq = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>();
    let nq = norm_sq(tape.data(q)).sqrt();
    let nqh = norm_sq(tape.data(q_hat)).sqrt();
    if nq < LPC_EPS && nqh < LPC_EPS {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(LossTerm { value: zero, degenerate: true });
    }
    let prod = tape.mul(q, q_hat)?;
    let dot = tape.sum_all(prod);
    let qq = tape.mul(q, q)?;
    let qq_sum = tape.sum_all(qq);
    let nq_t = tape.sqrt(qq_sum);
    let hh = tape.mul(q_hat, q_hat)?;
    let hh_sum = tape.sum_all(hh);
    let nqh_t = tape.sqrt(hh_sum);
    let denom_raw = tape.mul(nq_t, nqh_t)?;
    let denom = tape.clamp_min(denom_raw, LPC_EPS);
    let cosine = tape.div(dot, denom)?;
    let neg = tape.neg(cosine);
    let value = tape.add_const(neg, 1.0);
    Ok(LossTerm { value, degenerate: false })
}
