//! Fusion-window attention.
//!
//! Feature grids are split into non-overlapping spatiotemporal windows. A
//! correlated-window selection step scores every window pair through a
//! patch-level attention map and routes each window to its top-k peers.
//! Intra-window attention runs self-attention inside each window; cross-window
//! attention lets each window's queries attend over the keys/values gathered
//! from its routed peers. The module output is the elementwise sum of the two
//! branches, and the patch-correlation map doubles as a per-patch significance
//! signal for the saliency ensemble.

use std::sync::Arc;

use crate::error::{KvqError, Result};
use crate::tensor::{Tape, TensorId};

/// Window decomposition of a `[T, H, W]` grid: row-major windows of shape
/// `[w_t, w_h, w_w]`, each flattened row-major to `window_len` slots.
#[derive(Debug)]
pub struct WindowLayout {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub n_windows: usize,
    pub window_len: usize,
    /// slot index (window-major) -> grid position (flat, channel-free)
    slot_to_pos: Vec<usize>,
    /// grid position (flat) -> slot index
    pos_to_slot: Vec<usize>,
}

impl WindowLayout {
    pub fn new(grid: [usize; 3], window: [usize; 3]) -> Result<Self> {
        for d in 0..3 {
            if window[d] == 0 || grid[d] % window[d] != 0 {
                return Err(KvqError::shape(format!(
                    "window {window:?} does not tile grid {grid:?}"
                )));
            }
        }
        let counts = [grid[0] / window[0], grid[1] / window[1], grid[2] / window[2]];
        let n_windows = counts.iter().product();
        let window_len = window.iter().product();
        let total = grid.iter().product::<usize>();
        let mut slot_to_pos = Vec::with_capacity(total);
        for nt in 0..counts[0] {
            for nh in 0..counts[1] {
                for nw in 0..counts[2] {
                    for it in 0..window[0] {
                        for ih in 0..window[1] {
                            for iw in 0..window[2] {
                                let t = nt * window[0] + it;
                                let h = nh * window[1] + ih;
                                let w = nw * window[2] + iw;
                                slot_to_pos.push((t * grid[1] + h) * grid[2] + w);
                            }
                        }
                    }
                }
            }
        }
        let mut pos_to_slot = vec![0; total];
        for (slot, &pos) in slot_to_pos.iter().enumerate() {
            pos_to_slot[pos] = slot;
        }
        Ok(WindowLayout { grid, window, n_windows, window_len, slot_to_pos, pos_to_slot })
    }

    /// Gather indices taking a `[T,H,W,C]` map to `[N_w, M, C]` windows.
    pub fn partition_indices(&self, channels: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.slot_to_pos.len() * channels);
        for &pos in &self.slot_to_pos {
            for c in 0..channels {
                idx.push(pos * channels + c);
            }
        }
        idx
    }

    /// Gather indices taking `[N_w, M, C]` windows back to `[T,H,W,C]`.
    pub fn unpartition_indices(&self, channels: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.pos_to_slot.len() * channels);
        for &slot in &self.pos_to_slot {
            for c in 0..channels {
                idx.push(slot * channels + c);
            }
        }
        idx
    }

    pub fn slot_position(&self, window: usize, slot: usize) -> usize {
        self.slot_to_pos[window * self.window_len + slot]
    }
}

/// Feature grid reindexed into windows, with the inverse mapping attached.
pub struct WindowPartition {
    /// `[N_w, M, C]` window tensor on the tape.
    pub windows: TensorId,
    pub channels: usize,
    pub layout: Arc<WindowLayout>,
}

/// Splits a `[T,H,W,C]` feature map into non-overlapping windows. Lossless:
/// [`unpartition_windows`] reconstructs the map exactly.
pub fn partition_windows(
    tape: &mut Tape,
    x: TensorId,
    layout: Arc<WindowLayout>,
) -> Result<WindowPartition> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(KvqError::shape(format!("partition: need [T,H,W,C], got {shape:?}")));
    }
    if shape[..3] != layout.grid {
        return Err(KvqError::shape(format!(
            "partition: grid {:?} vs layout {:?}",
            &shape[..3],
            layout.grid
        )));
    }
    let channels = shape[3];
    let idx = Arc::new(layout.partition_indices(channels));
    let windows = tape.gather_flat(
        x,
        idx,
        vec![layout.n_windows, layout.window_len, channels],
    )?;
    Ok(WindowPartition { windows, channels, layout })
}

/// Inverse of [`partition_windows`] for any `[N_w, M, C]` tensor laid out by
/// the same window scheme.
pub fn unpartition_windows(
    tape: &mut Tape,
    y: TensorId,
    layout: &WindowLayout,
    channels: usize,
) -> Result<TensorId> {
    let idx = Arc::new(layout.unpartition_indices(channels));
    let [t, h, w] = layout.grid;
    tape.gather_flat(y, idx, vec![t, h, w, channels])
}

/// Query/key/value/output projection weights for one attention branch, each
/// `[C, C]` without bias.
#[derive(Clone, Copy)]
pub struct AttnProjections {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

/// Per-block routing products: the patch-correlation map, its window-level
/// pooling, and the selected peer indices.
pub struct CorrelationBundle {
    /// Row-stochastic `[N_w·M, N_w·M]` patch-correlation map.
    pub i_p: TensorId,
    /// `[N_w, N_w]` window-correlation map (M×M block means of `i_p`).
    pub i_w: TensorId,
    /// For each window, its k most correlated peers (self excluded), ties
    /// broken toward the smaller window index.
    pub idx: Vec<Vec<usize>>,
    pub layout: Arc<WindowLayout>,
}

/// Correlation projections applied to the windows, kept for the
/// cross-window attention that consumes them.
pub struct CwsOutput {
    pub bundle: CorrelationBundle,
    pub queries: TensorId,
    pub keys: TensorId,
    pub values: TensorId,
}

/// Correlated-window selection: projects windows to queries/keys/values,
/// forms the patch-correlation map by row-softmax of the flattened Q·Kᵀ,
/// pools it to window level, and picks each row's top-k peers.
pub fn cws(
    tape: &mut Tape,
    wp: &WindowPartition,
    proj: &AttnProjections,
    k: usize,
) -> Result<CwsOutput> {
    let n_w = wp.layout.n_windows;
    let m = wp.layout.window_len;
    if k >= n_w {
        return Err(KvqError::config(format!("cws: top_k {k} must be < {n_w} windows")));
    }
    let c = wp.channels;
    let q = tape.linear(wp.windows, proj.wq, None)?;
    let key = tape.linear(wp.windows, proj.wk, None)?;
    let v = tape.linear(wp.windows, proj.wv, None)?;

    let qf = tape.reshape(q, vec![n_w * m, c])?;
    let kf = tape.reshape(key, vec![n_w * m, c])?;
    let kt = tape.transpose2d(kf)?;
    let scores = tape.matmul(qf, kt)?;
    let i_p = tape.softmax(scores, 1)?;
    let i_w = tape.avg_pool(i_p, &[m, m])?;
    let idx = top_k_rows(tape.data(i_w), n_w, k);

    Ok(CwsOutput {
        bundle: CorrelationBundle { i_p, i_w, idx, layout: Arc::clone(&wp.layout) },
        queries: q,
        keys: key,
        values: v,
    })
}

/// Top-k peers per row of a row-major `n×n` score matrix, excluding the
/// diagonal; ties go to the smaller column index.
pub fn top_k_rows(scores: &[f64], n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|r| {
            let row = &scores[r * n..(r + 1) * n];
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != r).collect();
            cand.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            cand.truncate(k);
            cand
        })
        .collect()
}

/// One attention branch's output plus its softmax rows (for conservation
/// checks), one attention tensor per head.
pub struct AttnOutput {
    pub features: TensorId,
    pub attn: Vec<TensorId>,
}

/// Intra-window attention: per-window multi-head self-attention with
/// 1/sqrt(C/heads) scaling, reassembled to the feature grid.
pub fn iwa(
    tape: &mut Tape,
    wp: &WindowPartition,
    proj: &AttnProjections,
    heads: usize,
) -> Result<AttnOutput> {
    let c = wp.channels;
    if heads == 0 || c % heads != 0 {
        return Err(KvqError::config(format!("iwa: channels {c} not divisible by {heads} heads")));
    }
    let q = tape.linear(wp.windows, proj.wq, None)?;
    let k = tape.linear(wp.windows, proj.wk, None)?;
    let v = tape.linear(wp.windows, proj.wv, None)?;
    let (ctx, attn) = multi_head_attention(tape, q, k, v, heads)?;
    let out = tape.linear(ctx, proj.wo, None)?;
    let features = unpartition_windows(tape, out, &wp.layout, c)?;
    Ok(AttnOutput { features, attn })
}

/// Cross-window attention: each window's queries attend over the keys and
/// values gathered from its routed windows (k·M key slots per window).
/// Gradients flow only into the gathered windows' keys/values. `wo` is the
/// branch's output projection.
pub fn cwa(
    tape: &mut Tape,
    wp: &WindowPartition,
    cws_out: &CwsOutput,
    wo: TensorId,
    heads: usize,
) -> Result<AttnOutput> {
    let c = wp.channels;
    if heads == 0 || c % heads != 0 {
        return Err(KvqError::config(format!("cwa: channels {c} not divisible by {heads} heads")));
    }
    let n_w = wp.layout.n_windows;
    let m = wp.layout.window_len;
    let idx = &cws_out.bundle.idx;
    let k = idx.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(KvqError::contract("cwa: empty routing".to_string()));
    }
    let mut flat = Vec::with_capacity(n_w * k);
    for row in idx {
        if row.len() != k {
            return Err(KvqError::contract("cwa: ragged routing rows".to_string()));
        }
        for &j in row {
            if j >= n_w {
                return Err(KvqError::contract(format!("cwa: routed window {j} out of range")));
            }
            flat.push(j);
        }
    }
    let flat = Arc::new(flat);
    let kg = tape.index_select(cws_out.keys, 0, Arc::clone(&flat))?;
    let vg = tape.index_select(cws_out.values, 0, flat)?;
    let kg = tape.reshape(kg, vec![n_w, k * m, c])?;
    let vg = tape.reshape(vg, vec![n_w, k * m, c])?;
    let (ctx, attn) = multi_head_attention(tape, cws_out.queries, kg, vg, heads)?;
    let out = tape.linear(ctx, wo, None)?;
    let features = unpartition_windows(tape, out, &wp.layout, c)?;
    Ok(AttnOutput { features, attn })
}

/// Scaled dot-product attention per head over batched windows:
/// q `[B, Mq, C]`, k/v `[B, Mk, C]` give `[B, Mq, C]` plus per-head rows.
fn multi_head_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
) -> Result<(TensorId, Vec<TensorId>)> {
    let c = *tape.shape(q).last().unwrap();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut parts = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = Arc::new((h * dh..(h + 1) * dh).collect::<Vec<_>>());
        let qh = tape.index_select(q, 2, Arc::clone(&cols))?;
        let kh = tape.index_select(k, 2, Arc::clone(&cols))?;
        let vh = tape.index_select(v, 2, cols)?;
        let scores = tape.bmm(qh, kh, true)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled, 2)?;
        let ctx = tape.bmm(attn, vh, false)?;
        parts.push(ctx);
        attns.push(attn);
    }
    let ctx = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 2)? };
    Ok((ctx, attns))
}

/// Projection weights for both branches of the fusion module.
#[derive(Clone, Copy)]
pub struct FwaParams {
    /// Correlation projections: drive routing and the cross-window branch.
    pub corr: AttnProjections,
    /// Intra-window branch projections.
    pub intra: AttnProjections,
}

/// Full fusion-window attention result.
pub struct FwaOutput {
    /// `[T,H,W,C]` fused features: intra plus cross branch, elementwise.
    pub features: TensorId,
    pub bundle: CorrelationBundle,
    pub iwa_attn: Vec<TensorId>,
    pub cwa_attn: Vec<TensorId>,
}

/// Runs selection plus both attention branches and sums them. `top_k` is
/// clamped to `N_w - 1`; with a single window the cross branch vanishes and
/// the output is the intra branch alone.
pub fn fwa_forward(
    tape: &mut Tape,
    x: TensorId,
    layout: Arc<WindowLayout>,
    params: &FwaParams,
    top_k: usize,
    heads: usize,
) -> Result<FwaOutput> {
    let wp = partition_windows(tape, x, layout)?;
    let k_eff = top_k.min(wp.layout.n_windows - 1);
    let cws_out = cws(tape, &wp, &params.corr, k_eff)?;
    let intra = iwa(tape, &wp, &params.intra, heads)?;
    let (features, cwa_attn) = if k_eff > 0 {
        let cross = cwa(tape, &wp, &cws_out, params.corr.wo, heads)?;
        (tape.add(intra.features, cross.features)?, cross.attn)
    } else {
        (intra.features, Vec::new())
    };
    Ok(FwaOutput { features, bundle: cws_out.bundle, iwa_attn: intra.attn, cwa_attn })
}

/// Attention mass received by each patch: column sums of the patch-correlation
/// map, unflattened to the block's `[T,H,W]` grid. Rows of the map each sum to
/// one, so the total mass over the grid is `N_w · M`.
pub fn patch_significance(tape: &mut Tape, bundle: &CorrelationBundle) -> Result<TensorId> {
    let received = tape.sum_axis(bundle.i_p, 0)?;
    let layout = &bundle.layout;
    let idx = Arc::new(layout.unpartition_indices(1));
    let [t, h, w] = layout.grid;
    tape.gather_flat(received, idx, vec![t, h, w])
}
