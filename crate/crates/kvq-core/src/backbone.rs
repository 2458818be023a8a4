//! Video transformer trunk: patch embedding, attention+FFN blocks, and
//! spatial patch-merging between stages.
//!
//! Blocks are pre-norm residual: `x' = x + FWA(LN(x))`, `out = x' + FFN(LN(x'))`.
//! Cross-window mixing comes entirely from the fusion-window attention inside
//! each block; there is no shifted-window scheme and no positional encoding.

use std::sync::Arc;

use crate::error::{KvqError, Result};
use crate::fwa::{fwa_forward, AttnProjections, CorrelationBundle, FwaOutput, FwaParams, WindowLayout};
use crate::params::BoundParams;
use crate::tensor::{Tape, TensorId};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Patch size (frames, rows, cols) for the embedding.
    pub patch: [usize; 3],
    /// Channels per stage; consecutive stages are joined by 2x2 spatial
    /// patch merging with a linear projection.
    pub channels: Vec<usize>,
    /// Blocks per stage.
    pub blocks: Vec<usize>,
    /// Attention window (frames, rows, cols).
    pub window: [usize; 3],
    /// Correlated windows gathered per window by the cross branch.
    pub top_k: usize,
    /// Attention heads; must divide every stage's channel count.
    pub heads: usize,
    /// FFN hidden width as a multiple of the stage channels.
    pub ffn_mult: usize,
}

impl BackboneConfig {
    /// Desk-scale defaults small enough for CPU test runs.
    pub fn desk() -> Self {
        BackboneConfig {
            patch: [2, 4, 4],
            channels: vec![32, 64],
            blocks: vec![2, 2],
            window: [2, 2, 2],
            top_k: 2,
            heads: 2,
            ffn_mult: 4,
        }
    }

    /// A depth-zero pointwise variant: embedding plus heads only, no
    /// attention blocks and no merging. Every output cell then depends on
    /// exactly one input patch.
    pub fn pointwise(channels: usize) -> Self {
        BackboneConfig {
            patch: [2, 4, 4],
            channels: vec![channels],
            blocks: vec![0],
            window: [1, 1, 1],
            top_k: 0,
            heads: 1,
            ffn_mult: 1,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// Grid after patch embedding for a `[T, H, W]` video.
    pub fn embed_grid(&self, video_dims: [usize; 3]) -> Result<[usize; 3]> {
        for d in 0..3 {
            if self.patch[d] == 0 || video_dims[d] % self.patch[d] != 0 {
                return Err(KvqError::shape(format!(
                    "video dims {video_dims:?} not divisible by patch {:?}",
                    self.patch
                )));
            }
        }
        Ok([
            video_dims[0] / self.patch[0],
            video_dims[1] / self.patch[1],
            video_dims[2] / self.patch[2],
        ])
    }

    /// Grid at the input of stage `s` (spatial dims halve at each merge).
    pub fn stage_grid(&self, video_dims: [usize; 3], stage: usize) -> Result<[usize; 3]> {
        let mut g = self.embed_grid(video_dims)?;
        for _ in 0..stage {
            if g[1] % 2 != 0 || g[2] % 2 != 0 {
                return Err(KvqError::shape(format!(
                    "grid {g:?} not divisible by 2x2 spatial merging"
                )));
            }
            g[1] /= 2;
            g[2] /= 2;
        }
        Ok(g)
    }

    /// The texture/saliency output grid: the final stage's grid.
    pub fn output_grid(&self, video_dims: [usize; 3]) -> Result<[usize; 3]> {
        self.stage_grid(video_dims, self.num_stages() - 1)
    }

    /// Input voxels mapped to one output cell: patch size times the total
    /// spatial merge factor.
    pub fn total_stride(&self) -> [usize; 3] {
        let merge = 1usize << (self.num_stages() - 1);
        [self.patch[0], self.patch[1] * merge, self.patch[2] * merge]
    }

    /// Checks structural invariants plus, for the given video dims, that the
    /// configured window tiles every stage grid and `top_k` stays below every
    /// stage's window count.
    pub fn validate_for(&self, video_dims: [usize; 3]) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.blocks.len() {
            return Err(KvqError::config(format!(
                "channels ({}) and blocks ({}) must list the same nonzero number of stages",
                self.channels.len(),
                self.blocks.len()
            )));
        }
        if self.heads == 0 {
            return Err(KvqError::config("heads must be positive"));
        }
        for (s, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.heads != 0 {
                return Err(KvqError::config(format!(
                    "stage {s} channels {c} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if self.ffn_mult == 0 {
            return Err(KvqError::config("ffn_mult must be positive"));
        }
        for stage in 0..self.num_stages() {
            let grid = self.stage_grid(video_dims, stage)?;
            if self.blocks[stage] == 0 {
                continue;
            }
            let layout = WindowLayout::new(grid, self.window)?;
            if self.top_k >= layout.n_windows {
                return Err(KvqError::config(format!(
                    "top_k {} must be < {} windows at stage {stage}",
                    self.top_k, layout.n_windows
                )));
            }
        }
        Ok(())
    }
}

/// Whether stage windows must match the config exactly or shrink to fit
/// small grids (used by the per-patch forwards of the local constraint).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    Strict,
    Clamp,
}

/// Precomputed gather indices and window layouts for one input shape.
pub struct ForwardPlan {
    pub video_dims: [usize; 3],
    pub embed_grid: [usize; 3],
    pub embed_indices: Arc<Vec<usize>>,
    /// Window layout per stage (None for zero-block stages).
    pub stage_layouts: Vec<Option<Arc<WindowLayout>>>,
    /// Gather indices for each 2x2 spatial merge between stages.
    pub merge_indices: Vec<Arc<Vec<usize>>>,
    pub grids: Vec<[usize; 3]>,
}

impl ForwardPlan {
    pub fn new(cfg: &BackboneConfig, video_dims: [usize; 3], mode: WindowMode) -> Result<Self> {
        let embed_grid = cfg.embed_grid(video_dims)?;
        let embed_indices = Arc::new(embed_gather_indices(video_dims, cfg.patch));
        let mut stage_layouts = Vec::new();
        let mut merge_indices = Vec::new();
        let mut grids = Vec::new();
        for stage in 0..cfg.num_stages() {
            let grid = cfg.stage_grid(video_dims, stage)?;
            grids.push(grid);
            if cfg.blocks[stage] == 0 {
                stage_layouts.push(None);
            } else {
                let window = match mode {
                    WindowMode::Strict => cfg.window,
                    WindowMode::Clamp => clamp_window(cfg.window, grid),
                };
                stage_layouts.push(Some(Arc::new(WindowLayout::new(grid, window)?)));
            }
            if stage + 1 < cfg.num_stages() {
                merge_indices.push(Arc::new(merge_gather_indices(grid, cfg.channels[stage])?));
            }
        }
        Ok(ForwardPlan {
            video_dims,
            embed_grid,
            embed_indices,
            stage_layouts,
            merge_indices,
            grids,
        })
    }
}

/// Largest window not exceeding the configured one that still tiles the grid.
fn clamp_window(window: [usize; 3], grid: [usize; 3]) -> [usize; 3] {
    let mut w = [0; 3];
    for d in 0..3 {
        let mut cand = window[d].min(grid[d]).max(1);
        while grid[d] % cand != 0 {
            cand -= 1;
        }
        w[d] = cand;
    }
    w
}

/// Flat gather indices turning a `[T_v,H_v,W_v,3]` video into
/// `[T·H·W, 3·P_t·P·P]` rows of voxel blocks (voxels row-major, channel last).
fn embed_gather_indices(video_dims: [usize; 3], patch: [usize; 3]) -> Vec<usize> {
    let [tv, hv, wv] = video_dims;
    let [pt, ph, pw] = patch;
    let grid = [tv / pt, hv / ph, wv / pw];
    let mut idx = Vec::with_capacity(tv * hv * wv * 3);
    for gt in 0..grid[0] {
        for gh in 0..grid[1] {
            for gw in 0..grid[2] {
                for it in 0..pt {
                    for ih in 0..ph {
                        for iw in 0..pw {
                            let t = gt * pt + it;
                            let h = gh * ph + ih;
                            let w = gw * pw + iw;
                            let base = ((t * hv + h) * wv + w) * 3;
                            idx.extend_from_slice(&[base, base + 1, base + 2]);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Gather indices concatenating each 2x2 spatial neighborhood's channels:
/// `[T,H,W,C]` -> `[T,H/2,W/2,4C]`.
fn merge_gather_indices(grid: [usize; 3], channels: usize) -> Result<Vec<usize>> {
    let [t, h, w] = grid;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(KvqError::shape(format!("grid {grid:?} not mergeable 2x2")));
    }
    let mut idx = Vec::with_capacity(t * h * w * channels);
    for ti in 0..t {
        for h2 in 0..h / 2 {
            for w2 in 0..w / 2 {
                for (dh, dw) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let pos = (ti * h + (2 * h2 + dh)) * w + (2 * w2 + dw);
                    for c in 0..channels {
                        idx.push(pos * channels + c);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Projects non-overlapping voxel blocks to feature vectors: the grid cell at
/// `(t,h,w)` is a learned linear map of its flattened `3·P_t·P²` voxel block.
pub fn patch_embed(
    tape: &mut Tape,
    video: TensorId,
    plan: &ForwardPlan,
    channels: usize,
    bound: &BoundParams,
) -> Result<TensorId> {
    let vshape = tape.shape(video).to_vec();
    if vshape.len() != 4 || vshape[3] != 3 {
        return Err(KvqError::shape(format!("patch_embed: need [T,H,W,3], got {vshape:?}")));
    }
    if vshape[..3] != plan.video_dims {
        return Err(KvqError::shape(format!(
            "patch_embed: video {:?} vs plan {:?}",
            &vshape[..3],
            plan.video_dims
        )));
    }
    let [t, h, w] = plan.embed_grid;
    let block_len = plan.embed_indices.len() / (t * h * w);
    let rows = tape.gather_flat(
        video,
        Arc::clone(&plan.embed_indices),
        vec![t * h * w, block_len],
    )?;
    let cells = tape.linear(rows, bound.id("embed.w"), Some(bound.id("embed.b")))?;
    tape.reshape(cells, vec![t, h, w, channels])
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("s{stage}.b{block}")
}

fn attn_projections(bound: &BoundParams, prefix: &str, branch: &str) -> AttnProjections {
    AttnProjections {
        wq: bound.id(&format!("{prefix}.{branch}.wq")),
        wk: bound.id(&format!("{prefix}.{branch}.wk")),
        wv: bound.id(&format!("{prefix}.{branch}.wv")),
        wo: bound.id(&format!("{prefix}.{branch}.wo")),
    }
}

const LN_EPS: f64 = 1e-5;

/// One pre-norm residual block; returns the output features and the block's
/// fusion-attention byproducts.
pub fn block_forward(
    tape: &mut Tape,
    x: TensorId,
    layout: Arc<WindowLayout>,
    cfg: &BackboneConfig,
    bound: &BoundParams,
    stage: usize,
    block: usize,
) -> Result<(TensorId, FwaOutput)> {
    let prefix = block_prefix(stage, block);
    let ln1 = tape.layer_norm(
        x,
        bound.id(&format!("{prefix}.ln1.g")),
        bound.id(&format!("{prefix}.ln1.b")),
        LN_EPS,
    )?;
    let fwa_params = FwaParams {
        corr: attn_projections(bound, &prefix, "corr"),
        intra: attn_projections(bound, &prefix, "intra"),
    };
    let fwa = fwa_forward(tape, ln1, layout, &fwa_params, cfg.top_k, cfg.heads)?;
    let x1 = tape.add(x, fwa.features)?;

    let ln2 = tape.layer_norm(
        x1,
        bound.id(&format!("{prefix}.ln2.g")),
        bound.id(&format!("{prefix}.ln2.b")),
        LN_EPS,
    )?;
    let hidden = tape.linear(
        ln2,
        bound.id(&format!("{prefix}.ffn.w1")),
        Some(bound.id(&format!("{prefix}.ffn.b1"))),
    )?;
    let act = tape.gelu(hidden);
    let ffn = tape.linear(
        act,
        bound.id(&format!("{prefix}.ffn.w2")),
        Some(bound.id(&format!("{prefix}.ffn.b2"))),
    )?;
    let out = tape.add(x1, ffn)?;
    Ok((out, fwa))
}

/// Full trunk result: final features plus one correlation bundle per block,
/// in forward order.
pub struct BackboneOut {
    pub features: TensorId,
    pub bundles: Vec<CorrelationBundle>,
    /// Per-block attention rows (intra then cross), kept for diagnostics.
    pub attn_rows: Vec<Vec<TensorId>>,
}

/// Embeds the video and runs every stage; spatial dims halve at each merge.
pub fn backbone_forward(
    tape: &mut Tape,
    video: TensorId,
    cfg: &BackboneConfig,
    plan: &ForwardPlan,
    bound: &BoundParams,
) -> Result<BackboneOut> {
    let mut x = patch_embed(tape, video, plan, cfg.channels[0], bound)?;
    let mut bundles = Vec::with_capacity(cfg.num_blocks());
    let mut attn_rows = Vec::new();
    for stage in 0..cfg.num_stages() {
        for block in 0..cfg.blocks[stage] {
            let layout = plan.stage_layouts[stage]
                .as_ref()
                .expect("stage with blocks has a layout")
                .clone();
            let (out, fwa) = block_forward(tape, x, layout, cfg, bound, stage, block)?;
            x = out;
            let mut rows = fwa.iwa_attn;
            rows.extend(fwa.cwa_attn);
            attn_rows.push(rows);
            bundles.push(fwa.bundle);
        }
        if stage + 1 < cfg.num_stages() {
            let grid = plan.grids[stage];
            let [t, h, w] = grid;
            let c = cfg.channels[stage];
            let merged = tape.gather_flat(
                x,
                Arc::clone(&plan.merge_indices[stage]),
                vec![t, h / 2, w / 2, 4 * c],
            )?;
            x = tape.linear(
                merged,
                bound.id(&format!("merge{stage}.w")),
                Some(bound.id(&format!("merge{stage}.b"))),
            )?;
        }
    }
    Ok(BackboneOut { features: x, bundles, attn_rows })
}
