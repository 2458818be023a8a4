//! The full quality model: parameter initialization, tape binding, and the
//! forward pass producing saliency, texture, and the scalar quality score.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{backbone_forward, BackboneConfig, ForwardPlan, WindowMode};
use crate::error::{KvqError, Result};
use crate::fwa::{patch_significance, CorrelationBundle};
use crate::heads;
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Tape, Tensor, TensorId};

/// Model = architecture config + named parameters.
pub struct KvqModel {
    pub cfg: BackboneConfig,
    pub params: ParamStore,
}

/// Tape handles produced by a full forward pass.
pub struct ForwardMaps {
    /// Final `[T,H,W,C]` backbone features.
    pub features: TensorId,
    /// Texture map Q on the output grid.
    pub texture: TensorId,
    /// Learned saliency logits before the ensemble.
    pub saliency_logits: TensorId,
    /// Ensemble saliency S: nonnegative, mean one.
    pub saliency: TensorId,
    /// Scalar quality q = mean(S ⊙ Q).
    pub quality: TensorId,
    pub bundles: Vec<CorrelationBundle>,
    /// Per-block attention rows for diagnostics.
    pub attn_rows: Vec<Vec<TensorId>>,
}

impl KvqModel {
    /// Seeded initialization: weight matrices draw from N(0, 1/fan_in),
    /// biases start at zero, layer norms at identity, ensemble weights at
    /// 1.0 for the learned logits and 0.1 per significance map.
    pub fn init(cfg: BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let matrix = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let normal = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("valid sigma");
            Tensor::from_fn(&[rows, cols], |_| normal.sample(rng))
        };

        let in_len = 3 * cfg.patch[0] * cfg.patch[1] * cfg.patch[2];
        params.insert("embed.w", matrix(&mut rng, in_len, cfg.channels[0]));
        params.insert("embed.b", Tensor::zeros(&[cfg.channels[0]]));

        for stage in 0..cfg.num_stages() {
            let c = cfg.channels[stage];
            for block in 0..cfg.blocks[stage] {
                let p = format!("s{stage}.b{block}");
                params.insert(&format!("{p}.ln1.g"), Tensor::ones(&[c]));
                params.insert(&format!("{p}.ln1.b"), Tensor::zeros(&[c]));
                for branch in ["corr", "intra"] {
                    for proj in ["wq", "wk", "wv", "wo"] {
                        params.insert(&format!("{p}.{branch}.{proj}"), matrix(&mut rng, c, c));
                    }
                }
                params.insert(&format!("{p}.ln2.g"), Tensor::ones(&[c]));
                params.insert(&format!("{p}.ln2.b"), Tensor::zeros(&[c]));
                let hidden = c * cfg.ffn_mult;
                params.insert(&format!("{p}.ffn.w1"), matrix(&mut rng, c, hidden));
                params.insert(&format!("{p}.ffn.b1"), Tensor::zeros(&[hidden]));
                params.insert(&format!("{p}.ffn.w2"), matrix(&mut rng, hidden, c));
                params.insert(&format!("{p}.ffn.b2"), Tensor::zeros(&[c]));
            }
            if stage + 1 < cfg.num_stages() {
                let next = cfg.channels[stage + 1];
                params.insert(&format!("merge{stage}.w"), matrix(&mut rng, 4 * c, next));
                params.insert(&format!("merge{stage}.b"), Tensor::zeros(&[next]));
            }
        }

        let c_last = *cfg.channels.last().unwrap();
        params.insert("texture.w", matrix(&mut rng, c_last, 1));
        params.insert("texture.b", Tensor::zeros(&[1]));
        params.insert("saliency.w", matrix(&mut rng, c_last, 1));
        params.insert("saliency.b", Tensor::zeros(&[1]));

        let n_sources = 1 + cfg.num_blocks();
        params.insert(
            "ensemble.w",
            Tensor::from_fn(&[n_sources], |i| if i == 0 { 1.0 } else { 0.1 }),
        );

        KvqModel { cfg, params }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams::bind(tape, &self.params, trainable)
    }

    pub fn plan(&self, video_dims: [usize; 3], mode: WindowMode) -> Result<ForwardPlan> {
        ForwardPlan::new(&self.cfg, video_dims, mode)
    }

    /// Full forward pass: backbone, both heads, significance ensemble, and
    /// the scalar quality.
    pub fn forward(
        &self,
        tape: &mut Tape,
        video: TensorId,
        plan: &ForwardPlan,
        bound: &BoundParams,
    ) -> Result<ForwardMaps> {
        let bb = backbone_forward(tape, video, &self.cfg, plan, bound)?;
        let texture =
            heads::scalar_head(tape, bb.features, bound.id("texture.w"), bound.id("texture.b"))?;
        let saliency_logits =
            heads::scalar_head(tape, bb.features, bound.id("saliency.w"), bound.id("saliency.b"))?;
        let common = *plan.grids.last().expect("at least one stage");
        let mut sig_maps = Vec::with_capacity(bb.bundles.len());
        for bundle in &bb.bundles {
            let native = patch_significance(tape, bundle)?;
            sig_maps.push(heads::to_common_grid(tape, native, common)?);
        }
        let saliency = heads::ensemble_saliency(tape, saliency_logits, &sig_maps, bound.id("ensemble.w"))?;
        let quality = heads::aggregate_quality(tape, saliency, texture)?;
        Ok(ForwardMaps {
            features: bb.features,
            texture,
            saliency_logits,
            saliency,
            quality,
            bundles: bb.bundles,
            attn_rows: bb.attn_rows,
        })
    }

    /// Texture-only forward used by the per-patch constraint path: skips the
    /// saliency ensemble entirely.
    pub fn forward_texture(
        &self,
        tape: &mut Tape,
        video: TensorId,
        plan: &ForwardPlan,
        bound: &BoundParams,
    ) -> Result<TensorId> {
        let bb = backbone_forward(tape, video, &self.cfg, plan, bound)?;
        heads::scalar_head(tape, bb.features, bound.id("texture.w"), bound.id("texture.b"))
    }

    /// Convenience: evaluate one clip without gradients, returning the value
    /// tensors (S, Q, q).
    pub fn evaluate_clip(&self, video: &Tensor) -> Result<EvalMaps> {
        let dims = video_dims(video)?;
        let plan = self.plan(dims, WindowMode::Strict)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let vid = tape.constant(video.clone());
        let maps = self.forward(&mut tape, vid, &plan, &bound)?;
        Ok(EvalMaps {
            saliency: tape.value(maps.saliency).clone(),
            texture: tape.value(maps.texture).clone(),
            quality: tape.value(maps.quality).item()?,
        })
    }

    /// Saves all parameters (KVQT blob + manifest). The manifest header
    /// carries the serialized config plus the caller's provenance entries.
    pub fn save_checkpoint(
        &self,
        blob: &Path,
        manifest: &Path,
        extra_header: &[(&str, &str)],
    ) -> Result<()> {
        let cfg_json = serde_json::to_string(&self.cfg)
            .map_err(|e| KvqError::Format(format!("config serialization: {e}")))?;
        let mut header: Vec<(&str, &str)> = vec![("config", cfg_json.as_str())];
        header.extend_from_slice(extra_header);
        self.params.save(blob, manifest, &header)
    }

    pub fn load_checkpoint(blob: &Path, manifest: &Path) -> Result<(Self, Vec<(String, String)>)> {
        let (params, header) = ParamStore::load(blob, manifest)?;
        let cfg_json = header
            .iter()
            .find(|(k, _)| k == "config")
            .map(|(_, v)| v.clone())
            .ok_or_else(|| KvqError::Format("checkpoint manifest missing config".to_string()))?;
        let cfg: BackboneConfig = serde_json::from_str(&cfg_json)
            .map_err(|e| KvqError::Format(format!("config parse: {e}")))?;
        Ok((KvqModel { cfg, params }, header))
    }
}

/// Value-level evaluation output for one clip.
pub struct EvalMaps {
    pub saliency: Tensor,
    pub texture: Tensor,
    pub quality: f64,
}

/// Extracts `[T,H,W]` from a `[T,H,W,3]` clip tensor.
pub fn video_dims(video: &Tensor) -> Result<[usize; 3]> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(KvqError::shape(format!("video must be [T,H,W,3], got {s:?}")));
    }
    Ok([s[0], s[1], s[2]])
}
