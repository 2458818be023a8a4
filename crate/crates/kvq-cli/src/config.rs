//! Flat dotted-key configuration files.
//!
//! Format: one `key = value` per line, `#` comments, lists comma-separated.
//! Unknown keys are errors so typos cannot silently fall back to defaults.

use std::collections::HashMap;
use std::path::Path;

use kvq_core::backbone::BackboneConfig;
use kvq_core::data::synth::SynthConfig;
use kvq_core::train::TrainSettings;
use sha2::{Digest, Sha256};

/// Everything a run needs, resolved from a config file plus CLI overrides.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainSettings,
    pub synth: SynthConfig,
    /// Total synthetic clips when generating a dataset.
    pub clips: usize,
    /// Clips held out for evaluation (taken from the end).
    pub holdout: usize,
    /// Base seed for dataset generation.
    pub data_seed: u64,
    /// SHA-256 of the raw config text.
    pub config_hash: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::desk(),
            train: TrainSettings::default(),
            synth: SynthConfig::default(),
            clips: 200,
            holdout: 40,
            data_seed: 9000,
            config_hash: hash_text(""),
        }
    }
}

pub fn hash_text(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_list3(v: &str, key: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("{key}: bad integer in {v:?}")))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(format!("{key}: expected 3 comma-separated values, got {v:?}"));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_usize_list(v: &str, key: &str) -> Result<Vec<usize>, String> {
    v.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("{key}: bad integer in {v:?}")))
        .collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig { config_hash: hash_text(text), ..RunConfig::default() };
        let mut pairs: HashMap<String, String> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
            pairs.insert(key.trim().to_string(), value.trim().to_string());
        }

        for (key, value) in &pairs {
            let v = value.as_str();
            let usize_of = || v.parse::<usize>().map_err(|_| format!("{key}: bad integer {v:?}"));
            let u64_of = || v.parse::<u64>().map_err(|_| format!("{key}: bad integer {v:?}"));
            let f64_of = || v.parse::<f64>().map_err(|_| format!("{key}: bad number {v:?}"));
            let bool_of = || match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(format!("{key}: bad boolean {v:?}")),
            };
            match key.as_str() {
                "backbone.patch" => cfg.backbone.patch = parse_list3(v, key)?,
                "backbone.channels" => cfg.backbone.channels = parse_usize_list(v, key)?,
                "backbone.blocks" => cfg.backbone.blocks = parse_usize_list(v, key)?,
                "backbone.window" => cfg.backbone.window = parse_list3(v, key)?,
                "backbone.top_k" => cfg.backbone.top_k = usize_of()?,
                "backbone.heads" => cfg.backbone.heads = usize_of()?,
                "backbone.ffn_mult" => cfg.backbone.ffn_mult = usize_of()?,
                "loss.lambda_r" => cfg.train.weights.lambda_r = f64_of()?,
                "loss.lambda_p" => cfg.train.weights.lambda_p = f64_of()?,
                "train.epochs" => cfg.train.epochs = usize_of()?,
                "train.batch_size" => cfg.train.batch_size = usize_of()?,
                "train.lr" => cfg.train.lr = f64_of()?,
                "train.seed" => cfg.train.seed = u64_of()?,
                "train.lpc_every" => cfg.train.lpc_every = usize_of()?,
                "train.freeze_patch_branch" => cfg.train.freeze_patch_branch = bool_of()?,
                "data.frames" => cfg.synth.frames = usize_of()?,
                "data.height" => cfg.synth.height = usize_of()?,
                "data.width" => cfg.synth.width = usize_of()?,
                "data.grid" => cfg.synth.grid = parse_list3(v, key)?,
                "data.clips" => cfg.clips = usize_of()?,
                "data.holdout" => cfg.holdout = usize_of()?,
                "data.seed" => cfg.data_seed = u64_of()?,
                _ => return Err(format!("unknown config key: {key}")),
            }
        }
        // keep the synthetic grid aligned with the model's output grid
        let dims = [cfg.synth.frames, cfg.synth.height, cfg.synth.width];
        if let Ok(grid) = cfg.backbone.output_grid(dims) {
            if !pairs.contains_key("data.grid") {
                cfg.synth.grid = grid;
            }
        }
        Ok(cfg)
    }

    pub fn video_dims(&self) -> [usize; 3] {
        [self.synth.frames, self.synth.height, self.synth.width]
    }
}
