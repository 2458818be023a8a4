//! Synthetic distorted clips with known region-wise quality.
//!
//! A procedural base clip (gradient background, moving shapes, a fine
//! sinusoidal texture field) is distorted region by region: each texture-grid
//! cell draws a severity, and its spatiotemporal block gets Gaussian blur
//! (sigma = 3·severity px), additive Gaussian noise (std = 0.1·severity), and
//! value quantization (round(16 - 12·severity) levels). Distortions never
//! cross region boundaries and every region's noise stream depends only on
//! the clip seed and the region index, so regions are fully independent.
//!
//! Ground truth: `local_quality = 1 - severity` per region, a mean-one
//! saliency proxy from base-content contrast, and
//! `global_mos = mean(saliency_proxy ⊙ local_quality)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KvqError, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Clip geometry for the generator.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Texture-grid dims; must divide (frames, height, width).
    pub grid: [usize; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { frames: 16, height: 64, width: 64, grid: [8, 8, 8] }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.frames, self.height, self.width];
        for d in 0..3 {
            if self.grid[d] == 0 || dims[d] % self.grid[d] != 0 {
                return Err(KvqError::config(format!(
                    "grid {:?} must divide clip dims {:?}",
                    self.grid, dims
                )));
            }
        }
        Ok(())
    }

    /// Pixels per region along each axis.
    pub fn region_dims(&self) -> [usize; 3] {
        [
            self.frames / self.grid[0],
            self.height / self.grid[1],
            self.width / self.grid[2],
        ]
    }
}

/// A generated clip plus its ground truth.
pub struct SyntheticClip {
    pub video: Tensor,
    /// `1 - severity` per texture-grid cell, in [0,1].
    pub local_quality: Tensor,
    /// Mean-one contrast-based weighting per cell.
    pub saliency_proxy: Tensor,
    pub global_mos: f64,
    pub seed: u64,
}

/// Procedural clean content: gradient background, three moving shapes, and a
/// fine sinusoid so every region carries measurable contrast.
pub fn synth_base(seed: u64, frames: usize, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_col: [f64; 3] = [
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
    ];
    let grad_h: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let grad_w: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    // two-band texture field, uniform across the frame: the fine band reacts
    // to small blur, the coarse band keeps attenuating at large blur, so
    // local detail loss stays monotone in severity over the whole range and
    // always outweighs what noise and banding add back
    let f1x: f64 = rng.random_range(0.70..0.95);
    let f1y: f64 = rng.random_range(0.70..0.95);
    let a1: f64 = rng.random_range(0.18..0.22);
    let f2x: f64 = rng.random_range(0.28..0.40);
    let f2y: f64 = rng.random_range(0.28..0.40);
    let a2: f64 = rng.random_range(0.12..0.16);
    let drift1: f64 = rng.random_range(0.0..0.8);
    let drift2: f64 = rng.random_range(0.0..0.5);
    // moving shapes
    struct Shape {
        cy: f64,
        cx: f64,
        vy: f64,
        vx: f64,
        ry: f64,
        rx: f64,
        color: [f64; 3],
    }
    let shapes: Vec<Shape> = (0..3)
        .map(|_| Shape {
            cy: rng.random_range(0.0..height as f64),
            cx: rng.random_range(0.0..width as f64),
            vy: rng.random_range(-2.0..2.0),
            vx: rng.random_range(-2.0..2.0),
            ry: rng.random_range(0.1..0.25) * height as f64,
            rx: rng.random_range(0.1..0.25) * width as f64,
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        })
        .collect();

    let mut data = Vec::with_capacity(frames * height * width * 3);
    for t in 0..frames {
        let tf = t as f64;
        for h in 0..height {
            for w in 0..width {
                let mut px = [0.0; 3];
                for c in 0..3 {
                    px[c] = base_col[c]
                        + grad_h[c] * h as f64 / height as f64
                        + grad_w[c] * w as f64 / width as f64;
                }
                for s in &shapes {
                    let sy = s.cy + s.vy * tf;
                    let sx = s.cx + s.vx * tf;
                    let dy = (h as f64 - sy) / s.ry;
                    let dx = (w as f64 - sx) / s.rx;
                    if dy * dy + dx * dx <= 1.0 {
                        for c in 0..3 {
                            px[c] = 0.7 * s.color[c] + 0.3 * px[c];
                        }
                    }
                }
                // texture rides on top of the composited content so every
                // region carries the same fine-detail amplitude; content is
                // compressed into mid-range so the sum never clips
                let tex = a1 * (f1x * h as f64 + f1y * w as f64 + drift1 * tf).sin()
                    + a2 * (f2x * h as f64 + f2y * w as f64 + drift2 * tf).sin();
                for c in 0..3 {
                    data.push((px[c] * 0.12 + 0.46 + tex).clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::new(vec![frames, height, width, 3], data).expect("shape matches fill")
}

/// Per-region severities: a per-clip level with per-region spread. Capped at
/// 0.6: beyond that the added noise and coarse banding contribute more local
/// energy than the blur removes, making severity ambiguous from region
/// content, which defeats the point of region-wise ground truth.
pub fn severity_grid(seed: u64, grid: [usize; 3]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let level: f64 = rng.random_range(0.05..0.55);
    Tensor::from_fn(&grid, |_| (level + rng.random_range(-0.25..0.25)).clamp(0.0, 0.6))
}

fn region_bounds(cfg: &SynthConfig, region: usize) -> ([usize; 2], [usize; 2], [usize; 2]) {
    let [gt, gh, gw] = cfg.grid;
    let [rt, rh, rw] = cfg.region_dims();
    let iw = region % gw;
    let ih = (region / gw) % gh;
    let it = region / (gw * gh);
    let _ = gt;
    (
        [it * rt, (it + 1) * rt],
        [ih * rh, (ih + 1) * rh],
        [iw * rw, (iw + 1) * rw],
    )
}

/// Distortion strengths for one region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionDistortion {
    pub blur_sigma: f64,
    pub noise_std: f64,
    /// Value-quantization level count; `None` skips quantization.
    pub quant_levels: Option<usize>,
}

impl RegionDistortion {
    pub fn none() -> Self {
        RegionDistortion { blur_sigma: 0.0, noise_std: 0.0, quant_levels: None }
    }
}

/// Severity-to-distortion mapping: blur sigma 3·severity px, noise std
/// 0.1·severity, quantization to round(16 - 12·severity) levels. Severity
/// zero maps to the identity profile.
pub fn distortion_profile(severity: f64) -> RegionDistortion {
    if severity == 0.0 {
        return RegionDistortion::none();
    }
    RegionDistortion {
        blur_sigma: 3.0 * severity,
        noise_std: 0.1 * severity,
        quant_levels: Some((16.0 - 12.0 * severity).round() as usize),
    }
}

/// Applies the severity-mapped distortion chain per region. Severity zero
/// leaves a region bit-identical to the base.
pub fn distort(base: &Tensor, cfg: &SynthConfig, severities: &Tensor, seed: u64) -> Result<Tensor> {
    if severities.shape() != cfg.grid {
        return Err(KvqError::shape(format!(
            "severities {:?} vs grid {:?}",
            severities.shape(),
            cfg.grid
        )));
    }
    let profiles: Vec<RegionDistortion> =
        severities.data().iter().map(|&s| distortion_profile(s)).collect();
    distort_regions(base, cfg, &profiles, seed)
}

/// Applies one distortion profile per region: confined Gaussian blur, then
/// region-seeded additive noise, then value quantization. No operation reads
/// outside its region.
pub fn distort_regions(
    base: &Tensor,
    cfg: &SynthConfig,
    profiles: &[RegionDistortion],
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    let n_regions: usize = cfg.grid.iter().product();
    if profiles.len() != n_regions {
        return Err(KvqError::shape(format!(
            "{} profiles for {} regions",
            profiles.len(),
            n_regions
        )));
    }
    let (h_total, w_total) = (cfg.height, cfg.width);
    let mut data = base.data().to_vec();
    for (region, profile) in profiles.iter().enumerate() {
        if *profile == RegionDistortion::none() {
            continue;
        }
        let ([t0, t1], [h0, h1], [w0, w1]) = region_bounds(cfg, region);
        let sigma = profile.blur_sigma;
        let noise_std = profile.noise_std;
        let levels = profile.quant_levels.unwrap_or(0);

        // spatial Gaussian blur confined to the region, edge-renormalized
        if sigma > 0.0 {
            let radius = (3.0 * sigma).ceil() as isize;
            let weights: Vec<f64> = (-radius..=radius)
                .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
                .collect();
            let rh = h1 - h0;
            let rw = w1 - w0;
            let mut tmp = vec![0.0; rh * rw * 3];
            for t in t0..t1 {
                let frame = t * h_total * w_total;
                // horizontal pass into tmp
                for h in h0..h1 {
                    for w in w0..w1 {
                        for c in 0..3 {
                            let mut acc = 0.0;
                            let mut norm = 0.0;
                            for (k, &wt) in weights.iter().enumerate() {
                                let ww = w as isize + k as isize - radius;
                                if ww < w0 as isize || ww >= w1 as isize {
                                    continue;
                                }
                                acc += wt * data[(frame + h * w_total + ww as usize) * 3 + c];
                                norm += wt;
                            }
                            tmp[((h - h0) * rw + (w - w0)) * 3 + c] = acc / norm;
                        }
                    }
                }
                // vertical pass back into data
                for h in h0..h1 {
                    for w in w0..w1 {
                        for c in 0..3 {
                            let mut acc = 0.0;
                            let mut norm = 0.0;
                            for (k, &wt) in weights.iter().enumerate() {
                                let hh = h as isize + k as isize - radius;
                                if hh < h0 as isize || hh >= h1 as isize {
                                    continue;
                                }
                                acc += wt * tmp[((hh as usize - h0) * rw + (w - w0)) * 3 + c];
                                norm += wt;
                            }
                            data[(frame + h * w_total + w) * 3 + c] = acc / norm;
                        }
                    }
                }
            }
        }

        // additive Gaussian noise from a region-local stream
        if noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1000 + region as u64);
            let normal = Normal::new(0.0, noise_std).expect("valid std");
            for t in t0..t1 {
                let frame = t * h_total * w_total;
                for h in h0..h1 {
                    for w in w0..w1 {
                        for c in 0..3 {
                            let i = (frame + h * w_total + w) * 3 + c;
                            data[i] = (data[i] + normal.sample(&mut rng)).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }

        // value quantization (banding)
        if levels > 1 {
            let q = (levels - 1) as f64;
            for t in t0..t1 {
                let frame = t * h_total * w_total;
                for h in h0..h1 {
                    for w in w0..w1 {
                        for c in 0..3 {
                            let i = (frame + h * w_total + w) * 3 + c;
                            data[i] = (data[i] * q).round() / q;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(base.shape().to_vec(), data)
}

/// Mean-one per-region weighting from base-content contrast: population std
/// of each region's pixels, box-smoothed over neighboring grid cells.
pub fn saliency_proxy(base: &Tensor, cfg: &SynthConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (h_total, w_total) = (cfg.height, cfg.width);
    let n_regions: usize = cfg.grid.iter().product();
    let mut contrast = vec![0.0; n_regions];
    let d = base.data();
    for (region, slot) in contrast.iter_mut().enumerate() {
        let ([t0, t1], [h0, h1], [w0, w1]) = region_bounds(cfg, region);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0.0;
        for t in t0..t1 {
            let frame = t * h_total * w_total;
            for h in h0..h1 {
                for w in w0..w1 {
                    for c in 0..3 {
                        let v = d[(frame + h * w_total + w) * 3 + c];
                        sum += v;
                        sum_sq += v * v;
                        count += 1.0;
                    }
                }
            }
        }
        let mean = sum / count;
        *slot = (sum_sq / count - mean * mean).max(0.0).sqrt();
    }

    // center-weighted smoothing over face neighbors (weight 1 center, 1/2
    // per neighbor) so small grids keep their contrast variation
    let [gt, gh, gw] = cfg.grid;
    let at = |t: usize, h: usize, w: usize| (t * gh + h) * gw + w;
    let mut smoothed = vec![0.0; n_regions];
    for t in 0..gt {
        for h in 0..gh {
            for w in 0..gw {
                let mut acc = contrast[at(t, h, w)];
                let mut norm = 1.0;
                let neighbors = [
                    (t as i64 - 1, h as i64, w as i64),
                    (t as i64 + 1, h as i64, w as i64),
                    (t as i64, h as i64 - 1, w as i64),
                    (t as i64, h as i64 + 1, w as i64),
                    (t as i64, h as i64, w as i64 - 1),
                    (t as i64, h as i64, w as i64 + 1),
                ];
                for (tt, hh, ww) in neighbors {
                    if tt < 0 || hh < 0 || ww < 0 {
                        continue;
                    }
                    let (tt, hh, ww) = (tt as usize, hh as usize, ww as usize);
                    if tt >= gt || hh >= gh || ww >= gw {
                        continue;
                    }
                    acc += 0.5 * contrast[at(tt, hh, ww)];
                    norm += 0.5;
                }
                smoothed[at(t, h, w)] = acc / norm;
            }
        }
    }
    // cube to concentrate mass at high-contrast regions (fixation-like
    // peaks), then normalize to mean one
    for v in &mut smoothed {
        *v = v.powi(3);
    }
    let mean = smoothed.iter().sum::<f64>() / n_regions as f64;
    if mean <= 0.0 {
        return Err(KvqError::Numerical("saliency proxy collapsed to zero".to_string()));
    }
    for v in &mut smoothed {
        *v /= mean;
    }
    Tensor::new(cfg.grid.to_vec(), smoothed)
}

/// Generates one clip with its ground truth maps and scalar opinion score.
pub fn synth_clip(seed: u64, cfg: &SynthConfig) -> Result<SyntheticClip> {
    cfg.validate()?;
    let base = synth_base(seed, cfg.frames, cfg.height, cfg.width);
    let severities = severity_grid(seed, cfg.grid);
    let video = distort(&base, cfg, &severities, seed)?;
    let proxy = saliency_proxy(&base, cfg)?;
    let local_quality = Tensor::from_fn(&cfg.grid, |i| 1.0 - severities.data()[i]);
    let global_mos = proxy
        .data()
        .iter()
        .zip(local_quality.data())
        .map(|(s, q)| s * q)
        .sum::<f64>()
        / proxy.numel() as f64;
    Ok(SyntheticClip { video, local_quality, saliency_proxy: proxy, global_mos, seed })
}

/// Worker cap: `KVQ_THREADS` if set, else available parallelism (at most 8).
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("KVQ_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8)
}

fn clip_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("clip_{index:04}"))
}

/// Writes one clip directory: video, ground-truth maps, and a JSON-lines meta
/// file carrying the seed and score.
pub fn save_clip(dir: &Path, clip: &SyntheticClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensor(&dir.join("video.kvqt"), &clip.video)?;
    write_tensor(&dir.join("local_quality.kvqt"), &clip.local_quality)?;
    write_tensor(&dir.join("saliency.kvqt"), &clip.saliency_proxy)?;
    let meta = serde_json::json!({
        "seed": clip.seed,
        "global_mos": clip.global_mos,
    });
    fs::write(dir.join("meta.jsonl"), format!("{meta}\n"))?;
    Ok(())
}

pub fn load_clip(dir: &Path) -> Result<SyntheticClip> {
    let video = read_tensor(&dir.join("video.kvqt"))?;
    let local_quality = read_tensor(&dir.join("local_quality.kvqt"))?;
    let saliency = read_tensor(&dir.join("saliency.kvqt"))?;
    let meta_text = fs::read_to_string(dir.join("meta.jsonl"))?;
    let line = meta_text
        .lines()
        .next()
        .ok_or_else(|| KvqError::Format("empty meta.jsonl".to_string()))?;
    let meta: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| KvqError::Format(format!("meta.jsonl: {e}")))?;
    let seed = meta["seed"]
        .as_u64()
        .ok_or_else(|| KvqError::Format("meta.jsonl missing seed".to_string()))?;
    let global_mos = meta["global_mos"]
        .as_f64()
        .ok_or_else(|| KvqError::Format("meta.jsonl missing global_mos".to_string()))?;
    Ok(SyntheticClip { video, local_quality, saliency_proxy: saliency, global_mos, seed })
}

/// Generates `count` clips under `root/clip_####/`, seeds `base_seed + i`.
/// Clips are independent, so generation parallelizes across a worker pool
/// without affecting the output bytes.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig, count: usize, base_seed: u64) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(root)?;
    let workers = worker_threads().min(count.max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let failure = std::sync::Mutex::new(None::<KvqError>);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= count || failure.lock().unwrap().is_some() {
                    break;
                }
                let result = synth_clip(base_seed + i as u64, cfg)
                    .and_then(|clip| save_clip(&clip_dir(root, i), &clip));
                if let Err(e) = result {
                    *failure.lock().unwrap() = Some(e);
                    break;
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Loads every `clip_####` directory under `root`, in index order.
pub fn load_dataset(root: &Path) -> Result<Vec<SyntheticClip>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("clip_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(KvqError::input(format!("no clip_#### directories under {}", root.display())));
    }
    dirs.iter().map(|d| load_clip(d)).collect()
}
