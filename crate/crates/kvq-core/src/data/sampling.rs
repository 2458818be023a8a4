//! Frame sampling, resizing, and image replication.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{KvqError, Result};
use crate::model::video_dims;
use crate::tensor::Tensor;

/// Segment-based frame sampling policy.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SampleSpec {
    pub num_frames: usize,
    pub num_segments: usize,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec { num_frames: 32, num_segments: 8, seed: 0 }
    }
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_segments == 0 || self.num_frames % self.num_segments != 0 {
            return Err(KvqError::config(format!(
                "num_frames {} must be divisible by num_segments {}",
                self.num_frames, self.num_segments
            )));
        }
        Ok(())
    }
}

/// Strictly increasing frame indices: the video splits into equal contiguous
/// segments and each contributes `num_frames / num_segments` indices drawn
/// uniformly without replacement.
pub fn sample_frame_indices(total_frames: usize, spec: &SampleSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    if total_frames < spec.num_frames {
        return Err(KvqError::input(format!(
            "video has {total_frames} frames, need at least {}",
            spec.num_frames
        )));
    }
    let per_seg = spec.num_frames / spec.num_segments;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut indices = Vec::with_capacity(spec.num_frames);
    for s in 0..spec.num_segments {
        let start = s * total_frames / spec.num_segments;
        let end = (s + 1) * total_frames / spec.num_segments;
        let mut picked = rand::seq::index::sample(&mut rng, end - start, per_seg).into_vec();
        picked.sort_unstable();
        indices.extend(picked.into_iter().map(|i| start + i));
    }
    Ok(indices)
}

/// Extracts the sampled frames as a new clip.
pub fn sample_frames(video: &Tensor, spec: &SampleSpec) -> Result<Tensor> {
    let [t, h, w] = video_dims(video)?;
    let indices = sample_frame_indices(t, spec)?;
    let frame_len = h * w * 3;
    let mut data = Vec::with_capacity(indices.len() * frame_len);
    for &f in &indices {
        data.extend_from_slice(&video.data()[f * frame_len..(f + 1) * frame_len]);
    }
    Tensor::new(vec![indices.len(), h, w, 3], data)
}

/// Per-frame bilinear resize with corner alignment; aspect ratio is not
/// preserved (frames stretch to the target).
pub fn resize_frames(video: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let [t, h, w] = video_dims(video)?;
    if target_h == 0 || target_w == 0 {
        return Err(KvqError::shape("resize_frames: zero target dimension".to_string()));
    }
    let src = video.data();
    let mut out = Vec::with_capacity(t * target_h * target_w * 3);
    for f in 0..t {
        let frame = &src[f * h * w * 3..(f + 1) * h * w * 3];
        for oh in 0..target_h {
            let (h0, h1, fh) = lerp(oh, target_h, h);
            for ow in 0..target_w {
                let (w0, w1, fw) = lerp(ow, target_w, w);
                for c in 0..3 {
                    let v00 = frame[(h0 * w + w0) * 3 + c];
                    let v01 = frame[(h0 * w + w1) * 3 + c];
                    let v10 = frame[(h1 * w + w0) * 3 + c];
                    let v11 = frame[(h1 * w + w1) * 3 + c];
                    let top = v00 * (1.0 - fw) + v01 * fw;
                    let bot = v10 * (1.0 - fw) + v11 * fw;
                    out.push(top * (1.0 - fh) + bot * fh);
                }
            }
        }
    }
    Tensor::new(vec![t, target_h, target_w, 3], out)
}

fn lerp(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let i0 = (pos.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Stacks an `[H,W,3]` image into a clip of identical frames.
pub fn replicate_image(image: &Tensor, frames: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(KvqError::shape(format!("replicate_image: need [H,W,3], got {s:?}")));
    }
    let mut data = Vec::with_capacity(frames * image.numel());
    for _ in 0..frames {
        data.extend_from_slice(image.data());
    }
    Tensor::new(vec![frames, s[0], s[1], 3], data)
}
