//! Dataset-level evaluation: global score correlation, per-clip region
//! correlation of the texture map, and saliency agreement metrics.

use crate::data::synth::SyntheticClip;
use crate::error::{KvqError, Result};
use crate::metrics::{fixation_points, kl_div, nss, plcc, sauc, srcc};
use crate::model::KvqModel;
use crate::tensor::Tensor;

/// One clip's predictions next to its ground truth.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ClipEval {
    pub index: usize,
    pub quality: f64,
    pub global_mos: f64,
    /// Rank correlation of texture vs region quality within this clip, when
    /// the region labels vary.
    pub region_srcc: Option<f64>,
}

/// Quality-side evaluation over a clip set.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DatasetEval {
    pub global_srcc: f64,
    pub global_plcc: f64,
    /// Mean per-clip texture/label rank correlation (intra-sample protocol).
    pub region_mean_srcc: Option<f64>,
    pub region_clips_used: usize,
    pub region_clips_skipped: usize,
    pub per_clip: Vec<ClipEval>,
}

/// Saliency-side evaluation against the clips' proxy maps.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SaliencyEval {
    pub mean_srcc: f64,
    pub mean_plcc: f64,
    pub mean_sauc: f64,
    pub mean_nss: f64,
    pub mean_kl: f64,
    pub clips: usize,
    /// Clips without any cross-sample negative coordinate; their shuffled
    /// AUC is undefined and they are excluded from `mean_sauc`.
    pub sauc_skipped: usize,
}

/// Runs the model over every clip, correlating predicted quality with the
/// constructed opinion scores and texture maps with region quality.
pub fn evaluate_dataset(model: &KvqModel, clips: &[SyntheticClip]) -> Result<DatasetEval> {
    if clips.len() < 2 {
        return Err(KvqError::input("need at least two clips for correlation metrics"));
    }
    let mut qualities = Vec::with_capacity(clips.len());
    let mut moses = Vec::with_capacity(clips.len());
    let mut per_clip = Vec::with_capacity(clips.len());
    let mut region_acc = 0.0;
    let mut region_used = 0usize;
    let mut region_skipped = 0usize;
    for (index, clip) in clips.iter().enumerate() {
        let maps = model.evaluate_clip(&clip.video)?;
        qualities.push(maps.quality);
        moses.push(clip.global_mos);
        let region_srcc = if maps.texture.shape() == clip.local_quality.shape() {
            let labels = clip.local_quality.data();
            let spread = labels.iter().any(|&v| v != labels[0]);
            if spread {
                let rho = srcc(maps.texture.data(), labels)?;
                region_acc += rho;
                region_used += 1;
                Some(rho)
            } else {
                region_skipped += 1;
                None
            }
        } else {
            region_skipped += 1;
            None
        };
        per_clip.push(ClipEval { index, quality: maps.quality, global_mos: clip.global_mos, region_srcc });
    }
    Ok(DatasetEval {
        global_srcc: srcc(&qualities, &moses)?,
        global_plcc: plcc(&qualities, &moses)?,
        region_mean_srcc: (region_used > 0).then(|| region_acc / region_used as f64),
        region_clips_used: region_used,
        region_clips_skipped: region_skipped,
        per_clip,
    })
}

/// Compares predicted saliency maps with the clips' proxy maps: rank/linear
/// correlation per clip, plus fixation-based shuffled AUC, scanpath saliency,
/// and KL divergence. Negatives for the shuffled AUC are the union of the
/// other clips' fixation coordinates.
pub fn evaluate_saliency(model: &KvqModel, clips: &[SyntheticClip]) -> Result<SaliencyEval> {
    if clips.len() < 2 {
        return Err(KvqError::input("shuffled AUC needs at least two clips"));
    }
    let mut preds: Vec<Tensor> = Vec::with_capacity(clips.len());
    let mut fixations: Vec<Vec<usize>> = Vec::with_capacity(clips.len());
    for clip in clips {
        let maps = model.evaluate_clip(&clip.video)?;
        if maps.saliency.shape() != clip.saliency_proxy.shape() {
            return Err(KvqError::shape(format!(
                "saliency grid {:?} vs proxy {:?}",
                maps.saliency.shape(),
                clip.saliency_proxy.shape()
            )));
        }
        fixations.push(fixation_points(&clip.saliency_proxy)?);
        preds.push(maps.saliency);
    }
    let mut s_acc = 0.0;
    let mut p_acc = 0.0;
    let mut auc_acc = 0.0;
    let mut auc_used = 0usize;
    let mut nss_acc = 0.0;
    let mut kl_acc = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let pred = &preds[i];
        s_acc += srcc(pred.data(), clip.saliency_proxy.data())?;
        p_acc += plcc(pred.data(), clip.saliency_proxy.data())?;
        let mut negatives: Vec<usize> = Vec::new();
        for (j, fx) in fixations.iter().enumerate() {
            if j != i {
                negatives.extend(fx.iter().copied());
            }
        }
        negatives.sort_unstable();
        negatives.dedup();
        negatives.retain(|n| !fixations[i].contains(n));
        if !negatives.is_empty() {
            auc_acc += sauc(pred, &fixations[i], &negatives)?;
            auc_used += 1;
        }
        nss_acc += nss(pred, &fixations[i])?;
        kl_acc += kl_div(&clip.saliency_proxy, pred)?;
    }
    if auc_used == 0 {
        return Err(KvqError::UndefinedMetric(
            "no clip has cross-sample negatives; shuffled AUC undefined everywhere".to_string(),
        ));
    }
    let n = clips.len() as f64;
    Ok(SaliencyEval {
        mean_srcc: s_acc / n,
        mean_plcc: p_acc / n,
        mean_sauc: auc_acc / auc_used as f64,
        mean_nss: nss_acc / n,
        mean_kl: kl_acc / n,
        clips: clips.len(),
        sauc_skipped: clips.len() - auc_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::synth::{synth_clip, SynthConfig};

    #[test]
    fn evaluation_produces_finite_metrics() {
        let cfg = BackboneConfig {
            patch: [2, 4, 4],
            channels: vec![8, 8],
            blocks: vec![1, 1],
            window: [1, 2, 2],
            top_k: 1,
            heads: 2,
            ffn_mult: 2,
        };
        let model = KvqModel::init(cfg, 3);
        let synth = SynthConfig { frames: 4, height: 16, width: 16, grid: [2, 2, 2] };
        let clips: Vec<_> = (0..4).map(|i| synth_clip(900 + i, &synth).unwrap()).collect();
        let eval = evaluate_dataset(&model, &clips).unwrap();
        assert!(eval.global_srcc.is_finite());
        assert!(eval.global_plcc.is_finite());
        assert_eq!(eval.per_clip.len(), 4);
        assert!(eval.region_clips_used + eval.region_clips_skipped == 4);

        let sal = evaluate_saliency(&model, &clips).unwrap();
        assert!((0.0..=1.0).contains(&sal.mean_sauc));
        assert!(sal.mean_kl >= 0.0);
        assert!(sal.mean_nss.is_finite());
    }
}
