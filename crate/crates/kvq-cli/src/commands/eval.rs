//! `kvq eval`: metric reports for a checkpoint on a dataset.
//!
//! Two dataset layouts are recognized: clip directories (`clip_####/`) with
//! optional saliency ground truth, and region-annotation sets (a directory
//! holding `annotations.csv` plus `images/{image_id}.kvqt`).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use kvq_core::data::lpvq::{cell_mos, load_lpvq_csv, GRID};
use kvq_core::data::sampling::replicate_image;
use kvq_core::data::synth::load_dataset;
use kvq_core::eval::{evaluate_dataset, evaluate_saliency};
use kvq_core::metrics::{inter_sample_eval, intra_sample_eval, CellKey};
use kvq_core::model::KvqModel;
use kvq_core::tensor::{read_tensor, Tape};

use crate::CliError;

pub fn run(config: Option<&Path>, checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = super::load_config(config)?;
    let manifest = checkpoint.with_extension("manifest");
    let (model, header) = KvqModel::load_checkpoint(checkpoint, &manifest)?;
    let seed = header
        .iter()
        .find(|(k, _)| k == "seed")
        .map(|(_, v)| v.clone())
        .unwrap_or_default();
    fs::create_dir_all(out)?;

    let mut rows: Vec<(String, String)> = Vec::new();
    let mut detail = fs::File::create(out.join("eval_detail.jsonl"))?;

    if data.join("annotations.csv").exists() {
        let dataset_name = data.file_name().and_then(|n| n.to_str()).unwrap_or("regions");
        let records = load_lpvq_csv(&data.join("annotations.csv"))?;
        let mut image_ids: Vec<String> = records.iter().map(|r| r.image_id.clone()).collect();
        image_ids.sort();
        image_ids.dedup();

        let mut predictions: HashMap<CellKey, f64> = HashMap::new();
        for image_id in &image_ids {
            let image = read_tensor(&data.join("images").join(format!("{image_id}.kvqt")))?;
            let clip = replicate_image(&image, 16)?;
            let grid = predict_region_grid(&model, &clip)?;
            for row in 0..GRID {
                for col in 0..GRID {
                    predictions.insert(
                        (image_id.clone(), row, col),
                        grid[row * GRID + col],
                    );
                }
            }
            let mos = cell_mos(&records, image_id)?;
            writeln!(
                detail,
                "{}",
                serde_json::json!({
                    "image_id": image_id,
                    "predictions": grid,
                    "cell_mos": mos.data(),
                })
            )?;
        }
        let inter = inter_sample_eval(&records, &predictions)?;
        let intra = intra_sample_eval(&records, &predictions)?;
        rows.push(("inter_srcc".into(), format!("{:.6}", inter.srcc)));
        rows.push(("inter_plcc".into(), format!("{:.6}", inter.plcc)));
        rows.push(("intra_mean_srcc".into(), format!("{:.6}", intra.mean_srcc)));
        rows.push(("intra_mean_plcc".into(), format!("{:.6}", intra.mean_plcc)));
        rows.push(("intra_images_used".into(), intra.images_used.to_string()));
        rows.push(("intra_images_skipped".into(), intra.images_skipped.to_string()));
        write_report(out, dataset_name, &cfg.config_hash, &seed, &rows)?;
        eprintln!(
            "regions: inter SRCC {:.4}, intra mean SRCC {:.4}",
            inter.srcc, intra.mean_srcc
        );
        return Ok(());
    }

    // clip-directory dataset
    let dataset_name = data.file_name().and_then(|n| n.to_str()).unwrap_or("clips");
    let clips = load_dataset(data)?;
    let eval = evaluate_dataset(&model, &clips)?;
    rows.push(("global_srcc".into(), format!("{:.6}", eval.global_srcc)));
    rows.push(("global_plcc".into(), format!("{:.6}", eval.global_plcc)));
    if let Some(v) = eval.region_mean_srcc {
        rows.push(("intra_mean_srcc".into(), format!("{v:.6}")));
        rows.push(("intra_clips_used".into(), eval.region_clips_used.to_string()));
        rows.push(("intra_clips_skipped".into(), eval.region_clips_skipped.to_string()));
    } else {
        rows.push(("intra_mean_srcc".into(), "absent".into()));
    }
    for clip in &eval.per_clip {
        writeln!(
            detail,
            "{}",
            serde_json::json!({
                "clip": clip.index,
                "quality": clip.quality,
                "global_mos": clip.global_mos,
                "region_srcc": clip.region_srcc,
            })
        )?;
    }

    // saliency metrics only when every clip carries a nonzero proxy map
    let has_saliency = clips
        .iter()
        .all(|c| c.saliency_proxy.data().iter().any(|&v| v > 0.0));
    if has_saliency {
        match evaluate_saliency(&model, &clips) {
            Ok(sal) => {
                rows.push(("saliency_srcc".into(), format!("{:.6}", sal.mean_srcc)));
                rows.push(("saliency_plcc".into(), format!("{:.6}", sal.mean_plcc)));
                rows.push(("sauc".into(), format!("{:.6}", sal.mean_sauc)));
                rows.push(("nss".into(), format!("{:.6}", sal.mean_nss)));
                rows.push(("kl".into(), format!("{:.6}", sal.mean_kl)));
            }
            Err(e) => {
                eprintln!("saliency metrics unavailable: {e}");
                rows.push(("sauc".into(), "absent".into()));
            }
        }
    } else {
        rows.push(("sauc".into(), "absent".into()));
        rows.push(("nss".into(), "absent".into()));
        rows.push(("kl".into(), "absent".into()));
    }
    write_report(out, dataset_name, &cfg.config_hash, &seed, &rows)?;
    eprintln!("global SRCC {:.4} PLCC {:.4}", eval.global_srcc, eval.global_plcc);
    Ok(())
}

/// Texture prediction averaged over time and resampled to the annotation
/// grid, row-major.
fn predict_region_grid(model: &KvqModel, clip: &kvq_core::tensor::Tensor) -> Result<Vec<f64>, CliError> {
    let maps = model.evaluate_clip(clip)?;
    let mut tape = Tape::new();
    let q = tape.constant(maps.texture);
    let shape = tape.shape(q).to_vec();
    // average over time, then map the spatial grid onto GRID x GRID
    let time_pooled = tape.avg_pool(q, &[shape[0], 1, 1])?;
    let on_grid = kvq_core::heads::to_common_grid(&mut tape, time_pooled, [1, GRID, GRID])?;
    Ok(tape.data(on_grid).to_vec())
}

fn write_report(
    out: &Path,
    dataset: &str,
    config_hash: &str,
    seed: &str,
    rows: &[(String, String)],
) -> Result<(), CliError> {
    let mut csv = String::new();
    csv.push_str(&format!("# config_hash={config_hash}\n# seed={seed}\n"));
    csv.push_str("metric,dataset,value\n");
    for (metric, value) in rows {
        csv.push_str(&format!("{metric},{dataset},{value}\n"));
    }
    fs::write(out.join("eval_report.csv"), csv)?;
    Ok(())
}
