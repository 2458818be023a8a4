//! `kvq maps`: exports saliency, texture, and per-patch texture maps for one
//! input, plus optional routing tables.

use std::fs;
use std::path::Path;

use kvq_core::backbone::WindowMode;
use kvq_core::data::sampling::replicate_image;
use kvq_core::export::{export_map, write_routing_csv};
use kvq_core::lpc::{patchwise_texture, slice_patches};
use kvq_core::model::{video_dims, KvqModel};
use kvq_core::tensor::{read_tensor, Tape, Tensor};

use crate::CliError;

pub fn run(
    config: Option<&Path>,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    routing: bool,
) -> Result<(), CliError> {
    let cfg = super::load_config(config)?;
    let manifest = checkpoint.with_extension("manifest");
    let (model, header) = KvqModel::load_checkpoint(checkpoint, &manifest)?;
    let video = load_input(input)?;
    let dims = video_dims(&video)?;
    fs::create_dir_all(out)?;

    let plan = model.plan(dims, WindowMode::Strict)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let vid = tape.constant(video.clone());
    let maps = model.forward(&mut tape, vid, &plan, &bound)?;

    export_map(out, "saliency", tape.value(maps.saliency))?;
    export_map(out, "texture", tape.value(maps.texture))?;

    // per-patch texture map
    let grid = slice_patches(&video, model.cfg.total_stride())?;
    let qhat = patchwise_texture(&model, &mut tape, &grid, &bound)?;
    export_map(out, "texture_patchwise", tape.value(qhat))?;

    if routing {
        write_routing_csv(&out.join("routing.csv"), &tape, &maps.bundles)?;
    }

    let seed = header
        .iter()
        .find(|(k, _)| k == "seed")
        .map(|(_, v)| v.clone())
        .unwrap_or_default();
    let info = serde_json::json!({
        "config_hash": cfg.config_hash,
        "checkpoint_seed": seed,
        "input": input.display().to_string(),
        "quality": tape.value(maps.quality).item()?,
    });
    fs::write(out.join("run_info.json"), format!("{info}\n"))?;
    eprintln!("quality {:.6}", tape.value(maps.quality).item()?);
    Ok(())
}

/// Accepts a clip directory (`video.kvqt` inside), a raw video tensor, or an
/// `[H,W,3]` image (replicated to a 16-frame clip).
fn load_input(input: &Path) -> Result<Tensor, CliError> {
    let tensor = if input.is_dir() {
        read_tensor(&input.join("video.kvqt"))?
    } else {
        read_tensor(input)?
    };
    match tensor.shape().len() {
        4 => Ok(tensor),
        3 => Ok(replicate_image(&tensor, 16)?),
        _ => Err(CliError::Usage(format!(
            "input must be a [T,H,W,3] clip or [H,W,3] image, got shape {:?}",
            tensor.shape()
        ))),
    }
}
