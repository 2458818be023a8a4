//! `kvq train`: dataset preparation, optimization, logging, checkpointing.

use std::fs;
use std::io::Write;
use std::path::Path;

use kvq_core::data::synth::{generate_dataset, load_dataset, SyntheticClip};
use kvq_core::eval::evaluate_dataset;
use kvq_core::model::KvqModel;
use kvq_core::train::{train, StepLog};
use kvq_core::KvqError;

use crate::CliError;

pub fn run(
    config: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = super::load_config(config)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    cfg.train.weights.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.backbone
        .validate_for(cfg.video_dims())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(out)?;

    // dataset: load when supplied, generate otherwise
    let clips: Vec<SyntheticClip> = match data {
        Some(path) => load_dataset(path)?,
        None => {
            let dir = out.join("dataset");
            if !dir.join("clip_0000").exists() {
                eprintln!("generating {} clips under {}", cfg.clips, dir.display());
                generate_dataset(&dir, &cfg.synth, cfg.clips, cfg.data_seed)?;
            }
            load_dataset(&dir)?
        }
    };
    if cfg.holdout >= clips.len() {
        return Err(CliError::Usage(format!(
            "holdout {} must be below the clip count {}",
            cfg.holdout,
            clips.len()
        )));
    }
    let split = clips.len() - cfg.holdout;
    let (train_clips, held) = clips.split_at(split);

    let mut model = KvqModel::init(cfg.backbone.clone(), cfg.train.seed);
    eprintln!(
        "training: {} clips, {} held out, {} parameters, seed {}",
        train_clips.len(),
        held.len(),
        model.params.total_scalars(),
        cfg.train.seed
    );

    let log_path = out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)?;
    writeln!(
        log,
        "{}",
        serde_json::json!({
            "event": "config",
            "config_hash": cfg.config_hash,
            "seed": cfg.train.seed,
            "lambda_r": cfg.train.weights.lambda_r,
            "lambda_p": cfg.train.weights.lambda_p,
            "epochs": cfg.train.epochs,
            "batch_size": cfg.train.batch_size,
            "lr": cfg.train.lr,
            "clips": train_clips.len(),
        })
    )?;

    let mut write_step = |l: &StepLog| {
        let line = serde_json::json!({
            "step": l.step,
            "plcc_loss": l.plcc_loss,
            "rank_loss": l.rank_loss,
            "lpc_loss": l.lpc_loss,
            "total": l.total,
        });
        let _ = writeln!(log, "{line}");
    };
    let steps = train(&mut model, train_clips, &cfg.train, &mut write_step).map_err(|e| match e {
        KvqError::Numerical(m) => CliError::Numerical(m),
        other => CliError::Core(other),
    })?;
    drop(log);
    eprintln!("finished {steps} steps");

    let seed_str = cfg.train.seed.to_string();
    model.save_checkpoint(
        &out.join("checkpoint.kvqt"),
        &out.join("checkpoint.manifest"),
        &[("config_hash", cfg.config_hash.as_str()), ("seed", seed_str.as_str())],
    )?;

    // final metrics on the held-out clips (train split when none held out)
    let eval_clips = if held.is_empty() { train_clips } else { held };
    let eval = evaluate_dataset(&model, eval_clips)?;
    let metrics = serde_json::json!({
        "config_hash": cfg.config_hash,
        "seed": cfg.train.seed,
        "split": if held.is_empty() { "train" } else { "holdout" },
        "clips": eval_clips.len(),
        "global_srcc": eval.global_srcc,
        "global_plcc": eval.global_plcc,
        "region_mean_srcc": eval.region_mean_srcc,
        "region_clips_used": eval.region_clips_used,
    });
    fs::write(out.join("final_metrics.json"), format!("{metrics}\n"))?;
    eprintln!(
        "holdout global SRCC {:.4} PLCC {:.4}",
        eval.global_srcc, eval.global_plcc
    );
    Ok(())
}
