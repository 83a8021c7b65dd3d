use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use xcdiff_core::actstore::{shard_stats, stream_batches};
use xcdiff_core::toymodel::{recovery, PlantedKind};
use xcdiff_core::trainer::{normalize_factors, train as train_coder, Checkpoint, TrainMetrics};

use crate::run::{relative, Run, CHECKPOINT_FILE, METRICS_FILE};

/// Cosine a planted row must reach to count as recovered.
pub const RECOVERY_THRESHOLD: f64 = 0.9;

#[derive(Debug, Serialize)]
pub struct RecoverySummary {
    pub threshold: f64,
    pub recovered_fraction: f64,
    pub mmcs_per_side: Vec<f64>,
    pub recovered_shared: usize,
    pub recovered_unique_base: usize,
    pub recovered_unique_distilled: usize,
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub resumed_from_step: Option<u64>,
    pub rows: u64,
    pub normalization: Vec<f64>,
    pub train_config_digest: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub metrics_file: String,
    pub metrics_rows: usize,
    pub first: Option<TrainMetrics>,
    pub last: Option<TrainMetrics>,
    pub recovery: Option<RecoverySummary>,
}

pub fn train(run: &Run, resume: Option<&Path>) -> Result<TrainReport> {
    let paths = run.shard_paths()?;
    let stats = shard_stats(&paths)?;
    let dims: Vec<usize> = stats.sides.iter().map(|s| s.mean.len()).collect();
    let mut cfg = run.config.train.clone();
    if cfg.normalization.is_empty() {
        cfg.normalization = normalize_factors(&stats)?;
    }
    let resume = match resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let resumed_from_step = resume.as_ref().map(|c| c.header.step);
    let stream = stream_batches(&paths, cfg.batch_size, cfg.shuffle_buffer, cfg.seed)?.with_epochs(None);
    let out = train_coder(cfg.clone(), &dims, stream, resume)?;

    let ckpt_path = run.path(CHECKPOINT_FILE);
    out.checkpoint.save(&ckpt_path)?;
    let mut lines = String::new();
    if resumed_from_step.is_some() {
        if let Ok(prev) = std::fs::read_to_string(run.path(METRICS_FILE)) {
            lines = prev;
        }
    }
    for m in &out.metrics {
        writeln!(lines, "{}", serde_json::to_string(m)?).expect("writing to a String cannot fail");
    }
    let metrics_path = run.write_text(METRICS_FILE, &lines)?;

    let recovery = match run.load_world()? {
        Some(world) if world.dims[..] == dims[..] => {
            let r = recovery(&world, &out.params, RECOVERY_THRESHOLD)?;
            Some(RecoverySummary {
                threshold: r.threshold,
                recovered_fraction: r.recovered_fraction,
                mmcs_per_side: r.mmcs_per_side.clone(),
                recovered_shared: r.recovered(PlantedKind::Shared).len(),
                recovered_unique_base: r.recovered(PlantedKind::UniqueBase).len(),
                recovered_unique_distilled: r.recovered(PlantedKind::UniqueDistilled).len(),
            })
        }
        _ => None,
    };
    let report = TrainReport {
        steps: out.checkpoint.header.step,
        resumed_from_step,
        rows: stats.rows,
        normalization: cfg.normalization.clone(),
        train_config_digest: cfg.digest(),
        checkpoint: relative(run, &ckpt_path),
        checkpoint_sha256: out.checkpoint.digest()?,
        metrics_file: relative(run, &metrics_path),
        metrics_rows: lines.lines().count(),
        first: out.metrics.first().cloned(),
        last: out.metrics.last().cloned(),
        recovery,
    };
    run.write_report("train", "train_report.json", &report)
        .context("writing train report")?;
    Ok(report)
}
