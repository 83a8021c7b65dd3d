use std::fs;
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;
use xcdiff_core::actstore::{open_shard, sidecar_path};
use xcdiff_core::toymodel::{plant_world, sample_shards, PlantedCounts};

use crate::run::{file_digest, relative, Run};

#[derive(Debug, Serialize)]
pub struct ShardEntry {
    pub path: String,
    pub rows: u64,
    pub sha256: String,
    pub meta_sha256: String,
}

#[derive(Debug, Serialize)]
pub struct SynthReport {
    pub n_tokens: usize,
    pub n_docs: usize,
    pub counts: PlantedCounts,
    pub dims: [usize; 2],
    pub firing_prob: f64,
    pub world: String,
    pub world_sha256: String,
    pub shards: Vec<ShardEntry>,
}

pub fn synth(run: &Run) -> Result<SynthReport> {
    let cfg = &run.config.synth;
    let world = Arc::new(plant_world(&cfg.world(run.config.world_seed()))?);
    let dir = run.shard_dir();
    clear_shards(&dir)?;
    let (corpus, paths) = sample_shards(
        world.clone(),
        cfg.n_tokens,
        run.config.stream_seed(),
        &dir,
        cfg.rows_per_shard,
    )?;
    let world_path = dir.join("world.json");
    let mut shards = Vec::with_capacity(paths.len());
    for p in &paths {
        shards.push(ShardEntry {
            path: relative(run, p),
            rows: open_shard(p)?.1.n_rows,
            sha256: file_digest(p)?,
            meta_sha256: file_digest(&sidecar_path(p))?,
        });
    }
    let report = SynthReport {
        n_tokens: corpus.len(),
        n_docs: corpus.n_docs(),
        counts: world.counts,
        dims: world.dims,
        firing_prob: world.firing_prob,
        world: relative(run, &world_path),
        world_sha256: file_digest(&world_path)?,
        shards,
    };
    run.write_report("synth", "synth_report.json", &report)?;
    Ok(report)
}

/// Removes shards left by an earlier run so the directory holds exactly one
/// stream.
fn clear_shards(dir: &std::path::Path) -> Result<()> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for e in entries.flatten() {
        let p = e.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("shard-") && p.extension().is_some_and(|x| x == "bin") {
            fs::remove_file(&p).with_context(|| format!("removing stale shard {}", p.display()))?;
            let side = sidecar_path(&p);
            if side.exists() {
                fs::remove_file(&side).with_context(|| format!("removing stale sidecar {}", side.display()))?;
            }
        }
    }
    Ok(())
}
