use anyhow::{Context, Result};
use serde::Serialize;

use crate::commands::{ablate, diff, geometry, steer, synth, train};
use crate::run::{file_digest, Run};

#[derive(Debug, Serialize)]
pub struct StageDigest {
    pub stage: &'static str,
    pub report: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct ReproReport {
    pub stages: Vec<StageDigest>,
    pub recovered_fraction: Option<f64>,
    pub mean_nrn: f64,
    pub trimodal: bool,
    /// Largest pooled distilled-side ablation ratio over the `k` grid.
    pub worst_distilled_ratio: Option<f64>,
    pub max_geometry_loss: f64,
}

/// synth → train → diff → ablate → steer → geometry in one output directory.
pub fn repro_desk(run: &Run) -> Result<ReproReport> {
    synth::synth(run).context("stage synth")?;
    let t = train::train(run, None).context("stage train")?;
    let d = diff::diff(run, false).context("stage diff")?;
    let a = ablate::ablate(run, None).context("stage ablate")?;
    steer::steer(run, None, None).context("stage steer")?;
    let g = geometry::geometry(run, None).context("stage geometry")?;

    let mut stages = Vec::new();
    for (stage, name) in [
        ("synth", "synth_report.json"),
        ("train", "train_report.json"),
        ("diff", "diff_report.json"),
        ("ablate", "ablate_report.json"),
        ("steer", "steer_report.json"),
        ("geometry", "geometry_report.json"),
    ] {
        stages.push(StageDigest {
            stage,
            report: name.to_string(),
            sha256: file_digest(&run.path(name))?,
        });
    }
    let worst_distilled_ratio = a
        .pooled
        .iter()
        .filter_map(|r| r.ratio())
        .fold(None, |w: Option<f64>, x| Some(w.map_or(x, |w| w.max(x))));
    let report = ReproReport {
        stages,
        recovered_fraction: t.recovery.as_ref().map(|r| r.recovered_fraction),
        mean_nrn: d.diff.mean_nrn,
        trimodal: d.diff.modality.trimodal,
        worst_distilled_ratio,
        max_geometry_loss: g
            .geometry
            .results
            .iter()
            .flat_map(|r| r.classes.iter().flat_map(|c| c.losses.iter().copied()))
            .fold(0.0, f64::max),
    };
    run.write_report("repro-desk", "repro_report.json", &report)?;
    Ok(report)
}
