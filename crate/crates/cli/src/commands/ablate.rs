use std::fmt::Write as _;

use anyhow::{Context, Result};
use serde::Serialize;
use xcdiff_core::diff::{feature_stats, firing_stats, CategoryAnchor};
use xcdiff_core::intervene::{
    logit_change, select_ablation_set, AblationScope, AblationSpec, LogitChangeOptions, LogitChangeReport,
};
use xcdiff_core::toymodel::{planted_adapter, PlantedCorpus};
use xcdiff_core::{Error, Side};

use crate::run::{checkpoint_params, Run};

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub category: String,
    pub top_percent: f64,
    pub features: Vec<usize>,
    pub n_active: usize,
    pub n_candidates: usize,
    pub budget: usize,
    pub empty_active_set: bool,
    pub n_occurrences: usize,
    pub under_sampled: bool,
    pub distilled_mean_delta: f64,
    pub base_mean_delta: f64,
    pub base_mean_abs_delta: f64,
    /// Mean planted logit contribution to the target on the distilled side
    /// at the measured occurrences.
    pub planted_contribution: f64,
}

/// All measured categories at one `k`, weighted by occurrence count.
#[derive(Debug, Serialize)]
pub struct PooledRow {
    pub top_percent: f64,
    pub n_categories: usize,
    pub n_occurrences: usize,
    pub distilled_mean_delta: f64,
    pub base_mean_abs_delta: f64,
    pub planted_contribution: f64,
}

impl PooledRow {
    /// Distilled-side change as a fraction of the planted contribution.
    pub fn ratio(&self) -> Option<f64> {
        (self.planted_contribution > 0.0).then(|| self.distilled_mean_delta / self.planted_contribution)
    }
}

#[derive(Debug, Serialize)]
pub struct SkippedCategory {
    pub category: String,
    pub reason: String,
}

#[derive(Debug, Serialize)]
pub struct AblateReport {
    pub checkpoint_sha256: String,
    pub top_percent_grid: Vec<f64>,
    pub nrn_threshold: f64,
    pub scope: AblationScope,
    pub n_targets: usize,
    pub eval_tokens: usize,
    pub rows: Vec<AblationRow>,
    pub pooled: Vec<PooledRow>,
    pub skipped: Vec<SkippedCategory>,
}

pub fn ablate(run: &Run, grid_override: Option<Vec<f64>>) -> Result<AblateReport> {
    let cfg = &run.config.ablate;
    let grid = grid_override.unwrap_or_else(|| cfg.top_percent.clone());
    let ckpt = run.load_checkpoint()?;
    let (norm, raw) = checkpoint_params(&ckpt)?;
    let sparsity = ckpt.header.config.sparsity;
    let world = run.require_world()?;
    let categories = run.categories(Some(&world));
    let paths = run.shard_paths()?;
    let firing = firing_stats(&raw, &sparsity, &paths, &categories, CategoryAnchor::Predicting)
        .context("firing statistics over the training shards")?;
    let stats = feature_stats(&norm, &firing)?;

    let eval = run.eval_corpus(world.clone());
    let prompts = eval.documents();
    let distilled = planted_adapter(eval.clone(), Side::Distilled);
    let base = planted_adapter(eval.clone(), Side::Base);
    let options = LogitChangeOptions {
        n_targets: cfg.n_targets,
        seed: run.config.seed,
        scope: cfg.scope,
    };

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    'categories: for cat in &categories {
        for &k in &grid {
            let spec = AblationSpec {
                category: cat.name.clone(),
                nrn_threshold: cfg.nrn_threshold,
                top_percent: k,
                side: Side::Distilled,
            };
            let sel = select_ablation_set(&stats, &spec)?;
            let d = match logit_change(&distilled, &raw, &sparsity, &prompts, cat, &sel.features, &options) {
                Ok(r) => r,
                Err(Error::NoOccurrences(reason)) => {
                    skipped.push(SkippedCategory {
                        category: cat.name.clone(),
                        reason,
                    });
                    continue 'categories;
                }
                Err(e) => return Err(e.into()),
            };
            let b = logit_change(&base, &raw, &sparsity, &prompts, cat, &sel.features, &options)?;
            rows.push(AblationRow {
                category: cat.name.clone(),
                top_percent: k,
                n_active: sel.n_active,
                n_candidates: sel.n_candidates,
                budget: sel.budget,
                empty_active_set: sel.empty_active_set,
                n_occurrences: d.occurrences.len(),
                under_sampled: d.under_sampled,
                distilled_mean_delta: d.mean_delta,
                base_mean_delta: b.mean_delta,
                base_mean_abs_delta: mean_abs_delta(&b),
                planted_contribution: planted_contribution(&eval, &prompts, &d),
                features: sel.features,
            });
        }
    }
    run.write_text("ablate_summary.csv", &summary_csv(&rows))?;
    let pooled = grid.iter().map(|&k| pool(&rows, k)).collect();
    let report = AblateReport {
        checkpoint_sha256: ckpt.digest()?,
        top_percent_grid: grid,
        nrn_threshold: cfg.nrn_threshold,
        scope: cfg.scope,
        n_targets: cfg.n_targets,
        eval_tokens: eval.len(),
        rows,
        pooled,
        skipped,
    };
    run.write_report("ablate", "ablate_report.json", &report)?;
    Ok(report)
}

fn pool(rows: &[AblationRow], k: f64) -> PooledRow {
    let at: Vec<&AblationRow> = rows.iter().filter(|r| r.top_percent == k).collect();
    let n: usize = at.iter().map(|r| r.n_occurrences).sum();
    let weighted =
        |f: fn(&AblationRow) -> f64| at.iter().map(|r| f(r) * r.n_occurrences as f64).sum::<f64>() / n.max(1) as f64;
    PooledRow {
        top_percent: k,
        n_categories: at.len(),
        n_occurrences: n,
        distilled_mean_delta: weighted(|r| r.distilled_mean_delta),
        base_mean_abs_delta: weighted(|r| r.base_mean_abs_delta),
        planted_contribution: weighted(|r| r.planted_contribution),
    }
}

fn mean_abs_delta(r: &LogitChangeReport) -> f64 {
    r.occurrences.iter().map(|o| o.delta.abs()).sum::<f64>() / r.occurrences.len().max(1) as f64
}

fn planted_contribution(
    corpus: &PlantedCorpus,
    prompts: &[xcdiff_core::intervene::Prompt],
    r: &LogitChangeReport,
) -> f64 {
    let total: f64 = r
        .occurrences
        .iter()
        .map(|o| {
            let origin = prompts[o.prompt].origin.unwrap_or(0) as usize;
            let t = origin + o.position - 1;
            corpus
                .world
                .logit_contribution(Side::Distilled, &corpus.samples[t].active, o.token_id)
        })
        .sum();
    total / r.occurrences.len().max(1) as f64
}

fn summary_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "category,top_percent,n_selected,n_active,distilled_mean_delta,base_mean_delta,base_mean_abs_delta,planted_contribution\n",
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.category,
            r.top_percent,
            r.features.len(),
            r.n_active,
            r.distilled_mean_delta,
            r.base_mean_delta,
            r.base_mean_abs_delta,
            r.planted_contribution
        )
        .unwrap();
    }
    s
}
