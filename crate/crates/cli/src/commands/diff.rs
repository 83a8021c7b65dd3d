use std::fmt::Write as _;

use std::path::PathBuf;

use anyhow::{bail, Result};
use serde::Serialize;
use xcdiff_core::actstore::{AnnotatedRow, AnnotatedRows};
use xcdiff_core::diff::{diff_report, DiffReport, Rdn, RowSource};
use xcdiff_core::intervene::ReasoningCategory;
use xcdiff_core::toymodel::{recovery, PlantedKind};
use xcdiff_core::CrosscoderParams;

use crate::commands::train::RECOVERY_THRESHOLD;
use crate::run::{checkpoint_params, Run};

#[derive(Debug, Serialize)]
pub struct PlantedFeature {
    pub planted: usize,
    pub learned: usize,
    pub score: f64,
    pub nrn: f64,
}

#[derive(Debug, Serialize)]
pub struct PlantedDiff {
    pub shared: Vec<PlantedFeature>,
    pub unique_base: Vec<PlantedFeature>,
    pub unique_distilled: Vec<PlantedFeature>,
    /// Recovered unique-distilled features that appear in `top`.
    pub unique_distilled_in_top: usize,
}

#[derive(Debug, Serialize)]
pub struct DiffCommandReport {
    pub checkpoint_sha256: String,
    pub swapped_sides: bool,
    pub categories: Vec<ReasoningCategory>,
    pub diff: DiffReport,
    pub planted: Option<PlantedDiff>,
}

/// Shard rows with their two sides exchanged.
struct SwappedRows(Vec<PathBuf>);

impl RowSource for SwappedRows {
    fn rows(&self) -> xcdiff_core::Result<Box<dyn Iterator<Item = xcdiff_core::Result<AnnotatedRow>> + '_>> {
        Ok(Box::new(AnnotatedRows::open(&self.0)?.map(|r| {
            r.map(|mut row| {
                row.sides.swap(0, 1);
                row
            })
        })))
    }
}

/// The same coder with its two sides exchanged.
pub fn swap_sides(params: &CrosscoderParams) -> Result<CrosscoderParams> {
    if params.n_sides() != 2 {
        bail!("side swap needs a two-side coder, found {} sides", params.n_sides());
    }
    let mut p = params.clone();
    p.sides.swap(0, 1);
    p.shape.dims.swap(0, 1);
    Ok(p)
}

pub fn diff(run: &Run, swap: bool) -> Result<DiffCommandReport> {
    let ckpt = run.load_checkpoint()?;
    let (mut norm, mut raw) = checkpoint_params(&ckpt)?;
    let unswapped = norm.clone();
    if swap {
        norm = swap_sides(&norm)?;
        raw = swap_sides(&raw)?;
    }
    let world = run.load_world()?;
    let categories = run.categories(world.as_deref());
    let mut options = run.config.diff.clone();
    if run.deterministic {
        options.annotation.endpoint = None;
    }
    let paths = run.shard_paths()?;
    let swapped = SwappedRows(paths.clone());
    let source: &dyn RowSource = if swap { &swapped } else { &paths };
    let report = diff_report(&norm, &raw, &ckpt.header.config.sparsity, source, &categories, &options)?;

    let planted = match &world {
        Some(w) if w.dims[..] == unswapped.shape.dims[..] => {
            let r = recovery(w, &unswapped, RECOVERY_THRESHOLD)?;
            let pick = |kind: PlantedKind| -> Vec<PlantedFeature> {
                r.recovered(kind)
                    .into_iter()
                    .filter_map(|m| {
                        let k = m.learned?;
                        Some(PlantedFeature {
                            planted: m.planted,
                            learned: k,
                            score: m.score,
                            nrn: report.features[k].nrn,
                        })
                    })
                    .collect()
            };
            let unique_distilled = pick(PlantedKind::UniqueDistilled);
            Some(PlantedDiff {
                unique_distilled_in_top: unique_distilled
                    .iter()
                    .filter(|f| report.top.contains(&f.learned))
                    .count(),
                shared: pick(PlantedKind::Shared),
                unique_base: pick(PlantedKind::UniqueBase),
                unique_distilled,
            })
        }
        _ => None,
    };

    run.write_text("diff_features.csv", &features_csv(&report))?;
    run.write_text("diff_histogram.csv", &histogram_csv(&report))?;
    let out = DiffCommandReport {
        checkpoint_sha256: ckpt.digest()?,
        swapped_sides: swap,
        categories,
        diff: report,
        planted,
    };
    run.write_report("diff", "diff_report.json", &out)?;
    Ok(out)
}

fn features_csv(r: &DiffReport) -> String {
    let cats: Vec<&String> = r.category_tokens.keys().collect();
    let mut s = String::from("feature,l1_base,l1_distilled,rdn,nrn,max_activation,mean_active_activation");
    for c in &cats {
        write!(s, ",freq_{c}").unwrap();
    }
    s.push('\n');
    for f in &r.features {
        let rdn = match f.rdn {
            Rdn::Finite(x) => x.to_string(),
            Rdn::Infinite => "inf".into(),
            Rdn::Undefined => String::new(),
        };
        write!(
            s,
            "{},{},{},{},{},{},{}",
            f.feature,
            f.l1_norms.first().copied().unwrap_or(0.0),
            f.l1_norms.get(1).copied().unwrap_or(0.0),
            rdn,
            f.nrn,
            f.max_activation,
            f.mean_active_activation
        )
        .unwrap();
        for c in &cats {
            write!(s, ",{}", f.frequency.get(*c).copied().unwrap_or(0.0)).unwrap();
        }
        s.push('\n');
    }
    s
}

fn histogram_csv(r: &DiffReport) -> String {
    let h = &r.histogram;
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(s, "{},{},{}", h.edges[i], h.edges[i + 1], c).unwrap();
    }
    s
}
