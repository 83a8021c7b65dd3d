use anyhow::{bail, Context, Result};
use serde::Serialize;
use xcdiff_core::geometry::{
    geometry_report, synthetic_parallelograms, EmbeddingTable, FunctionClassDataset, GeometryReport,
};

use crate::run::Run;

#[derive(Debug, Serialize)]
pub struct GeometryCommandReport {
    /// `synthetic` or the dataset path.
    pub source: String,
    pub n_classes: usize,
    pub n_entries: usize,
    pub geometry: GeometryReport,
}

pub fn geometry(run: &Run, dims_override: Option<Vec<usize>>) -> Result<GeometryCommandReport> {
    let cfg = &run.config.geometry;
    let mut options = cfg.options();
    if let Some(d) = dims_override {
        options.dims = d;
    }
    let (source, dataset, table) = match (&cfg.dataset, &cfg.embeddings) {
        (Some(d), Some(e)) => {
            let dataset = FunctionClassDataset::load(d).with_context(|| format!("loading dataset {}", d.display()))?;
            let table = EmbeddingTable::from_shard(e).with_context(|| format!("loading embeddings {}", e.display()))?;
            (d.display().to_string(), dataset, table)
        }
        (None, None) => {
            let s = &cfg.synthetic;
            let (dataset, table) =
                synthetic_parallelograms(s.n_classes, s.entries, s.dim, s.sigma, run.config.geometry_seed());
            ("synthetic".to_string(), dataset, table)
        }
        _ => bail!("geometry needs both a dataset and an embedding table, or neither"),
    };
    let report = geometry_report(&dataset, &table, &options)?;
    run.write_text("geometry_curves.csv", &report.curves_csv())?;
    run.write_text("geometry_summary.csv", &report.summary_csv())?;
    let out = GeometryCommandReport {
        source,
        n_classes: dataset.classes.len(),
        n_entries: dataset.n_entries(),
        geometry: report,
    };
    run.write_report("geometry", "geometry_report.json", &out)?;
    Ok(out)
}
