//! Representation geometry of function-class word pairs: PCA projection,
//! parallelogram loss and cumulative-fraction curves.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actstore::ShardReader;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm_l2, Matrix};

pub const DEFAULT_DIMS: [usize; 4] = [2, 5, 10, 20];

/// A word pair `(a, b)` related by its class's function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub a: String,
    pub b: String,
    pub a_tokens: Vec<u32>,
    pub b_tokens: Vec<u32>,
}

impl PairEntry {
    pub fn is_single_token(&self) -> bool {
        self.a_tokens.len() == 1 && self.b_tokens.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionClass {
    pub name: String,
    pub entries: Vec<PairEntry>,
}

/// Classes ordered by name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FunctionClassDataset {
    pub classes: Vec<FunctionClass>,
}

impl FunctionClassDataset {
    /// Parses `{class_name: [{a, b, a_tokens, b_tokens}, ...]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<PairEntry>> = serde_json::from_str(text)?;
        Ok(Self {
            classes: map
                .into_iter()
                .map(|(name, entries)| FunctionClass { name, entries })
                .collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, &Vec<PairEntry>> = self.classes.iter().map(|c| (c.name.as_str(), &c.entries)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn n_entries(&self) -> usize {
        self.classes.iter().map(|c| c.entries.len()).sum()
    }
}

/// Keeps only entries whose two words are each a single token.
pub fn filter_single_token(dataset: &FunctionClassDataset) -> FunctionClassDataset {
    FunctionClassDataset {
        classes: dataset
            .classes
            .iter()
            .map(|c| FunctionClass {
                name: c.name.clone(),
                entries: c.entries.iter().filter(|e| e.is_single_token()).cloned().collect(),
            })
            .collect(),
    }
}

/// One embedding vector per token id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Matrix,
}

impl EmbeddingTable {
    /// Reads a single-side shard whose row `i` is token `i`'s vector.
    pub fn from_shard(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = ShardReader::open(path.as_ref())?;
        let dims = reader.header().dims_usize();
        if dims.len() != 1 {
            return Err(Error::SideMismatch(format!(
                "embedding table must be a single-side shard, found {} sides",
                dims.len()
            )));
        }
        let d = dims[0];
        let mut data = Vec::with_capacity(reader.header().n_rows as usize * d);
        let mut row = vec![0f32; d];
        while reader.read_row_into(&mut row)? {
            data.extend(row.iter().map(|&v| f64::from(v)));
        }
        let n = data.len() / d.max(1);
        Ok(Self {
            vectors: Matrix::from_vec(n, d, data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn get(&self, token: u32) -> Result<&[f64]> {
        if (token as usize) < self.vectors.rows() {
            Ok(self.vectors.row(token as usize))
        } else {
            Err(Error::ShapeMismatch(format!(
                "token {token} outside the {}-row embedding table",
                self.vectors.rows()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedClass {
    pub name: String,
    /// Row `2i` is entry `i`'s `a` embedding, row `2i + 1` its `b`.
    pub vectors: Matrix,
}

impl EmbeddedClass {
    pub fn n_entries(&self) -> usize {
        self.vectors.rows() / 2
    }
}

/// Looks up single-token embeddings; multi-token entries must be filtered
/// out first.
pub fn embed_classes(dataset: &FunctionClassDataset, table: &EmbeddingTable) -> Result<Vec<EmbeddedClass>> {
    dataset
        .classes
        .iter()
        .map(|c| {
            let mut data = Vec::with_capacity(c.entries.len() * 2 * table.dim());
            for e in &c.entries {
                if !e.is_single_token() {
                    return Err(Error::InvalidConfig(format!(
                        "entry ({}, {}) of class {:?} is not single-token",
                        e.a, e.b, c.name
                    )));
                }
                data.extend_from_slice(table.get(e.a_tokens[0])?);
                data.extend_from_slice(table.get(e.b_tokens[0])?);
            }
            Ok(EmbeddedClass {
                name: c.name.clone(),
                vectors: Matrix::from_vec(2 * c.entries.len(), table.dim(), data)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k × d`, orthonormal rows.
    pub components: Matrix,
    /// Top-`k` covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn explained_fraction(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }
}

/// Principal components of the rows of `x` from the sample covariance
/// (divisor `N − 1`). Each component is signed so its largest-magnitude
/// entry is positive.
pub fn fit_pca(x: &Matrix, k: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::Pca(format!("need at least 2 samples, got {n}")));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::Pca(format!(
            "k = {k} must lie in 1..={} for {n} samples of dimension {d}",
            (n - 1).min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for row in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in x.row_iter() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total_variance = cov.trace();
    if total_variance.is_nan() || total_variance <= 0.0 {
        return Err(Error::Pca("data has zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Matrix::zeros(k, d);
    let mut eigenvalues = Vec::with_capacity(k);
    for (r, &c) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(c);
        let row = components.row_mut(r);
        for (dst, v) in row.iter_mut().zip(col.iter()) {
            *dst = *v;
        }
        let norm = norm_l2(row);
        let pivot = row
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(1.0, |(_, v)| v);
        let s = if pivot < 0.0 { -1.0 / norm } else { 1.0 / norm };
        row.iter_mut().for_each(|v| *v *= s);
        eigenvalues.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        total_variance,
    })
}

/// `(X − mean) · componentsᵀ`.
pub fn project(model: &PcaModel, x: &Matrix) -> Result<Matrix> {
    if x.cols() != model.mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "data dimension {} but PCA dimension {}",
            x.cols(),
            model.mean.len()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), model.k());
    let mut centered = vec![0.0; x.cols()];
    for (r, row) in x.row_iter().enumerate() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&model.mean) {
            *c = v - m;
        }
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = dot(model.components.row(j), &centered);
        }
    }
    Ok(out)
}

/// `‖E_a − E_b − E_c + E_d‖ / sqrt(‖E_a‖² + ‖E_b‖² + ‖E_c‖² + ‖E_d‖²)`.
pub fn parallelogram_loss(ea: &[f64], eb: &[f64], ec: &[f64], ed: &[f64]) -> Result<f64> {
    let d = ea.len();
    if eb.len() != d || ec.len() != d || ed.len() != d {
        return Err(Error::ShapeMismatch(
            "parallelogram vertices differ in dimension".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..d {
        let r = ea[j] - eb[j] - ec[j] + ed[j];
        num += r * r;
        den += ea[j] * ea[j] + eb[j] * eb[j] + ec[j] * ec[j] + ed[j] * ed[j];
    }
    if den == 0.0 {
        return Err(Error::Undefined("parallelogram loss of four zero vectors".into()));
    }
    Ok((num / den).sqrt())
}

/// Loss of every unordered pair of distinct entries `i < j`, with
/// `(E_a, E_b, E_c, E_d) = (a_i, b_i, a_j, b_j)` in the projected space.
pub fn class_losses(class: &EmbeddedClass, pca: &PcaModel) -> Result<Vec<PairLoss>> {
    let y = project(pca, &class.vectors)?;
    let m = class.n_entries();
    let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let loss = parallelogram_loss(y.row(2 * i), y.row(2 * i + 1), y.row(2 * j), y.row(2 * j + 1))?;
            out.push(PairLoss { i, j, loss });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLoss {
    pub i: usize,
    pub j: usize,
    pub loss: f64,
}

/// `(threshold, fraction of losses ≤ threshold)` for each threshold.
pub fn cumulative_fraction(losses: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if losses.is_empty() {
        return Err(Error::Empty("cumulative fraction of no losses".into()));
    }
    if let Some(x) = losses.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("loss {x}")));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, sorted.partition_point(|&x| x <= t) as f64 / n))
        .collect())
}

/// `n` evenly spaced thresholds from 0 to `max` inclusive.
pub fn threshold_grid(max: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n)
        .map(|i| {
            if i + 1 == n {
                max
            } else {
                max * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Which points the PCA basis is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaMode {
    /// One basis per function class.
    #[default]
    PerClass,
    /// One basis over every class's embeddings.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryOptions {
    pub dims: Vec<usize>,
    pub pca_mode: PcaMode,
    pub curve_points: usize,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        Self {
            dims: DEFAULT_DIMS.to_vec(),
            pca_mode: PcaMode::default(),
            curve_points: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: String,
    pub n_entries: usize,
    pub losses: Vec<f64>,
    pub mean_loss: f64,
    pub explained_variance: f64,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedClass {
    pub class: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimResult {
    pub dim: usize,
    pub classes: Vec<ClassResult>,
    pub skipped: Vec<SkippedClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub pca_mode: PcaMode,
    /// Entries dropped per class for being multi-token.
    pub dropped_multi_token: BTreeMap<String, usize>,
    pub results: Vec<DimResult>,
}

impl GeometryReport {
    /// Plot-ready rows: `dim,class,threshold,fraction`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("dim,class,threshold,fraction\n");
        for r in &self.results {
            for c in &r.classes {
                for (t, f) in &c.curve {
                    out.push_str(&format!("{},{},{t},{f}\n", r.dim, csv_field(&c.class)));
                }
            }
        }
        out
    }

    /// `dim,class,n_entries,mean_loss` per class.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("dim,class,n_entries,mean_loss\n");
        for r in &self.results {
            for c in &r.classes {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    r.dim,
                    csv_field(&c.class),
                    c.n_entries,
                    c.mean_loss
                ));
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs the full analysis for every requested PCA dimension.
///
/// Classes with fewer than two single-token entries, or too few points to
/// support a `k`-dimensional basis, are recorded as skipped for that `k`.
pub fn geometry_report(
    dataset: &FunctionClassDataset,
    table: &EmbeddingTable,
    options: &GeometryOptions,
) -> Result<GeometryReport> {
    if options.dims.is_empty() {
        return Err(Error::InvalidConfig("no PCA dimensions requested".into()));
    }
    let filtered = filter_single_token(dataset);
    let dropped_multi_token = dataset
        .classes
        .iter()
        .zip(&filtered.classes)
        .map(|(a, b)| (a.name.clone(), a.entries.len() - b.entries.len()))
        .collect();
    let embedded = embed_classes(&filtered, table)?;
    let all_points = || {
        let d = table.dim();
        let data: Vec<f64> = embedded.iter().flat_map(|c| c.vectors.as_slice().to_vec()).collect();
        Matrix::from_vec(data.len() / d.max(1), d, data)
    };
    let mut results = Vec::with_capacity(options.dims.len());
    for &k in &options.dims {
        let global = match options.pca_mode {
            PcaMode::Global => Some(fit_pca(&all_points()?, k).map_err(|e| e.to_string())),
            PcaMode::PerClass => None,
        };
        let mut classes = Vec::new();
        let mut skipped = Vec::new();
        for c in &embedded {
            if c.n_entries() < 2 {
                skipped.push(SkippedClass {
                    class: c.name.clone(),
                    reason: format!("{} single-token entries; need at least 2", c.n_entries()),
                });
                continue;
            }
            let fitted = match &global {
                Some(g) => g.clone(),
                None => fit_pca(&c.vectors, k).map_err(|e| e.to_string()),
            };
            let pca = match fitted {
                Ok(p) => p,
                Err(reason) => {
                    skipped.push(SkippedClass {
                        class: c.name.clone(),
                        reason,
                    });
                    continue;
                }
            };
            let losses: Vec<f64> = class_losses(c, &pca)?.into_iter().map(|p| p.loss).collect();
            let max = losses.iter().copied().fold(0.0, f64::max);
            let curve = cumulative_fraction(&losses, &threshold_grid(max, options.curve_points))?;
            classes.push(ClassResult {
                class: c.name.clone(),
                n_entries: c.n_entries(),
                mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                explained_variance: pca.explained_fraction(),
                losses,
                curve,
            });
        }
        results.push(DimResult {
            dim: k,
            classes,
            skipped,
        });
    }
    Ok(GeometryReport {
        pca_mode: options.pca_mode,
        dropped_multi_token,
        results,
    })
}

/// Classes whose pairs are exact parallelograms (`b = a + offset_class`),
/// optionally perturbed by isotropic Gaussian noise of scale `sigma`.
///
/// Every word is its own token; words of class `c`, entry `i` are named
/// `c{c}_a{i}` and `c{c}_b{i}`.
pub fn synthetic_parallelograms(
    n_classes: usize,
    entries: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> (FunctionClassDataset, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let n_tokens = n_classes * entries * 2;
    let mut vectors = Matrix::zeros(n_tokens, dim);
    let mut classes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let offset: Vec<f64> = (0..dim).map(|_| normal()).collect();
        let mut list = Vec::with_capacity(entries);
        for i in 0..entries {
            let ta = (2 * (c * entries + i)) as u32;
            let tb = ta + 1;
            let base: Vec<f64> = (0..dim).map(|_| normal()).collect();
            for j in 0..dim {
                vectors[(ta as usize, j)] = base[j];
                vectors[(tb as usize, j)] = base[j] + offset[j];
            }
            list.push(PairEntry {
                a: format!("c{c}_a{i}"),
                b: format!("c{c}_b{i}"),
                a_tokens: vec![ta],
                b_tokens: vec![tb],
            });
        }
        classes.push(FunctionClass {
            name: format!("class_{c:02}"),
            entries: list,
        });
    }
    if sigma > 0.0 {
        for v in vectors.as_mut_slice() {
            *v += sigma * normal();
        }
    }
    (FunctionClassDataset { classes }, EmbeddingTable { vectors })
}
