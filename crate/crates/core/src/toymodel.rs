//! Planted-ground-truth world.
//!
//! Two "models" share `n_s` features and each owns a block of unique
//! features. Per side, the planted dictionary is orthonormal. Every feature
//! fires independently per token with probability `p` and a magnitude drawn
//! uniformly from `[0.5, 2]`; a token's activation on a side is the
//! magnitude-weighted sum of the active features living on that side.
//!
//! Each unique-distilled feature `j` owns a marker token. When it fires at
//! stream position `t`, the token at `t + 1` is that marker (the largest
//! magnitude wins when several fire together). The distilled side's
//! unembedding row for marker `j` is exactly the feature's dictionary row,
//! so the marker logit at `t` equals the feature's magnitude there.
//!
//! Planted features are indexed globally: shared first, then unique-base,
//! then unique-distilled.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actstore::{ShardWriter, TokenMeta};
use crate::coder::{random_unit, CrosscoderParams};
use crate::error::{Error, Result};
use crate::intervene::{ModelAdapter, Prompt};
use crate::linalg::{axpy, cosine, dot, norm_l2, Matrix};
use crate::Side;

pub const MAGNITUDE_RANGE: (f64, f64) = (0.5, 2.0);
pub const DEFAULT_DOC_LEN: usize = 64;
const STREAM_SEED_SALT: u64 = 0x005E_ED0F_5724_EA11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedCounts {
    pub shared: usize,
    pub unique_base: usize,
    pub unique_distilled: usize,
}

impl PlantedCounts {
    pub fn total(&self) -> usize {
        self.shared + self.unique_base + self.unique_distilled
    }

    /// `p` giving six expected active features per token.
    pub fn default_firing_prob(&self) -> f64 {
        (6.0 / self.total().max(1) as f64).min(1.0)
    }
}

/// Which block a planted feature belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedKind {
    Shared,
    UniqueBase,
    UniqueDistilled,
}

impl PlantedKind {
    pub fn lives_on(self, side: Side) -> bool {
        match self {
            PlantedKind::Shared => true,
            PlantedKind::UniqueBase => side == Side::Base,
            PlantedKind::UniqueDistilled => side == Side::Distilled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub counts: PlantedCounts,
    pub dims: [usize; 2],
    pub vocab_size: usize,
    /// Per-feature firing probability; `None` selects six active per token.
    pub firing_prob: Option<f64>,
    pub doc_len: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            counts: PlantedCounts {
                shared: 40,
                unique_base: 12,
                unique_distilled: 12,
            },
            dims: [64, 64],
            vocab_size: 256,
            firing_prob: None,
            doc_len: DEFAULT_DOC_LEN,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWorld {
    pub counts: PlantedCounts,
    pub dims: [usize; 2],
    /// Shared dictionary per side, `n_s × d_i`.
    pub shared: [Matrix; 2],
    pub unique_base: Matrix,
    pub unique_distilled: Matrix,
    pub firing_prob: f64,
    pub magnitude_range: (f64, f64),
    pub vocab_size: usize,
    /// Unembedding per side, `V × d_i`, unit rows.
    pub unembed: [Matrix; 2],
    /// Marker token id of unique-distilled feature `j`.
    pub markers: Vec<u32>,
    pub doc_len: usize,
    pub seed: u64,
}

/// Builds a world from its configuration.
pub fn plant_world(config: &WorldConfig) -> Result<PlantedWorld> {
    let c = config.counts;
    let [da, db] = config.dims;
    if c.shared + c.unique_base > da || c.shared + c.unique_distilled > db {
        return Err(Error::Infeasible(format!(
            "need n_s + n_a <= d_A and n_s + n_b <= d_B; got ({}, {}, {}) with dims ({da}, {db})",
            c.shared, c.unique_base, c.unique_distilled
        )));
    }
    if config.vocab_size <= c.unique_distilled {
        return Err(Error::Infeasible(format!(
            "vocabulary of {} cannot hold {} markers plus filler tokens",
            config.vocab_size, c.unique_distilled
        )));
    }
    if config.doc_len == 0 {
        return Err(Error::InvalidConfig("doc_len must be >= 1".into()));
    }
    let p = config.firing_prob.unwrap_or_else(|| c.default_firing_prob());
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "firing probability must lie in [0, 1], got {p}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dict_a = orthonormal_rows(&mut rng, c.shared + c.unique_base, da);
    let dict_b = orthonormal_rows(&mut rng, c.shared + c.unique_distilled, db);
    let split = |m: &Matrix, at: usize| {
        let rows = m.to_rows();
        (
            Matrix::from_vec(at, m.cols(), rows[..at].concat()).unwrap(),
            Matrix::from_vec(rows.len() - at, m.cols(), rows[at..].concat()).unwrap(),
        )
    };
    let (shared_a, unique_base) = split(&dict_a, c.shared);
    let (shared_b, unique_distilled) = split(&dict_b, c.shared);

    let v = config.vocab_size;
    let mut unembed = [Matrix::zeros(v, da), Matrix::zeros(v, db)];
    for u in &mut unembed {
        for t in 0..v {
            random_unit(&mut rng, u.row_mut(t));
        }
    }
    let markers: Vec<u32> = (0..c.unique_distilled as u32).collect();
    for (j, &m) in markers.iter().enumerate() {
        unembed[1].row_mut(m as usize).copy_from_slice(unique_distilled.row(j));
    }

    Ok(PlantedWorld {
        counts: c,
        dims: config.dims,
        shared: [shared_a, shared_b],
        unique_base,
        unique_distilled,
        firing_prob: p,
        magnitude_range: MAGNITUDE_RANGE,
        vocab_size: v,
        unembed,
        markers,
        doc_len: config.doc_len,
        seed: config.seed,
    })
}

/// Seeded sphere samples made orthonormal by two passes of modified
/// Gram–Schmidt. Requires `n <= d`.
fn orthonormal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        loop {
            let mut v = vec![0.0; d];
            random_unit(rng, &mut v);
            for _ in 0..2 {
                for j in 0..i {
                    let proj = dot(&v, m.row(j));
                    axpy(-proj, m.row(j), &mut v);
                }
            }
            let n = norm_l2(&v);
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                m.row_mut(i).copy_from_slice(&v);
                break;
            }
        }
    }
    m
}

impl PlantedWorld {
    pub fn n_planted(&self) -> usize {
        self.counts.total()
    }

    pub fn kind(&self, g: usize) -> PlantedKind {
        let c = self.counts;
        if g < c.shared {
            PlantedKind::Shared
        } else if g < c.shared + c.unique_base {
            PlantedKind::UniqueBase
        } else {
            PlantedKind::UniqueDistilled
        }
    }

    /// Global ids of every planted feature of `kind`.
    pub fn ids_of(&self, kind: PlantedKind) -> Vec<usize> {
        (0..self.n_planted()).filter(|&g| self.kind(g) == kind).collect()
    }

    /// Dictionary row of planted feature `g` on `side`, if it lives there.
    pub fn row(&self, g: usize, side: Side) -> Option<&[f64]> {
        let c = self.counts;
        match (self.kind(g), side) {
            (PlantedKind::Shared, s) => Some(self.shared[s.index()].row(g)),
            (PlantedKind::UniqueBase, Side::Base) => Some(self.unique_base.row(g - c.shared)),
            (PlantedKind::UniqueDistilled, Side::Distilled) => {
                Some(self.unique_distilled.row(g - c.shared - c.unique_base))
            }
            _ => None,
        }
    }

    /// All planted rows living on `side`, with their global ids.
    pub fn side_dictionary(&self, side: Side) -> (Vec<usize>, Matrix) {
        let ids: Vec<usize> = (0..self.n_planted()).filter(|&g| self.kind(g).lives_on(side)).collect();
        let d = self.dims[side.index()];
        let data = ids.iter().flat_map(|&g| self.row(g, side).unwrap().to_vec()).collect();
        (ids.clone(), Matrix::from_vec(ids.len(), d, data).unwrap())
    }

    /// Marker token owned by planted feature `g`, if it is unique-distilled.
    pub fn marker_of(&self, g: usize) -> Option<u32> {
        (self.kind(g) == PlantedKind::UniqueDistilled)
            .then(|| self.markers[g - self.counts.shared - self.counts.unique_base])
    }

    /// Planted feature whose marker is `token`.
    pub fn feature_of_marker(&self, token: u32) -> Option<usize> {
        let j = self.markers.iter().position(|&m| m == token)?;
        Some(self.counts.shared + self.counts.unique_base + j)
    }

    pub fn token_text(&self, id: u32) -> Option<String> {
        if (id as usize) >= self.vocab_size {
            None
        } else if let Some(j) = self.markers.iter().position(|&m| m == id) {
            Some(format!("<m{j}>"))
        } else {
            Some(format!("t{id}"))
        }
    }

    /// Per-side activation vectors for a set of `(feature, magnitude)` pairs.
    pub fn activations(&self, active: &[(usize, f64)]) -> [Vec<f64>; 2] {
        let mut out = [vec![0.0; self.dims[0]], vec![0.0; self.dims[1]]];
        for &(g, m) in active {
            for side in [Side::Base, Side::Distilled] {
                if let Some(row) = self.row(g, side) {
                    axpy(m, row, &mut out[side.index()]);
                }
            }
        }
        out
    }

    /// Logit of `token` on `side` contributed by the given active features.
    pub fn logit_contribution(&self, side: Side, active: &[(usize, f64)], token: u32) -> f64 {
        let u = self.unembed[side.index()].row(token as usize);
        active
            .iter()
            .filter_map(|&(g, m)| self.row(g, side).map(|r| m * dot(u, r)))
            .sum()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// One sampled token: its identity and the planted features active on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSample {
    pub doc_id: u64,
    pub position: u64,
    pub token_id: u32,
    /// `(global feature id, magnitude)`, ascending by id.
    pub active: Vec<(usize, f64)>,
}

/// A sampled token stream; the planted adapters replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCorpus {
    pub world: Arc<PlantedWorld>,
    pub samples: Vec<PlantedSample>,
    pub seed: u64,
}

impl PlantedCorpus {
    /// Samples `n_tokens` tokens. The stream is a pure function of the world
    /// and `seed`.
    pub fn sample(world: Arc<PlantedWorld>, n_tokens: usize, seed: u64) -> Self {
        Self::sample_with(world, n_tokens, seed, |_, _| {})
    }

    /// As [`PlantedCorpus::sample`], but `force` may edit each token's active
    /// set (ascending ids, positive magnitudes) before the marker rule runs.
    pub fn sample_with<F>(world: Arc<PlantedWorld>, n_tokens: usize, seed: u64, mut force: F) -> Self
    where
        F: FnMut(usize, &mut Vec<(usize, f64)>),
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ STREAM_SEED_SALT);
        let n = world.n_planted();
        let (lo, hi) = world.magnitude_range;
        let ud_start = world.counts.shared + world.counts.unique_base;
        let filler = world.counts.unique_distilled as u32..world.vocab_size as u32;
        let mut samples = Vec::with_capacity(n_tokens);
        let mut pending_marker: Option<u32> = None;
        for t in 0..n_tokens {
            let token_id = match pending_marker.take() {
                Some(m) => m,
                None => rng.random_range(filler.clone()),
            };
            let mut active = Vec::new();
            for g in 0..n {
                if rng.random::<f64>() < world.firing_prob {
                    active.push((g, rng.random_range(lo..=hi)));
                }
            }
            force(t, &mut active);
            let mut best: Option<(usize, f64)> = None;
            for &(g, m) in &active {
                if g >= ud_start && best.is_none_or(|(_, bm)| m > bm) {
                    best = Some((g, m));
                }
            }
            pending_marker = best.and_then(|(g, _)| world.marker_of(g));
            samples.push(PlantedSample {
                doc_id: (t / world.doc_len) as u64,
                position: (t % world.doc_len) as u64,
                token_id,
                active,
            });
        }
        Self { world, samples, seed }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_docs(&self) -> usize {
        self.samples.len().div_ceil(self.world.doc_len)
    }

    /// Per-side activations at stream position `t`.
    pub fn activations(&self, t: usize) -> [Vec<f64>; 2] {
        self.world.activations(&self.samples[t].active)
    }

    pub fn meta(&self, t: usize) -> TokenMeta {
        let s = &self.samples[t];
        TokenMeta {
            doc_id: s.doc_id,
            position: s.position,
            token_id: s.token_id,
            token_text: self.world.token_text(s.token_id).unwrap_or_default(),
        }
    }

    /// Document `doc` as a prompt anchored in the stream.
    pub fn document(&self, doc: usize) -> Prompt {
        let start = doc * self.world.doc_len;
        let end = (start + self.world.doc_len).min(self.samples.len());
        Prompt {
            tokens: self.samples[start..end].iter().map(|s| s.token_id).collect(),
            origin: Some(start as u64),
        }
    }

    pub fn documents(&self) -> Vec<Prompt> {
        (0..self.n_docs()).map(|d| self.document(d)).collect()
    }

    /// Writes the stream as shards of at most `rows_per_shard` rows named
    /// `shard-00000.bin`, ... inside `dir`, plus `world.json`.
    pub fn write_shards(&self, dir: impl AsRef<Path>, rows_per_shard: usize) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        if rows_per_shard == 0 {
            return Err(Error::InvalidConfig("rows_per_shard must be >= 1".into()));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.world.save_json(dir.join("world.json"))?;
        let dims = self.world.dims;
        let mut paths = Vec::new();
        let mut writer: Option<ShardWriter> = None;
        let mut row32 = [vec![0f32; dims[0]], vec![0f32; dims[1]]];
        for t in 0..self.samples.len() {
            if t % rows_per_shard == 0 {
                if let Some(w) = writer.take() {
                    w.finish()?;
                }
                let p = dir.join(format!("shard-{:05}.bin", paths.len()));
                writer = Some(ShardWriter::create(&p, &dims)?);
                paths.push(p);
            }
            let acts = self.activations(t);
            for (dst, src) in row32.iter_mut().zip(&acts) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s as f32;
                }
            }
            let w = writer.as_mut().unwrap();
            w.push(&[&row32[0], &row32[1]], Some(&self.meta(t)))?;
        }
        if let Some(w) = writer.take() {
            w.finish()?;
        }
        if paths.is_empty() {
            let p = dir.join("shard-00000.bin");
            ShardWriter::create(&p, &dims)?.finish()?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// Samples `n_tokens` and writes them as shards plus `world.json` under `dir`.
pub fn sample_shards(
    world: Arc<PlantedWorld>,
    n_tokens: usize,
    seed: u64,
    dir: impl AsRef<Path>,
    rows_per_shard: usize,
) -> Result<(PlantedCorpus, Vec<PathBuf>)> {
    let corpus = PlantedCorpus::sample(world, n_tokens, seed);
    let paths = corpus.write_shards(dir, rows_per_shard)?;
    Ok((corpus, paths))
}

/// Linear-head adapter that replays one side of a planted corpus.
///
/// Residuals depend only on stream position: a prompt anchored at `origin`
/// of length `T` replays rows `origin..origin + T`, so greedy generation
/// walks forward through the stream.
#[derive(Debug, Clone)]
pub struct PlantedAdapter {
    corpus: Arc<PlantedCorpus>,
    side: Side,
}

pub fn planted_adapter(corpus: Arc<PlantedCorpus>, side: Side) -> PlantedAdapter {
    PlantedAdapter { corpus, side }
}

impl PlantedAdapter {
    pub fn corpus(&self) -> &PlantedCorpus {
        &self.corpus
    }

    fn span(&self, prompt: &Prompt) -> Result<std::ops::Range<usize>> {
        let origin = prompt
            .origin
            .ok_or_else(|| Error::OutsideStream("prompt is not anchored in the sampled stream".into()))?
            as usize;
        let end = origin + prompt.tokens.len();
        if end > self.corpus.len() {
            return Err(Error::OutsideStream(format!(
                "positions {origin}..{end} exceed the {}-token stream",
                self.corpus.len()
            )));
        }
        Ok(origin..end)
    }
}

impl ModelAdapter for PlantedAdapter {
    fn side(&self) -> Side {
        self.side
    }

    fn vocab_size(&self) -> usize {
        self.corpus.world.vocab_size
    }

    fn d_model(&self) -> usize {
        self.corpus.world.dims[self.side.index()]
    }

    fn token_text(&self, id: u32) -> Option<String> {
        self.corpus.world.token_text(id)
    }

    fn residuals(&self, prompt: &Prompt) -> Result<Matrix> {
        let span = self.span(prompt)?;
        let d = self.d_model();
        let mut out = Matrix::zeros(span.len(), d);
        for (r, t) in span.enumerate() {
            let [a, b] = self.corpus.activations(t);
            out.row_mut(r)
                .copy_from_slice(if self.side == Side::Base { &a } else { &b });
        }
        Ok(out)
    }

    fn paired_residuals(&self, prompt: &Prompt) -> Result<Option<Vec<Matrix>>> {
        let span = self.span(prompt)?;
        let dims = self.corpus.world.dims;
        let mut out = vec![Matrix::zeros(span.len(), dims[0]), Matrix::zeros(span.len(), dims[1])];
        for (r, t) in span.enumerate() {
            for (m, act) in out.iter_mut().zip(self.corpus.activations(t)) {
                m.row_mut(r).copy_from_slice(&act);
            }
        }
        Ok(Some(out))
    }

    fn logits_from(&self, residuals: &Matrix) -> Result<Matrix> {
        let u = &self.corpus.world.unembed[self.side.index()];
        if residuals.cols() != u.cols() {
            return Err(Error::ShapeMismatch(format!(
                "residual width {} but unembedding width {}",
                residuals.cols(),
                u.cols()
            )));
        }
        residuals.matmul_transposed(u)
    }

    fn supports_generation(&self) -> bool {
        true
    }
}

/// Per planted row, the best `|cos|` against any learned row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmcsReport {
    pub per_feature: Vec<f64>,
    /// Index of the best learned row per planted row (`None` if every learned
    /// row was zero).
    pub best_match: Vec<Option<usize>>,
    pub mean: f64,
    /// Learned rows with zero norm, excluded from matching.
    pub skipped_zero_rows: usize,
}

/// Mean max cosine similarity between planted rows and learned rows.
pub fn mmcs(ground_truth: &Matrix, learned: &Matrix) -> Result<MmcsReport> {
    if ground_truth.cols() != learned.cols() {
        return Err(Error::ShapeMismatch(format!(
            "planted rows have width {}, learned rows {}",
            ground_truth.cols(),
            learned.cols()
        )));
    }
    let skipped_zero_rows = learned.row_iter().filter(|r| norm_l2(r) == 0.0).count();
    let mut per_feature = Vec::with_capacity(ground_truth.rows());
    let mut best_match = Vec::with_capacity(ground_truth.rows());
    for g in ground_truth.row_iter() {
        let mut best: Option<(usize, f64)> = None;
        for (k, l) in learned.row_iter().enumerate() {
            if let Some(c) = cosine(g, l) {
                if best.is_none_or(|(_, b)| c.abs() > b) {
                    best = Some((k, c.abs()));
                }
            }
        }
        per_feature.push(best.map_or(0.0, |(_, c)| c));
        best_match.push(best.map(|(k, _)| k));
    }
    let mean = if per_feature.is_empty() {
        0.0
    } else {
        per_feature.iter().sum::<f64>() / per_feature.len() as f64
    };
    Ok(MmcsReport {
        per_feature,
        best_match,
        mean,
        skipped_zero_rows,
    })
}

/// Match of one planted feature against a trained crosscoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMatch {
    pub planted: usize,
    pub kind: PlantedKind,
    pub learned: Option<usize>,
    /// Minimum over the sides the planted feature lives on of `|cos|`
    /// between its row and the learned decoder row.
    pub score: f64,
    pub recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub threshold: f64,
    pub matches: Vec<PlantedMatch>,
    pub recovered_fraction: f64,
    /// Per-side MMCS of the planted dictionary against the learned decoder.
    pub mmcs_per_side: Vec<f64>,
}

impl RecoveryReport {
    pub fn recovered(&self, kind: PlantedKind) -> Vec<&PlantedMatch> {
        self.matches.iter().filter(|m| m.kind == kind && m.recovered).collect()
    }
}

/// Matches every planted feature to the learned feature that best explains
/// it on all the sides it lives on.
pub fn recovery(world: &PlantedWorld, params: &CrosscoderParams, threshold: f64) -> Result<RecoveryReport> {
    if params.n_sides() != 2 || params.shape.dims[..] != world.dims[..] {
        return Err(Error::ShapeMismatch(format!(
            "coder dims {:?} do not match world dims {:?}",
            params.shape.dims, world.dims
        )));
    }
    let mut matches = Vec::with_capacity(world.n_planted());
    for g in 0..world.n_planted() {
        let kind = world.kind(g);
        let mut best: Option<(usize, f64)> = None;
        for k in 0..params.n_features() {
            let mut score = f64::INFINITY;
            for side in [Side::Base, Side::Distilled] {
                if let Some(row) = world.row(g, side) {
                    let c = cosine(row, params.sides[side.index()].w_dec.row(k)).map_or(0.0, f64::abs);
                    score = score.min(c);
                }
            }
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((k, score));
            }
        }
        let (learned, score) = best.map_or((None, 0.0), |(k, s)| (Some(k), s));
        matches.push(PlantedMatch {
            planted: g,
            kind,
            learned,
            score,
            recovered: score >= threshold,
        });
    }
    let recovered_fraction = matches.iter().filter(|m| m.recovered).count() as f64 / matches.len().max(1) as f64;
    let mut mmcs_per_side = Vec::new();
    for side in [Side::Base, Side::Distilled] {
        let (_, dict) = world.side_dictionary(side);
        mmcs_per_side.push(mmcs(&dict, &params.sides[side.index()].w_dec)?.mean);
    }
    Ok(RecoveryReport {
        threshold,
        matches,
        recovered_fraction,
        mmcs_per_side,
    })
}
