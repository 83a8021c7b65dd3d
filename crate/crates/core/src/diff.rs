//! Feature diffing: decoder-norm ratios, NRN statistics, per-category firing
//! frequencies, max-activating contexts and optional LLM annotation.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::actstore::{AnnotatedRow, AnnotatedRows};
use crate::coder::{encode, Batch, CrosscoderParams, SparsityKind};
use crate::error::{Error, Result};
use crate::intervene::ReasoningCategory;
use crate::linalg::{norm_l1, Matrix};
use crate::Side;

pub const DEFAULT_BINS: usize = 50;
pub const UNANNOTATED: &str = "(unannotated)";

/// Per side, per feature: `‖W_dec,k^(i)‖₁`.
pub fn decoder_norms(params: &CrosscoderParams) -> Vec<Vec<f64>> {
    params
        .sides
        .iter()
        .map(|s| s.w_dec.row_iter().map(norm_l1).collect())
        .collect()
}

/// Relative decoder norm `‖W^(B)‖₁ / ‖W^(A)‖₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rdn {
    Finite(f64),
    /// Base norm zero, distilled norm positive.
    Infinite,
    /// Both norms zero.
    Undefined,
}

impl Rdn {
    pub fn nrn(self) -> f64 {
        match self {
            Rdn::Finite(r) => r / (1.0 + r),
            Rdn::Infinite => 1.0,
            Rdn::Undefined => 0.5,
        }
    }
}

impl Serialize for Rdn {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Rdn::Finite(r) => s.serialize_f64(r),
            Rdn::Infinite => s.serialize_str("inf"),
            Rdn::Undefined => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Rdn {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
            Null(()),
        }
        match Repr::deserialize(d)? {
            Repr::Num(r) => Ok(Rdn::Finite(r)),
            Repr::Str(s) if s == "inf" => Ok(Rdn::Infinite),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected rdn string {s:?}"))),
            Repr::Null(()) => Ok(Rdn::Undefined),
        }
    }
}

/// Pairs base (`A`) and distilled (`B`) norms into `(rdn, nrn)`.
pub fn rdn_nrn(norms_a: &[f64], norms_b: &[f64]) -> Result<Vec<(Rdn, f64)>> {
    if norms_a.len() != norms_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} base norms but {} distilled norms",
            norms_a.len(),
            norms_b.len()
        )));
    }
    Ok(norms_a
        .iter()
        .zip(norms_b)
        .map(|(&a, &b)| {
            assert!(a >= 0.0 && b >= 0.0, "norms are nonnegative by construction");
            let rdn = if a > 0.0 {
                Rdn::Finite(b / a)
            } else if b > 0.0 {
                Rdn::Infinite
            } else {
                Rdn::Undefined
            };
            (rdn, rdn.nrn())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrnHistogram {
    /// `n_bins + 1` uniform edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
}

impl NrnHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        0.5 * (self.edges[i] + self.edges[i + 1])
    }
}

/// Uniform histogram of NRN values; the last bin includes 1.
pub fn nrn_summary(nrns: &[f64], n_bins: usize) -> Result<NrnHistogram> {
    if n_bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0usize; n_bins];
    for &x in nrns {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidConfig(format!("nrn {x} lies outside [0, 1]")));
        }
        let i = ((x * n_bins as f64) as usize).min(n_bins - 1);
        counts[i] += 1;
    }
    let edges = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    let mean = if nrns.is_empty() {
        0.0
    } else {
        nrns.iter().sum::<f64>() / nrns.len() as f64
    };
    Ok(NrnHistogram { edges, counts, mean })
}

/// Result of checking a histogram for three separated modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    /// Tallest bin with centre below 0.3, in `[0.35, 0.65]`, above 0.7.
    pub peaks: [Option<usize>; 3],
    /// Between consecutive peaks, some bin is strictly lower than both.
    pub separated: [bool; 2],
    pub trimodal: bool,
}

/// Finds a mode in each of the low, middle and high NRN bands and checks
/// that a strict valley separates consecutive modes.
pub fn modality(hist: &NrnHistogram) -> Modality {
    let bands: [fn(f64) -> bool; 3] = [|c| c < 0.3, |c| (0.35..=0.65).contains(&c), |c| c > 0.7];
    let mut peaks = [None; 3];
    for (p, band) in peaks.iter_mut().zip(bands) {
        for i in 0..hist.n_bins() {
            if band(hist.bin_center(i))
                && hist.counts[i] > 0
                && p.is_none_or(|j: usize| hist.counts[i] > hist.counts[j])
            {
                *p = Some(i);
            }
        }
    }
    let valley = |a: Option<usize>, b: Option<usize>| match (a, b) {
        (Some(a), Some(b)) => {
            let floor = hist.counts[a].min(hist.counts[b]);
            (a + 1..b).any(|i| hist.counts[i] < floor)
        }
        _ => false,
    };
    let separated = [valley(peaks[0], peaks[1]), valley(peaks[1], peaks[2])];
    Modality {
        trimodal: peaks.iter().all(Option::is_some) && separated.iter().all(|&s| s),
        peaks,
        separated,
    }
}

/// Which shard row represents a category token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryAnchor {
    /// The row immediately before the target token in the same document:
    /// the position whose logits predict it.
    #[default]
    Predicting,
    /// The target token's own row.
    AtToken,
}

/// Something that can be streamed as annotated rows, possibly many times.
pub trait RowSource {
    fn rows(&self) -> Result<Box<dyn Iterator<Item = Result<AnnotatedRow>> + '_>>;
}

impl RowSource for [PathBuf] {
    fn rows(&self) -> Result<Box<dyn Iterator<Item = Result<AnnotatedRow>> + '_>> {
        Ok(Box::new(AnnotatedRows::open(self)?))
    }
}

impl RowSource for Vec<PathBuf> {
    fn rows(&self) -> Result<Box<dyn Iterator<Item = Result<AnnotatedRow>> + '_>> {
        self.as_slice().rows()
    }
}

impl RowSource for [AnnotatedRow] {
    fn rows(&self) -> Result<Box<dyn Iterator<Item = Result<AnnotatedRow>> + '_>> {
        Ok(Box::new(self.iter().cloned().map(Ok)))
    }
}

impl RowSource for Vec<AnnotatedRow> {
    fn rows(&self) -> Result<Box<dyn Iterator<Item = Result<AnnotatedRow>> + '_>> {
        self.as_slice().rows()
    }
}

const ENCODE_CHUNK: usize = 512;

/// Encodes a row stream chunk by chunk, handing each row's code (with its
/// metadata and stream index) to `visit` in order.
fn for_each_code<F>(
    params: &CrosscoderParams,
    sparsity: &SparsityKind,
    source: &dyn RowSource,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(u64, &AnnotatedRow, &[f64]),
{
    let dims = &params.shape.dims;
    let mut chunk: Vec<AnnotatedRow> = Vec::with_capacity(ENCODE_CHUNK);
    let mut index = 0u64;
    let mut flush = |chunk: &mut Vec<AnnotatedRow>, index: &mut u64| -> Result<()> {
        if chunk.is_empty() {
            return Ok(());
        }
        let sides = (0..dims.len())
            .map(|i| {
                let data = chunk.iter().flat_map(|r| r.sides[i].iter().copied()).collect();
                Matrix::from_vec(chunk.len(), dims[i], data)
            })
            .collect::<Result<Vec<_>>>()?;
        let codes = encode(params, &Batch::new(sides)?, sparsity)?;
        for (b, row) in chunk.iter().enumerate() {
            visit(*index, row, codes.row(b));
            *index += 1;
        }
        chunk.clear();
        Ok(())
    };
    for row in source.rows()? {
        let row = row?;
        if row.sides.len() != dims.len() || row.sides.iter().zip(dims).any(|(s, &d)| s.len() != d) {
            return Err(Error::ShapeMismatch(format!(
                "row {index} widths {:?} do not match coder dims {dims:?}",
                row.sides.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        chunk.push(row);
        if chunk.len() == ENCODE_CHUNK {
            flush(&mut chunk, &mut index)?;
        }
    }
    flush(&mut chunk, &mut index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiringStats {
    pub categories: Vec<String>,
    /// Anchored token count per category.
    pub category_tokens: Vec<u64>,
    /// `[feature][category]` fraction of anchored category tokens with `f_k > 0`.
    pub frequency: Vec<Vec<f64>>,
    pub max_activation: Vec<f64>,
    /// Mean of `f_k` over rows where it is positive (0 if it never fires).
    pub mean_active_activation: Vec<f64>,
    /// Fraction of all rows where the feature fires.
    pub global_frequency: Vec<f64>,
    pub rows: u64,
    /// Categories that matched no token.
    pub empty_categories: Vec<String>,
}

/// Streams the data once, counting how often each feature fires on each
/// category's anchored rows along with global activation statistics.
pub fn firing_stats(
    params: &CrosscoderParams,
    sparsity: &SparsityKind,
    source: &dyn RowSource,
    categories: &[ReasoningCategory],
    anchor: CategoryAnchor,
) -> Result<FiringStats> {
    for c in categories {
        c.validate()?;
    }
    let f = params.n_features();
    let nc = categories.len();
    let mut hits = vec![vec![0u64; nc]; f];
    let mut category_tokens = vec![0u64; nc];
    let mut max_activation = vec![0.0f64; f];
    let mut active_sum = vec![0.0f64; f];
    let mut active_count = vec![0u64; f];
    let mut rows = 0u64;
    let mut prev: Option<(u64, u64, Vec<f64>)> = None;
    for_each_code(params, sparsity, source, |_, row, code| {
        rows += 1;
        for (k, &v) in code.iter().enumerate() {
            if v > 0.0 {
                active_sum[k] += v;
                active_count[k] += 1;
                if v > max_activation[k] {
                    max_activation[k] = v;
                }
            }
        }
        let anchored: Option<&[f64]> = match anchor {
            CategoryAnchor::AtToken => Some(code),
            CategoryAnchor::Predicting => prev
                .as_ref()
                .filter(|(doc, pos, _)| *doc == row.meta.doc_id && pos + 1 == row.meta.position)
                .map(|(_, _, c)| c.as_slice()),
        };
        if let Some(acode) = anchored {
            for (c, cat) in categories.iter().enumerate() {
                if cat.matches(&row.meta.token_text) {
                    category_tokens[c] += 1;
                    for (k, &v) in acode.iter().enumerate() {
                        if v > 0.0 {
                            hits[k][c] += 1;
                        }
                    }
                }
            }
        }
        if anchor == CategoryAnchor::Predicting {
            match &mut prev {
                Some((doc, pos, c)) => {
                    *doc = row.meta.doc_id;
                    *pos = row.meta.position;
                    c.copy_from_slice(code);
                }
                None => prev = Some((row.meta.doc_id, row.meta.position, code.to_vec())),
            }
        }
    })?;
    let frequency = hits
        .iter()
        .map(|h| {
            h.iter()
                .zip(&category_tokens)
                .map(|(&n, &d)| if d == 0 { 0.0 } else { n as f64 / d as f64 })
                .collect()
        })
        .collect();
    Ok(FiringStats {
        categories: categories.iter().map(|c| c.name.clone()).collect(),
        empty_categories: categories
            .iter()
            .zip(&category_tokens)
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c.name.clone())
            .collect(),
        category_tokens,
        frequency,
        mean_active_activation: active_sum
            .iter()
            .zip(&active_count)
            .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect(),
        global_frequency: active_count.iter().map(|&n| n as f64 / rows.max(1) as f64).collect(),
        max_activation,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextToken {
    pub position: u64,
    pub token_text: String,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivatingContext {
    pub feature: usize,
    /// Index of the peak row in the stream.
    pub row: u64,
    pub doc_id: u64,
    pub position: u64,
    pub activation: f64,
    /// Tokens of the same document within `±window` of the peak.
    pub tokens: Vec<ContextToken>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    activation: f64,
    row: u64,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    // Greater = ranks earlier: higher activation, then earlier row.
    fn cmp(&self, other: &Self) -> Ordering {
        self.activation
            .total_cmp(&other.activation)
            .then(other.row.cmp(&self.row))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// `(row, position, token)` of one context window entry.
type WindowToken = (u64, u64, ContextToken);

/// Top-`n` firing rows for each requested feature, with surrounding tokens.
///
/// Rows are ordered by activation, ties to the earlier stream position; a
/// feature that fires fewer than `n` times yields only its firings. Makes two
/// passes over `source`.
pub fn max_activating_many(
    params: &CrosscoderParams,
    sparsity: &SparsityKind,
    source: &dyn RowSource,
    features: &[usize],
    n: usize,
    window: usize,
) -> Result<BTreeMap<usize, Vec<ActivatingContext>>> {
    for &k in features {
        if k >= params.n_features() {
            return Err(Error::InvalidFeature {
                feature: k,
                n_features: params.n_features(),
            });
        }
    }
    let mut heaps: BTreeMap<usize, BinaryHeap<Reverse<Ranked>>> =
        features.iter().map(|&k| (k, BinaryHeap::new())).collect();
    if n > 0 {
        for_each_code(params, sparsity, source, |index, _, code| {
            for (&k, heap) in heaps.iter_mut() {
                let v = code[k];
                if v <= 0.0 {
                    continue;
                }
                let item = Ranked {
                    activation: v,
                    row: index,
                };
                if heap.len() < n {
                    heap.push(Reverse(item));
                } else if heap.peek().is_some_and(|Reverse(min)| item > *min) {
                    heap.pop();
                    heap.push(Reverse(item));
                }
            }
        })?;
    }
    let mut tops: BTreeMap<usize, Vec<Ranked>> = heaps
        .into_iter()
        .map(|(k, h)| {
            let mut v: Vec<Ranked> = h.into_iter().map(|Reverse(r)| r).collect();
            v.sort_by(|a, b| b.cmp(a));
            (k, v)
        })
        .collect();

    // Second pass: gather each peak's window.
    let mut wanted: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
    for (&k, rows) in &tops {
        for (slot, r) in rows.iter().enumerate() {
            let lo = r.row.saturating_sub(window as u64);
            for i in lo..=r.row + window as u64 {
                wanted.entry(i).or_default().push((k, slot));
            }
        }
    }
    let mut gathered: BTreeMap<(usize, usize), Vec<WindowToken>> = BTreeMap::new();
    if !wanted.is_empty() {
        for_each_code(params, sparsity, source, |index, row, code| {
            if let Some(slots) = wanted.get(&index) {
                for &(k, slot) in slots {
                    gathered.entry((k, slot)).or_default().push((
                        index,
                        row.meta.doc_id,
                        ContextToken {
                            position: row.meta.position,
                            token_text: row.meta.token_text.clone(),
                            activation: code[k],
                        },
                    ));
                }
            }
        })?;
    }
    let mut out = BTreeMap::new();
    for (k, rows) in tops.iter_mut() {
        let mut contexts = Vec::with_capacity(rows.len());
        for (slot, r) in rows.iter().enumerate() {
            let toks = gathered.remove(&(*k, slot)).unwrap_or_default();
            let doc = toks
                .iter()
                .find(|(i, _, _)| *i == r.row)
                .map(|(_, d, _)| *d)
                .unwrap_or(0);
            let position = toks
                .iter()
                .find(|(i, _, _)| *i == r.row)
                .map(|(_, _, t)| t.position)
                .unwrap_or(0);
            contexts.push(ActivatingContext {
                feature: *k,
                row: r.row,
                doc_id: doc,
                position,
                activation: r.activation,
                tokens: toks
                    .into_iter()
                    .filter(|(_, d, _)| *d == doc)
                    .map(|(_, _, t)| t)
                    .collect(),
            });
        }
        out.insert(*k, contexts);
    }
    Ok(out)
}

/// Single-feature form of [`max_activating_many`].
pub fn max_activating(
    params: &CrosscoderParams,
    sparsity: &SparsityKind,
    source: &dyn RowSource,
    feature: usize,
    n: usize,
    window: usize,
) -> Result<Vec<ActivatingContext>> {
    Ok(max_activating_many(params, sparsity, source, &[feature], n, window)?
        .remove(&feature)
        .unwrap_or_default())
}

/// Chat-completion endpoint used to label features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    /// Full URL of the completion endpoint; `None` disables annotation.
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding a bearer token, if the endpoint needs one.
    pub api_key_env: Option<String>,
    /// Prompt with a `{contexts}` placeholder.
    pub prompt_template: String,
    pub timeout_secs: u64,
    /// Contexts per feature included in the prompt.
    pub max_contexts: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "gpt-4o-mini".into(),
            api_key_env: None,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
            timeout_secs: 30,
            max_contexts: 10,
        }
    }
}

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Below are text excerpts on which one feature of a sparse dictionary \
model activates. Tokens are written as token<<activation>> where the activation is nonzero. \
Reply with a short label (at most eight words) describing what the feature detects.\n\n{contexts}";

fn render_contexts(contexts: &[ActivatingContext], limit: usize) -> String {
    contexts
        .iter()
        .take(limit)
        .enumerate()
        .map(|(i, c)| {
            let text: String = c
                .tokens
                .iter()
                .map(|t| {
                    if t.activation > 0.0 {
                        format!("{}<<{:.3}>>", t.token_text, t.activation)
                    } else {
                        t.token_text.clone()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ");
            format!("Example {} (peak {:.3}): {}", i + 1, c.activation, text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: String,
}

/// Labels each feature from its contexts. Without an endpoint every label
/// is [`UNANNOTATED`]; a failed request yields an `(annotation error: ...)`
/// label for that feature only.
pub fn annotate_features(
    contexts: &BTreeMap<usize, Vec<ActivatingContext>>,
    config: &AnnotationConfig,
) -> BTreeMap<usize, String> {
    let Some(endpoint) = config.endpoint.as_deref() else {
        return contexts.keys().map(|&k| (k, UNANNOTATED.to_string())).collect();
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
        .build()
        .into();
    let key = config.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
    contexts
        .iter()
        .map(|(&k, ctx)| {
            let prompt = config
                .prompt_template
                .replace("{contexts}", &render_contexts(ctx, config.max_contexts));
            let body = serde_json::json!({
                "model": config.model,
                "messages": [{"role": "user", "content": prompt}],
            });
            let mut req = agent.post(endpoint);
            if let Some(key) = &key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let label = req
                .send_json(&body)
                .map_err(|e| e.to_string())
                .and_then(|mut r| {
                    r.body_mut()
                        .read_json::<CompletionResponse>()
                        .map_err(|e| e.to_string())
                })
                .and_then(|r| {
                    r.choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content.trim().to_string())
                        .ok_or_else(|| "response has no choices".to_string())
                });
            (k, label.unwrap_or_else(|e| format!("(annotation error: {e})")))
        })
        .collect()
}

/// Everything known about one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: usize,
    /// `‖W_dec,k^(i)‖₁` per side.
    pub l1_norms: Vec<f64>,
    pub rdn: Rdn,
    pub nrn: f64,
    /// Firing frequency per category name.
    pub frequency: BTreeMap<String, f64>,
    pub max_activation: f64,
    pub mean_active_activation: f64,
}

/// Combines decoder norms with firing statistics.
pub fn feature_stats(params: &CrosscoderParams, firing: &FiringStats) -> Result<Vec<FeatureStats>> {
    if params.n_sides() != 2 {
        return Err(Error::SideMismatch("norm ratios need a two-side crosscoder".into()));
    }
    if firing.frequency.len() != params.n_features() {
        return Err(Error::ShapeMismatch(
            "firing statistics cover a different feature count".into(),
        ));
    }
    let norms = decoder_norms(params);
    let ratios = rdn_nrn(&norms[Side::Base.index()], &norms[Side::Distilled.index()])?;
    Ok(ratios
        .into_iter()
        .enumerate()
        .map(|(k, (rdn, nrn))| FeatureStats {
            feature: k,
            l1_norms: norms.iter().map(|n| n[k]).collect(),
            rdn,
            nrn,
            frequency: firing
                .categories
                .iter()
                .cloned()
                .zip(firing.frequency[k].iter().copied())
                .collect(),
            max_activation: firing.max_activation[k],
            mean_active_activation: firing.mean_active_activation[k],
        })
        .collect())
}

/// Feature ids ordered by NRN descending (`top`) and ascending (`bottom`),
/// ties to the lower id, truncated to `len`.
pub fn nrn_extremes(stats: &[FeatureStats], len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<&FeatureStats> = stats.iter().collect();
    ids.sort_by(|a, b| b.nrn.total_cmp(&a.nrn).then(a.feature.cmp(&b.feature)));
    let top = ids.iter().take(len).map(|s| s.feature).collect();
    ids.sort_by(|a, b| a.nrn.total_cmp(&b.nrn).then(a.feature.cmp(&b.feature)));
    let bottom = ids.iter().take(len).map(|s| s.feature).collect();
    (top, bottom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffOptions {
    pub n_bins: usize,
    pub list_len: usize,
    pub n_examples: usize,
    pub window: usize,
    pub anchor: CategoryAnchor,
    pub annotation: AnnotationConfig,
}

impl Default for DiffOptions {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_BINS,
            list_len: 100,
            n_examples: 5,
            window: 4,
            anchor: CategoryAnchor::default(),
            annotation: AnnotationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub n_features: usize,
    pub features: Vec<FeatureStats>,
    pub histogram: NrnHistogram,
    pub mean_nrn: f64,
    pub modality: Modality,
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
    pub examples: BTreeMap<usize, Vec<ActivatingContext>>,
    pub labels: BTreeMap<usize, String>,
    pub category_tokens: BTreeMap<String, u64>,
    pub rows: u64,
    pub warnings: Vec<String>,
}

/// Full diff of a trained crosscoder.
///
/// `norm_params` supplies the decoder norms (the space the coder was trained
/// in); `raw_params` encodes the raw activations in `source`. They may be the
/// same parameters when no normalization was used.
pub fn diff_report(
    norm_params: &CrosscoderParams,
    raw_params: &CrosscoderParams,
    sparsity: &SparsityKind,
    source: &dyn RowSource,
    categories: &[ReasoningCategory],
    options: &DiffOptions,
) -> Result<DiffReport> {
    if norm_params.shape != raw_params.shape {
        return Err(Error::ShapeMismatch("norm and raw parameters differ in shape".into()));
    }
    let firing = firing_stats(raw_params, sparsity, source, categories, options.anchor)?;
    let features = feature_stats(norm_params, &firing)?;
    let nrns: Vec<f64> = features.iter().map(|s| s.nrn).collect();
    let histogram = nrn_summary(&nrns, options.n_bins)?;
    let (top, bottom) = nrn_extremes(&features, options.list_len);
    let mut listed: Vec<usize> = top.iter().chain(&bottom).copied().collect();
    listed.sort_unstable();
    listed.dedup();
    let examples = max_activating_many(
        raw_params,
        sparsity,
        source,
        &listed,
        options.n_examples,
        options.window,
    )?;
    let labels = annotate_features(&examples, &options.annotation);
    let mut warnings: Vec<String> = firing
        .empty_categories
        .iter()
        .map(|c| format!("category {c:?} matched no tokens; its frequencies are 0"))
        .collect();
    let errors = labels.values().filter(|l| l.starts_with("(annotation error")).count();
    if errors > 0 {
        warnings.push(format!("{errors} feature annotations failed"));
    }
    Ok(DiffReport {
        n_features: norm_params.n_features(),
        mean_nrn: histogram.mean,
        modality: modality(&histogram),
        histogram,
        features,
        top,
        bottom,
        examples,
        labels,
        category_tokens: firing
            .categories
            .iter()
            .cloned()
            .zip(firing.category_tokens.iter().copied())
            .collect(),
        rows: firing.rows,
        warnings,
    })
}
