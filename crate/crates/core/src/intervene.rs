//! Causal interventions with a trained crosscoder: choosing features to
//! ablate, removing their decoder contributions from a model's residual
//! stream, measuring the resulting target-token logit change, and steering
//! generation along a decoder vector.
//!
//! All functions expect parameters that consume raw (unnormalized)
//! activations; see [`crate::trainer::fold_normalization`].

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coder::{encode, Batch, CrosscoderParams, SparsityKind};
use crate::diff::FeatureStats;
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::Side;

/// A named group of target tokens, matched by exact token text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningCategory {
    pub name: String,
    pub target_tokens: Vec<String>,
}

impl ReasoningCategory {
    pub fn new(name: impl Into<String>, target_tokens: Vec<String>) -> Result<Self> {
        let c = Self {
            name: name.into(),
            target_tokens,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_tokens.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "category {:?} has no target tokens",
                self.name
            )));
        }
        Ok(())
    }

    pub fn matches(&self, token_text: &str) -> bool {
        self.target_tokens.iter().any(|t| t == token_text)
    }

    /// The four reasoning-behaviour categories, each with bare and
    /// leading-space surface forms.
    pub fn reasoning_defaults() -> Vec<Self> {
        let make = |name: &str, words: &[&str]| Self {
            name: name.to_string(),
            target_tokens: words.iter().flat_map(|w| [w.to_string(), format!(" {w}")]).collect(),
        };
        vec![
            make("self_reflection", &["Wait"]),
            make("deductive", &["Therefore", "Thus"]),
            make("alternative", &["Alternatively"]),
            make("contrastive", &["But", "However"]),
        ]
    }
}

/// A token sequence, optionally anchored at an offset of a recorded stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub origin: Option<u64>,
}

/// The hook-point view of a language model.
///
/// `residuals` returns the hook-layer vectors (`T × d`) for a prompt and
/// `logits_from` runs the remainder of the model on (possibly edited)
/// residuals, returning `T × vocab`. For every prompt,
/// `logits_from(residuals(p))` must equal `forward(p)` bit-exactly.
pub trait ModelAdapter {
    fn side(&self) -> Side;

    fn vocab_size(&self) -> usize;

    fn d_model(&self) -> usize;

    fn token_text(&self, id: u32) -> Option<String>;

    fn residuals(&self, prompt: &Prompt) -> Result<Matrix>;

    /// Hook-layer vectors of both models, in side order, when the adapter
    /// can provide them. `None` pairs this model's residual with itself.
    fn paired_residuals(&self, _prompt: &Prompt) -> Result<Option<Vec<Matrix>>> {
        Ok(None)
    }

    fn logits_from(&self, residuals: &Matrix) -> Result<Matrix>;

    fn forward(&self, prompt: &Prompt) -> Result<Matrix> {
        self.logits_from(&self.residuals(prompt)?)
    }

    /// Whether the prompt can be extended by generated tokens.
    fn supports_generation(&self) -> bool {
        false
    }
}

/// Token ids whose text matches one of the category's target tokens.
pub fn target_token_ids(adapter: &dyn ModelAdapter, category: &ReasoningCategory) -> BTreeSet<u32> {
    (0..adapter.vocab_size() as u32)
        .filter(|&id| adapter.token_text(id).is_some_and(|t| category.matches(&t)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub category: String,
    #[serde(default = "default_nrn_threshold")]
    pub nrn_threshold: f64,
    pub top_percent: f64,
    pub side: Side,
}

fn default_nrn_threshold() -> f64 {
    0.5
}

/// Grid of `top_percent` values evaluated by default.
pub const TOP_PERCENT_GRID: [f64; 6] = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0];

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_percent > 0.0 && self.top_percent <= 100.0) {
            return Err(Error::InvalidConfig(format!(
                "top_percent must lie in (0, 100], got {}",
                self.top_percent
            )));
        }
        if !self.nrn_threshold.is_finite() {
            return Err(Error::InvalidConfig("nrn_threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSelection {
    /// Selected feature ids, highest category frequency first.
    pub features: Vec<usize>,
    /// Features with nonzero firing frequency on the category.
    pub n_active: usize,
    /// Active features above the NRN threshold.
    pub n_candidates: usize,
    /// `ceil(top_percent% × n_active)`.
    pub budget: usize,
    /// Set when no feature fires on the category at all.
    pub empty_active_set: bool,
}

/// Chooses the features to ablate for one category.
///
/// Among features active on the category, those with NRN above the threshold
/// are ranked by category firing frequency (descending, ties to the lower
/// id) and the first `ceil(top_percent% × n_active)` are kept.
pub fn select_ablation_set(stats: &[FeatureStats], spec: &AblationSpec) -> Result<AblationSelection> {
    spec.validate()?;
    let freq = |s: &FeatureStats| s.frequency.get(&spec.category).copied();
    if stats.iter().all(|s| freq(s).is_none()) && !stats.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "feature statistics carry no frequencies for category {:?}",
            spec.category
        )));
    }
    let active: Vec<&FeatureStats> = stats.iter().filter(|s| freq(s).unwrap_or(0.0) > 0.0).collect();
    let n_active = active.len();
    // Integer arithmetic keeps ceil exact for percentages like 0.5.
    let budget = ceil_percent(spec.top_percent, n_active);
    let mut candidates: Vec<&FeatureStats> = active.into_iter().filter(|s| s.nrn > spec.nrn_threshold).collect();
    let n_candidates = candidates.len();
    candidates.sort_by(|a, b| {
        freq(b)
            .unwrap_or(0.0)
            .total_cmp(&freq(a).unwrap_or(0.0))
            .then(a.feature.cmp(&b.feature))
    });
    Ok(AblationSelection {
        features: candidates.iter().take(budget).map(|s| s.feature).collect(),
        n_active,
        n_candidates,
        budget,
        empty_active_set: n_active == 0,
    })
}

/// `ceil(percent / 100 × n)`, computed on a 1e-6 percent grid.
fn ceil_percent(percent: f64, n: usize) -> usize {
    let micro = (percent * 1e6).round() as u128;
    let num = micro * n as u128;
    num.div_ceil(100_000_000) as usize
}

fn check_features(params: &CrosscoderParams, features: &[usize]) -> Result<()> {
    for &k in features {
        if k >= params.n_features() {
            return Err(Error::InvalidFeature {
                feature: k,
                n_features: params.n_features(),
            });
        }
    }
    Ok(())
}

fn check_side(params: &CrosscoderParams, side: Side) -> Result<()> {
    if side.index() >= params.n_sides() {
        return Err(Error::SideMismatch(format!(
            "{side} side requested from a {}-side coder",
            params.n_sides()
        )));
    }
    Ok(())
}

/// Builds the coder input for a prompt from the adapter's residuals.
pub fn coder_inputs(adapter: &dyn ModelAdapter, params: &CrosscoderParams, prompt: &Prompt) -> Result<(Matrix, Batch)> {
    let side = adapter.side();
    check_side(params, side)?;
    let x = adapter.residuals(prompt)?;
    let inputs = match adapter.paired_residuals(prompt)? {
        Some(sides) if sides.len() == params.n_sides() => sides,
        Some(sides) if params.n_sides() == 1 => vec![sides[side.index()].clone()],
        Some(sides) => {
            return Err(Error::SideMismatch(format!(
                "adapter pairs {} sides, coder expects {}",
                sides.len(),
                params.n_sides()
            )))
        }
        None => vec![x.clone(); params.n_sides()],
    };
    Ok((x, Batch::new(inputs)?))
}

/// Removes the selected features' decoder contributions from `side`.
///
/// Row `b` of the result is `x_b − Σ_{k∈S} f_k(inputs_b) · W_dec,k^(side)`
/// where `f` is the full crosscoder code of the paired input row. Rows not
/// in `rows` (if given) are returned unchanged.
pub fn ablate_residuals(
    params: &CrosscoderParams,
    sparsity: &SparsityKind,
    inputs: &Batch,
    x: &Matrix,
    features: &[usize],
    side: Side,
    rows: Option<&[usize]>,
) -> Result<Matrix> {
    check_side(params, side)?;
    check_features(params, features)?;
    if x.cols() != params.shape.dims[side.index()] || x.rows() != inputs.rows() {
        return Err(Error::ShapeMismatch(format!(
            "residual block {:?} does not match coder side width {} and {} input rows",
            x.shape(),
            params.shape.dims[side.index()],
            inputs.rows()
        )));
    }
    let mut out = x.clone();
    if features.is_empty() {
        return Ok(out);
    }
    let codes = encode(params, inputs, sparsity)?;
    let w_dec = &params.sides[side.index()].w_dec;
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..x.rows()).collect();
            &all
        }
    };
    for &b in rows {
        let row = out.row_mut(b);
        for &k in features {
            let f = codes[(b, k)];
            if f != 0.0 {
                axpy(-f, w_dec.row(k), row);
            }
        }
    }
    Ok(out)
}

/// Single-vector form of [`ablate_residuals`]: `paired` holds the input on
/// every coder side; the ablated vector is that of `side`.
pub fn ablate_residual(
    params: &CrosscoderParams,
    sparsity: &SparsityKind,
    paired: &[&[f64]],
    features: &[usize],
    side: Side,
) -> Result<Vec<f64>> {
    check_side(params, side)?;
    let inputs = Batch::from_row(paired)?;
    let x = inputs.side(side.index()).clone();
    Ok(ablate_residuals(params, sparsity, &inputs, &x, features, side, None)?.into_vec())
}

/// Where ablation is applied when measuring one occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationScope {
    /// Only at the position predicting the target token.
    #[default]
    PredictingPosition,
    /// At every position of the prompt.
    AllPositions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitChangeOptions {
    pub n_targets: usize,
    pub seed: u64,
    pub scope: AblationScope,
}

impl Default for LogitChangeOptions {
    fn default() -> Self {
        Self {
            n_targets: 100,
            seed: 0,
            scope: AblationScope::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub prompt: usize,
    /// Position of the target token; logits are read at `position − 1`.
    pub position: usize,
    pub token_id: u32,
    pub clean_logit: f64,
    pub ablated_logit: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitChangeReport {
    pub category: String,
    pub side: Side,
    pub features: Vec<usize>,
    pub occurrences: Vec<Occurrence>,
    pub mean_delta: f64,
    /// Occurrences found in the prompts before sampling.
    pub n_available: usize,
    /// Set when fewer than `n_targets` occurrences were available.
    pub under_sampled: bool,
    pub seed: u64,
    pub scope: AblationScope,
}

/// Every `(prompt, position)` whose token belongs to the category, with a
/// predicting position inside the prompt.
pub fn find_occurrences(prompts: &[Prompt], targets: &BTreeSet<u32>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (p, prompt) in prompts.iter().enumerate() {
        for (t, tok) in prompt.tokens.iter().enumerate().skip(1) {
            if targets.contains(tok) {
                out.push((p, t));
            }
        }
    }
    out
}

/// Mean change of the target-token logit at the predicting position when
/// `features` are ablated, over up to `n_targets` seeded occurrences.
pub fn logit_change(
    adapter: &dyn ModelAdapter,
    params: &CrosscoderParams,
    sparsity: &SparsityKind,
    prompts: &[Prompt],
    category: &ReasoningCategory,
    features: &[usize],
    options: &LogitChangeOptions,
) -> Result<LogitChangeReport> {
    category.validate()?;
    check_side(params, adapter.side())?;
    check_features(params, features)?;
    let targets = target_token_ids(adapter, category);
    let all = find_occurrences(prompts, &targets);
    if all.is_empty() {
        return Err(Error::NoOccurrences(format!(
            "no token of category {:?} appears after the first position of any prompt",
            category.name
        )));
    }
    let n_available = all.len();
    let chosen: Vec<(usize, usize)> = if n_available > options.n_targets {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut idx = rand::seq::index::sample(&mut rng, n_available, options.n_targets).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    } else {
        all
    };

    let mut by_prompt: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(p, t) in &chosen {
        by_prompt.entry(p).or_default().push(t);
    }
    let side = adapter.side();
    let mut occurrences = Vec::with_capacity(chosen.len());
    for (p, positions) in by_prompt {
        let prompt = &prompts[p];
        let (x, inputs) = coder_inputs(adapter, params, prompt)?;
        let clean = adapter.logits_from(&x)?;
        let shared_ablation = match options.scope {
            AblationScope::AllPositions => {
                Some(adapter.logits_from(&ablate_residuals(params, sparsity, &inputs, &x, features, side, None)?)?)
            }
            AblationScope::PredictingPosition => None,
        };
        for t in positions {
            let tok = prompt.tokens[t];
            let ablated_logit = match &shared_ablation {
                Some(l) => l[(t - 1, tok as usize)],
                None => {
                    let xa = ablate_residuals(params, sparsity, &inputs, &x, features, side, Some(&[t - 1]))?;
                    adapter.logits_from(&xa)?[(t - 1, tok as usize)]
                }
            };
            let clean_logit = clean[(t - 1, tok as usize)];
            occurrences.push(Occurrence {
                prompt: p,
                position: t,
                token_id: tok,
                clean_logit,
                ablated_logit,
                delta: ablated_logit - clean_logit,
            });
        }
    }
    let mean_delta = occurrences.iter().map(|o| o.delta).sum::<f64>() / occurrences.len() as f64;
    Ok(LogitChangeReport {
        category: category.name.clone(),
        side,
        features: features.to_vec(),
        under_sampled: n_available < options.n_targets,
        n_available,
        occurrences,
        mean_delta,
        seed: options.seed,
        scope: options.scope,
    })
}

/// Residuals with `α · W_dec,k^(side)` added at every position.
pub fn steered_residuals(
    adapter: &dyn ModelAdapter,
    params: &CrosscoderParams,
    prompt: &Prompt,
    feature: usize,
    alpha: f64,
) -> Result<Matrix> {
    let side = adapter.side();
    check_side(params, side)?;
    check_features(params, &[feature])?;
    if !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "steering strength must be finite, got {alpha}"
        )));
    }
    let mut x = adapter.residuals(prompt)?;
    if alpha != 0.0 {
        let dir = params.sides[side.index()].w_dec.row(feature);
        for b in 0..x.rows() {
            axpy(alpha, dir, x.row_mut(b));
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerStep {
    /// Position whose logits chose the token.
    pub position: usize,
    pub token_id: u32,
    pub token_text: String,
    /// Logits of the watched tokens at `position`.
    pub watched_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerTranscript {
    pub side: Side,
    pub feature: usize,
    pub alpha: f64,
    pub prompt: Prompt,
    pub watched_tokens: Vec<u32>,
    pub generated: Vec<u32>,
    pub steps: Vec<SteerStep>,
}

/// Greedy decoding with the feature's decoder vector added at every
/// position. Ties in the argmax go to the lower token id.
pub fn steer(
    adapter: &dyn ModelAdapter,
    params: &CrosscoderParams,
    prompt: &Prompt,
    feature: usize,
    alpha: f64,
    max_steps: usize,
    watched_tokens: &[u32],
) -> Result<SteerTranscript> {
    if !adapter.supports_generation() {
        return Err(Error::GenerationUnsupported);
    }
    if prompt.tokens.is_empty() {
        return Err(Error::Empty("steering needs a non-empty prompt".into()));
    }
    if let Some(&t) = watched_tokens.iter().find(|&&t| t as usize >= adapter.vocab_size()) {
        return Err(Error::InvalidConfig(format!(
            "watched token {t} is outside the vocabulary"
        )));
    }
    let mut current = prompt.clone();
    let mut steps = Vec::with_capacity(max_steps);
    let mut generated = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        let x = steered_residuals(adapter, params, &current, feature, alpha)?;
        let logits = adapter.logits_from(&x)?;
        let last = x.rows() - 1;
        let row = logits.row(last);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        let token_id = best as u32;
        steps.push(SteerStep {
            position: last,
            token_id,
            token_text: adapter.token_text(token_id).unwrap_or_default(),
            watched_logits: watched_tokens.iter().map(|&t| row[t as usize]).collect(),
        });
        generated.push(token_id);
        current.tokens.push(token_id);
    }
    Ok(SteerTranscript {
        side: adapter.side(),
        feature,
        alpha,
        prompt: prompt.clone(),
        watched_tokens: watched_tokens.to_vec(),
        generated,
        steps,
    })
}
