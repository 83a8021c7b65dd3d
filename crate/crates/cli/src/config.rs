use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use xcdiff_core::diff::DiffOptions;
use xcdiff_core::geometry::{GeometryOptions, PcaMode, DEFAULT_DIMS};
use xcdiff_core::intervene::{AblationScope, ReasoningCategory, TOP_PERCENT_GRID};
use xcdiff_core::toymodel::{PlantedCounts, WorldConfig, DEFAULT_DOC_LEN};
use xcdiff_core::trainer::TrainConfig;

/// Everything one run needs. Stage seeds are derived from `seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    /// `normalization: []` means: estimate from the shards.
    pub train: TrainConfig,
    /// Categories for firing statistics and ablation. Unset means one
    /// category per planted marker token when a world file is present, and
    /// the reasoning defaults otherwise.
    pub categories: Option<Vec<ReasoningCategory>>,
    pub diff: DiffOptions,
    pub ablate: AblateConfig,
    pub steer: SteerConfig,
    pub geometry: GeometryConfig,
}

/// Input and output locations. Unset entries resolve under `--out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub shards: Option<Vec<PathBuf>>,
    pub world: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub counts: PlantedCounts,
    pub dims: [usize; 2],
    pub vocab_size: usize,
    pub firing_prob: Option<f64>,
    pub doc_len: usize,
    pub n_tokens: usize,
    pub rows_per_shard: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            counts: w.counts,
            dims: w.dims,
            vocab_size: w.vocab_size,
            firing_prob: w.firing_prob,
            doc_len: DEFAULT_DOC_LEN,
            n_tokens: 300_000,
            rows_per_shard: 50_000,
        }
    }
}

impl SynthConfig {
    pub fn world(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            counts: self.counts,
            dims: self.dims,
            vocab_size: self.vocab_size,
            firing_prob: self.firing_prob,
            doc_len: self.doc_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub top_percent: Vec<f64>,
    pub nrn_threshold: f64,
    pub n_targets: usize,
    pub scope: AblationScope,
    /// Length of the held-out planted stream the logits are measured on.
    pub eval_tokens: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            top_percent: TOP_PERCENT_GRID.to_vec(),
            nrn_threshold: 0.5,
            n_targets: 100,
            scope: AblationScope::default(),
            eval_tokens: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerConfig {
    /// Unset: the learned feature best matching the first unique-distilled
    /// planted feature.
    pub feature: Option<usize>,
    pub alphas: Vec<f64>,
    pub side: xcdiff_core::Side,
    /// Document of the held-out stream whose prefix is the prompt.
    pub prompt_doc: usize,
    pub prompt_len: usize,
    pub max_steps: usize,
    /// Unset: the marker token of the steered feature's planted match.
    pub watched_tokens: Option<Vec<u32>>,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            feature: None,
            alphas: vec![0.0, 1.0, 2.0, 4.0],
            side: xcdiff_core::Side::Distilled,
            prompt_doc: 0,
            prompt_len: 16,
            max_steps: 8,
            watched_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub dims: Vec<usize>,
    pub pca_mode: PcaMode,
    pub curve_points: usize,
    /// Function-class dataset JSON; unset means a synthetic dataset.
    pub dataset: Option<PathBuf>,
    /// Single-side shard with one row per token id.
    pub embeddings: Option<PathBuf>,
    pub synthetic: SyntheticGeometry,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let o = GeometryOptions::default();
        Self {
            dims: DEFAULT_DIMS.to_vec(),
            pca_mode: o.pca_mode,
            curve_points: o.curve_points,
            dataset: None,
            embeddings: None,
            synthetic: SyntheticGeometry::default(),
        }
    }
}

impl GeometryConfig {
    pub fn options(&self) -> GeometryOptions {
        GeometryOptions {
            dims: self.dims.clone(),
            pca_mode: self.pca_mode,
            curve_points: self.curve_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticGeometry {
    pub n_classes: usize,
    pub entries: usize,
    pub dim: usize,
    pub sigma: f64,
}

impl Default for SyntheticGeometry {
    fn default() -> Self {
        Self {
            n_classes: 6,
            entries: 12,
            dim: 32,
            sigma: 0.05,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pushes the run seed into every stage that takes one.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Self {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self
    }

    pub fn digest(&self) -> String {
        xcdiff_core::sha256_json(self)
    }

    pub fn world_seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn geometry_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }
}
