use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use xcdiff_core::intervene::ReasoningCategory;
use xcdiff_core::toymodel::{PlantedCorpus, PlantedKind, PlantedWorld};
use xcdiff_core::trainer::{fold_normalization, Checkpoint};
use xcdiff_core::CrosscoderParams;

use crate::config::RunConfig;

pub const SHARD_DIR: &str = "shards";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Resolved configuration plus the global flags.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub digest: String,
    pub out: PathBuf,
    pub deterministic: bool,
    pub timestamp: bool,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    tool_version: &'static str,
    config_digest: &'a str,
    seed: u64,
    deterministic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at_unix: Option<u64>,
    report: &'a T,
}

impl Run {
    pub fn new(config: RunConfig, out: PathBuf, deterministic: bool, timestamp: bool) -> Self {
        Self {
            digest: config.digest(),
            config,
            out,
            deterministic,
            timestamp,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn shard_dir(&self) -> PathBuf {
        self.path(SHARD_DIR)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.config
            .paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.path(CHECKPOINT_FILE))
    }

    pub fn world_path(&self) -> PathBuf {
        self.config
            .paths
            .world
            .clone()
            .unwrap_or_else(|| self.shard_dir().join("world.json"))
    }

    /// Configured shard files, or every `*.bin` in the default shard
    /// directory in name order.
    pub fn shard_paths(&self) -> Result<Vec<PathBuf>> {
        if let Some(p) = &self.config.paths.shards {
            for path in p {
                if !path.is_file() {
                    bail!("shard file {} does not exist", path.display());
                }
            }
            return Ok(p.clone());
        }
        let dir = self.shard_dir();
        let entries = fs::read_dir(&dir).with_context(|| format!("listing shard directory {}", dir.display()))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            bail!("no shard files in {}", dir.display());
        }
        Ok(paths)
    }

    pub fn load_world(&self) -> Result<Option<Arc<PlantedWorld>>> {
        let path = self.world_path();
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(Arc::new(PlantedWorld::load_json(&path)?)))
    }

    pub fn require_world(&self) -> Result<Arc<PlantedWorld>> {
        self.load_world()?.with_context(|| {
            format!(
                "planted world file {} not found; run synth first",
                self.world_path().display()
            )
        })
    }

    pub fn load_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::load(self.checkpoint_path())?)
    }

    /// Held-out planted stream for interventions.
    pub fn eval_corpus(&self, world: Arc<PlantedWorld>) -> Arc<PlantedCorpus> {
        Arc::new(PlantedCorpus::sample(
            world,
            self.config.ablate.eval_tokens,
            self.config.eval_seed(),
        ))
    }

    /// Categories from the config, else per-marker categories of the world,
    /// else the reasoning defaults.
    pub fn categories(&self, world: Option<&PlantedWorld>) -> Vec<ReasoningCategory> {
        if let Some(c) = &self.config.categories {
            return c.clone();
        }
        match world {
            Some(w) => marker_categories(w),
            None => ReasoningCategory::reasoning_defaults(),
        }
    }

    pub fn write_report<T: Serialize>(&self, command: &str, name: &str, report: &T) -> Result<PathBuf> {
        let generated_at_unix = self.timestamp.then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
        let env = Envelope {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config_digest: &self.digest,
            seed: self.config.seed,
            deterministic: self.deterministic,
            generated_at_unix,
            report,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// One category per planted marker token, named after the marker.
pub fn marker_categories(world: &PlantedWorld) -> Vec<ReasoningCategory> {
    world
        .ids_of(PlantedKind::UniqueDistilled)
        .into_iter()
        .filter_map(|g| {
            let text = world.token_text(world.marker_of(g)?)?;
            Some(ReasoningCategory {
                name: text.trim_matches(['<', '>']).to_string(),
                target_tokens: vec![text],
            })
        })
        .collect()
}

/// Normalized-space and raw-space parameters of a checkpoint.
pub fn checkpoint_params(ckpt: &Checkpoint) -> Result<(CrosscoderParams, CrosscoderParams)> {
    let factors = if ckpt.header.config.normalization.is_empty() {
        vec![1.0; ckpt.params.n_sides()]
    } else {
        ckpt.header.config.normalization.clone()
    };
    let raw = fold_normalization(&ckpt.params, &factors)?;
    Ok((ckpt.params.clone(), raw))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(xcdiff_core::sha256_hex(&bytes))
}

/// Relative path for reports, so output is independent of `--out`.
pub fn relative(run: &Run, path: &Path) -> String {
    path.strip_prefix(&run.out).unwrap_or(path).display().to_string()
}
