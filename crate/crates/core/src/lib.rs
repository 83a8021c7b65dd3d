//! Sparse crosscoder toolkit for diffing a base model against a distilled
//! model.
//!
//! The crate is organised bottom-up:
//!
//! - [`coder`]: crosscoder / SAE forward pass, loss and analytic gradients.
//! - [`trainer`]: adaptive-moment training loop, schedules, dead-feature
//!   resampling and the binary checkpoint format.
//! - [`actstore`]: binary activation shards with a JSONL token sidecar.
//! - [`diff`]: decoder-norm ratios, firing statistics and max-activating
//!   contexts.
//! - [`intervene`]: ablation-set selection, residual ablation, logit-change
//!   measurement and decoder-vector steering.
//! - [`toymodel`]: a planted-ground-truth world used as a stand-in for a
//!   real base/distilled model pair.
//! - [`geometry`]: PCA and parallelogram loss over function-class word pairs.

pub mod actstore;
pub mod coder;
pub mod diff;
pub mod error;
pub mod geometry;
pub mod intervene;
pub mod linalg;
pub mod toymodel;
pub mod trainer;

mod digest;

pub use coder::{Batch, CoderShape, CrosscoderParams, LossRecord, SideParams, SparsityKind};
pub use digest::{sha256_hex, sha256_json};
pub use error::{Error, Result};
pub use linalg::Matrix;

/// Which model of the pair a quantity belongs to.
///
/// Side A is the base model and side B the distilled model. Single-side
/// coders (plain SAEs) only have [`Side::Base`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Base,
    Distilled,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Base => 0,
            Side::Distilled => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Side> {
        match index {
            0 => Some(Side::Base),
            1 => Some(Side::Distilled),
            _ => None,
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Base => Side::Distilled,
            Side::Distilled => Side::Base,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Base => f.write_str("base"),
            Side::Distilled => f.write_str("distilled"),
        }
    }
}
