//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic       8 bytes  "XCODCKPT"
//! version     u32      = 1
//! header_len  u32      byte length of the JSON header
//! header      JSON     CheckpointHeader
//! blocks      f64 ...  params, then Adam first moments, then Adam second
//!                      moments; each in the order b_enc, then per side
//!                      w_enc (F×d row-major), w_dec (F×d row-major), b_dec
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::{TrainConfig, WindowAccumulator};
use crate::coder::{CoderShape, CrosscoderParams};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XCODCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub shape: CoderShape,
    pub config_digest: String,
    pub config: TrainConfig,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    pub adam_t: u64,
    /// Per feature, tokens seen since it last fired.
    pub tokens_since_fired: Vec<u64>,
    pub window: WindowAccumulator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: CrosscoderParams,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let header_len =
            u32::try_from(header.len()).map_err(|_| Error::CorruptCheckpoint("header exceeds 4 GiB".into()))?;
        let n_floats = 3 * self.params.num_params();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n_floats);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for record in [&self.params, &self.adam.m, &self.adam.v] {
            for block in record.blocks() {
                for x in block {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::CorruptCheckpoint(format!(
                "{} bytes is shorter than the preamble",
                bytes.len()
            )));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: Default::default(),
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: Default::default(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(Error::CorruptCheckpoint("header extends past end of file".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])?;
        header.shape.validate()?;
        if header.tokens_since_fired.len() != header.shape.n_features {
            return Err(Error::CorruptCheckpoint(
                "dead-feature counters disagree with shape".into(),
            ));
        }
        let mut records = [
            CrosscoderParams::zeros(&header.shape)?,
            CrosscoderParams::zeros(&header.shape)?,
            CrosscoderParams::zeros(&header.shape)?,
        ];
        let expected = 3 * 8 * records[0].num_params();
        let floats = &body[header_len..];
        if floats.len() != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {expected} bytes of parameter blocks, found {}",
                floats.len()
            )));
        }
        let mut chunks = floats.chunks_exact(8);
        for record in &mut records {
            for block in record.blocks_mut() {
                for (x, c) in block.iter_mut().zip(&mut chunks) {
                    *x = f64::from_le_bytes(c.try_into().unwrap());
                }
            }
        }
        let [params, m, v] = records;
        let adam = AdamState { m, v, t: header.adam_t };
        Ok(Self { header, params, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::BadMagic { expected, found, .. } => Error::BadMagic {
                path: path.to_path_buf(),
                expected,
                found,
            },
            Error::UnsupportedVersion { found, supported, .. } => Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found,
                supported,
            },
            other => other,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}
