use serde::{Deserialize, Serialize};

use crate::coder::{CoderShape, CrosscoderParams};
use crate::error::Result;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adaptive-moment optimizer state, one moment record per parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: CrosscoderParams,
    pub v: CrosscoderParams,
    /// Number of updates applied so far (bias-correction exponent).
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &CoderShape) -> Result<Self> {
        Ok(Self {
            m: CrosscoderParams::zeros(shape)?,
            v: CrosscoderParams::zeros(shape)?,
            t: 0,
        })
    }

    /// One bias-corrected update of `params` in place.
    pub fn update(&mut self, params: &mut CrosscoderParams, grads: &CrosscoderParams, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let step = lr / bc1;
        for (((p, g), m), v) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                p[j] -= step * m[j] / ((v[j] / bc2).sqrt() + EPSILON);
            }
        }
    }

    /// Zeroes both moments for feature `k` (its `b_enc` entry and its encoder
    /// and decoder rows on every side).
    pub fn reset_feature(&mut self, k: usize) {
        for moments in [&mut self.m, &mut self.v] {
            moments.b_enc[k] = 0.0;
            for side in &mut moments.sides {
                side.w_enc.row_mut(k).fill(0.0);
                side.w_dec.row_mut(k).fill(0.0);
            }
        }
    }
}
