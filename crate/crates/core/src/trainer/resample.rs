//! Dead-feature resampling.
//!
//! A feature that has not fired for a configured number of tokens is
//! re-initialised toward an input the coder currently reconstructs badly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::coder::{random_unit, Batch, CrosscoderParams, INIT_DECODER_NORM};
use crate::linalg::norm_l2;

/// Encoder rows of resampled features get this multiple of the mean live
/// encoder-row norm.
pub const RESAMPLE_ENCODER_SCALE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleReport {
    pub features: Vec<usize>,
    /// Batch row each feature was pointed at (`None`: random direction).
    pub source_rows: Vec<Option<usize>>,
    pub encoder_norm: f64,
}

/// Re-initialises every feature in `dead`.
///
/// Each dead feature picks a row of `rows` with probability proportional to
/// `row_losses` (uniformly if all losses are zero). Its decoder row on every
/// side becomes that side's input direction scaled to
/// [`INIT_DECODER_NORM`]; its encoder row points along the concatenated input
/// with norm [`RESAMPLE_ENCODER_SCALE`] × the mean norm of the live encoder
/// rows; its encoder bias and optimizer moments are zeroed.
pub fn resample_dead(
    params: &mut CrosscoderParams,
    adam: &mut AdamState,
    dead: &[usize],
    rows: &Batch,
    row_losses: &[f64],
    seed: u64,
) -> ResampleReport {
    if dead.is_empty() {
        return ResampleReport {
            features: Vec::new(),
            source_rows: Vec::new(),
            encoder_norm: 0.0,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_features = params.n_features();
    let mut is_dead = vec![false; n_features];
    for &k in dead {
        is_dead[k] = true;
    }
    let live_norms: Vec<f64> = (0..n_features)
        .filter(|&k| !is_dead[k])
        .map(|k| norm_l2(&params.encoder_row(k)))
        .collect();
    let mean_live = if live_norms.is_empty() {
        1.0
    } else {
        live_norms.iter().sum::<f64>() / live_norms.len() as f64
    };
    let encoder_norm = RESAMPLE_ENCODER_SCALE * mean_live;

    let n_rows = rows.rows().min(row_losses.len());
    let weight_total: f64 = row_losses[..n_rows].iter().map(|l| l.max(0.0)).sum();
    let mut source_rows = Vec::with_capacity(dead.len());

    for &k in dead {
        let source = if n_rows == 0 {
            None
        } else if weight_total > 0.0 {
            let mut target = rng.random::<f64>() * weight_total;
            let mut chosen = n_rows - 1;
            for (r, l) in row_losses[..n_rows].iter().enumerate() {
                target -= l.max(0.0);
                if target < 0.0 {
                    chosen = r;
                    break;
                }
            }
            Some(chosen)
        } else {
            Some(rng.random_range(0..n_rows))
        };
        source_rows.push(source);

        let mut concat = Vec::new();
        for (i, side) in params.sides.iter_mut().enumerate() {
            let d = side.b_dec.len();
            let mut dir = match source {
                Some(r) => rows.side(i).row(r).to_vec(),
                None => vec![0.0; d],
            };
            let n = norm_l2(&dir);
            if n > 0.0 {
                dir.iter_mut().for_each(|x| *x /= n);
            } else {
                random_unit(&mut rng, &mut dir);
            }
            for (dst, &src) in side.w_dec.row_mut(k).iter_mut().zip(&dir) {
                *dst = INIT_DECODER_NORM * src;
            }
            match source {
                Some(r) => concat.extend_from_slice(rows.side(i).row(r)),
                None => concat.extend_from_slice(&dir),
            }
        }
        let mut n = norm_l2(&concat);
        if n == 0.0 {
            random_unit(&mut rng, &mut concat);
            n = 1.0;
        }
        let mut offset = 0;
        for side in &mut params.sides {
            let d = side.b_dec.len();
            for (dst, &src) in side.w_enc.row_mut(k).iter_mut().zip(&concat[offset..offset + d]) {
                *dst = encoder_norm * src / n;
            }
            offset += d;
        }
        params.b_enc[k] = 0.0;
        adam.reset_feature(k);
    }

    ResampleReport {
        features: dead.to_vec(),
        source_rows,
        encoder_norm,
    }
}
