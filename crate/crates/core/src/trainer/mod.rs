//! Training loop: adaptive-moment updates, λ warmup, learning-rate decay,
//! dead-feature resampling, windowed metrics and checkpoints.
//!
//! Training happens in a normalized space where every side's activations
//! have expected L2 norm `sqrt(d_i)`. The [`Trainer`] scales raw batches
//! itself; [`fold_normalization`] turns the trained parameters back into a
//! coder that consumes raw activations directly.

mod adam;
mod checkpoint;
mod resample;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use resample::{resample_dead, ResampleReport, RESAMPLE_ENCODER_SCALE};

use serde::{Deserialize, Serialize};

use crate::actstore::CorpusStats;
use crate::coder::{evaluate, Batch, CoderShape, CrosscoderParams, LossRecord, SparsityKind};
use crate::digest::sha256_json;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_features: usize,
    /// Target sparsity; for the weighted-L1 kind the coefficient is λ_max.
    pub sparsity: SparsityKind,
    pub learning_rate: f64,
    /// Fraction of final steps over which the learning rate decays linearly to 0.
    pub lr_decay_fraction: f64,
    /// Fraction of initial steps over which λ ramps linearly from 0 to λ_max.
    pub lambda_warmup_fraction: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub dead_threshold_tokens: u64,
    pub resample_interval_steps: u64,
    pub resample: bool,
    /// Per-side multiplier applied to raw activations. Empty means 1 per side.
    pub normalization: Vec<f64>,
    pub log_every: u64,
    pub shuffle_buffer: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_features: 96,
            sparsity: SparsityKind::default(),
            learning_rate: 1e-3,
            lr_decay_fraction: 0.2,
            lambda_warmup_fraction: 0.05,
            batch_size: 256,
            total_steps: 5_000,
            seed: 0,
            dead_threshold_tokens: 200_000,
            resample_interval_steps: 10_000,
            resample: true,
            normalization: Vec::new(),
            log_every: 100,
            shuffle_buffer: 4_096,
        }
    }
}

impl TrainConfig {
    /// Full-scale preset: 32768 features over roughly 200M tokens.
    pub fn full_scale() -> Self {
        Self {
            n_features: 32_768,
            sparsity: SparsityKind::WeightedL1 { coefficient: 2.0 },
            learning_rate: 5e-5,
            batch_size: 4_096,
            total_steps: 48_828,
            shuffle_buffer: 1 << 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_features == 0 {
            return bad("n_features must be >= 1".into());
        }
        self.sparsity.validate(self.n_features)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("lr_decay_fraction", self.lr_decay_fraction),
            ("lambda_warmup_fraction", self.lambda_warmup_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1".into());
        }
        if self.dead_threshold_tokens == 0 || self.resample_interval_steps == 0 || self.log_every == 0 {
            return bad("dead_threshold_tokens, resample_interval_steps and log_every must be >= 1".into());
        }
        if self.shuffle_buffer == 0 {
            return bad("shuffle_buffer must be >= 1".into());
        }
        if let Some(f) = self.normalization.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
            return bad(format!("normalization factors must be positive, got {f}"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_json(self)
    }

    fn warmup_steps(&self) -> u64 {
        (self.lambda_warmup_fraction * self.total_steps as f64).ceil() as u64
    }

    fn decay_steps(&self) -> u64 {
        (self.lr_decay_fraction * self.total_steps as f64).round() as u64
    }

    /// Learning rate used by optimizer step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let decay = self.decay_steps();
        let start = self.total_steps - decay;
        if decay == 0 || step <= start {
            self.learning_rate
        } else {
            let remaining = self.total_steps.saturating_sub(step) + 1;
            self.learning_rate * remaining as f64 / decay as f64
        }
    }

    /// λ used by optimizer step `step` (1-based): `λ_max · min(1, step / warmup)`.
    pub fn lambda_at(&self, step: u64) -> f64 {
        let lambda_max = match self.sparsity {
            SparsityKind::WeightedL1 { coefficient } => coefficient,
            SparsityKind::TopK { .. } => return 0.0,
        };
        let warmup = self.warmup_steps();
        if warmup == 0 {
            lambda_max
        } else {
            lambda_max * (step as f64 / warmup as f64).min(1.0)
        }
    }
}

/// Per-side factors that bring the expected activation norm to `sqrt(d_i)`.
pub fn normalize_factors(stats: &CorpusStats) -> Result<Vec<f64>> {
    stats
        .sides
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.mean_norm > 0.0 && s.mean_norm.is_finite() {
                Ok((s.mean.len() as f64).sqrt() / s.mean_norm)
            } else {
                Err(Error::Undefined(format!(
                    "side {i} has mean activation norm {}; cannot normalize",
                    s.mean_norm
                )))
            }
        })
        .collect()
}

/// Multiplies side `i` of `batch` by `factors[i]`.
pub fn scale_batch(batch: &Batch, factors: &[f64]) -> Result<Batch> {
    if factors.len() != batch.n_sides() {
        return Err(Error::SideMismatch(format!(
            "{} normalization factors for a {}-side batch",
            factors.len(),
            batch.n_sides()
        )));
    }
    let mut out = batch.clone();
    for (m, &s) in out.sides_mut().iter_mut().zip(factors) {
        m.scale(s);
    }
    Ok(out)
}

/// Rewrites normalized-space parameters into an equivalent raw-space coder.
///
/// With `x' = s·x`, encoding is unchanged by `W_enc ← s·W_enc`, and the raw
/// reconstruction `x̂'/s` is produced by `W_dec ← W_dec/s`, `b_dec ← b_dec/s`.
pub fn fold_normalization(params: &CrosscoderParams, factors: &[f64]) -> Result<CrosscoderParams> {
    if factors.len() != params.n_sides() {
        return Err(Error::SideMismatch(format!(
            "{} normalization factors for a {}-side coder",
            factors.len(),
            params.n_sides()
        )));
    }
    let mut out = params.clone();
    for (side, &s) in out.sides.iter_mut().zip(factors) {
        side.w_enc.scale(s);
        side.w_dec.scale(1.0 / s);
        side.b_dec.iter_mut().for_each(|x| *x /= s);
    }
    Ok(out)
}

/// One logged row: means over the window ending at `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub total_loss: f64,
    pub recon_mse_per_side: Vec<f64>,
    pub sparsity_term: f64,
    pub l0: f64,
    pub dead_features: usize,
    pub learning_rate: f64,
    pub lambda: f64,
}

/// Running sums for the current metrics window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowAccumulator {
    pub steps: u64,
    pub total: f64,
    pub recon: Vec<f64>,
    pub sparsity: f64,
    pub l0: f64,
}

impl WindowAccumulator {
    fn add(&mut self, r: &LossRecord) {
        if self.recon.len() != r.recon_mse_per_side.len() {
            self.recon = vec![0.0; r.recon_mse_per_side.len()];
        }
        self.steps += 1;
        self.total += r.total;
        self.sparsity += r.sparsity_term;
        self.l0 += r.l0;
        for (a, b) in self.recon.iter_mut().zip(&r.recon_mse_per_side) {
            *a += b;
        }
    }

    fn drain(&mut self) -> (f64, Vec<f64>, f64, f64) {
        let n = self.steps.max(1) as f64;
        let out = (
            self.total / n,
            self.recon.iter().map(|x| x / n).collect(),
            self.sparsity / n,
            self.l0 / n,
        );
        *self = Self::default();
        out
    }
}

/// Owns parameters, optimizer state and dead-feature counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    config_digest: String,
    factors: Vec<f64>,
    params: CrosscoderParams,
    adam: AdamState,
    step: u64,
    tokens_since_fired: Vec<u64>,
    window: WindowAccumulator,
    resamples: Vec<(u64, ResampleReport)>,
}

impl Trainer {
    /// Fresh trainer for activations of the given per-side widths.
    pub fn new(config: TrainConfig, dims: &[usize]) -> Result<Self> {
        config.validate()?;
        let shape = CoderShape::new(dims.len(), dims.to_vec(), config.n_features)?;
        let factors = resolve_factors(&config, dims.len())?;
        let params = CrosscoderParams::init(&shape, config.seed)?;
        let adam = AdamState::new(&shape)?;
        Ok(Self {
            config_digest: config.digest(),
            tokens_since_fired: vec![0; config.n_features],
            config,
            factors,
            params,
            adam,
            step: 0,
            window: WindowAccumulator::default(),
            resamples: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let Checkpoint { header, params, adam } = ckpt;
        header.config.validate()?;
        if header.config.digest() != header.config_digest {
            return Err(Error::CorruptCheckpoint(
                "config digest does not match stored config".into(),
            ));
        }
        if header.config.n_features != header.shape.n_features {
            return Err(Error::CorruptCheckpoint(
                "config and shape disagree on n_features".into(),
            ));
        }
        let factors = resolve_factors(&header.config, header.shape.n_sides)?;
        Ok(Self {
            config: header.config,
            config_digest: header.config_digest,
            factors,
            params,
            adam,
            step: header.step,
            tokens_since_fired: header.tokens_since_fired,
            window: header.window,
            resamples: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                shape: self.params.shape.clone(),
                config_digest: self.config_digest.clone(),
                config: self.config.clone(),
                step: self.step,
                seed: self.config.seed,
                adam_t: self.adam.t,
                tokens_since_fired: self.tokens_since_fired.clone(),
                window: self.window.clone(),
            },
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    /// Parameters in the normalized training space.
    pub fn params(&self) -> &CrosscoderParams {
        &self.params
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Parameters folded to consume raw activations.
    pub fn raw_params(&self) -> Result<CrosscoderParams> {
        fold_normalization(&self.params, &self.factors)
    }

    /// Features that have not fired within the dead threshold.
    pub fn dead_features(&self) -> Vec<usize> {
        self.tokens_since_fired
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= self.config.dead_threshold_tokens)
            .map(|(k, _)| k)
            .collect()
    }

    /// Resampling events so far in this session, keyed by step.
    pub fn resamples(&self) -> &[(u64, ResampleReport)] {
        &self.resamples
    }

    /// One optimizer step on a raw batch. Returns a metrics row when the
    /// step closes a logging window.
    pub fn step(&mut self, raw: &Batch) -> Result<Option<TrainMetrics>> {
        let step = self.step + 1;
        let batch = scale_batch(raw, &self.factors)?;
        let lambda = self.config.lambda_at(step);
        let lr = self.config.lr_at(step);
        let sparsity = self.config.sparsity.with_coefficient(lambda);
        let (record, grads, fwd) = evaluate(&self.params, &batch, &sparsity).map_err(|e| match e {
            Error::NonFinite(detail) => Error::NonFiniteLoss { step, detail },
            other => other,
        })?;
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("total loss {} (recon {:?})", record.total, record.recon_mse_per_side),
            });
        }
        self.adam.update(&mut self.params, &grads, lr);
        if !self.params.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "parameters became non-finite after the update".into(),
            });
        }

        let rows = batch.rows() as u64;
        let mut fired = vec![false; self.params.n_features()];
        for act in &fwd.active {
            for &k in act {
                fired[k] = true;
            }
        }
        for (t, f) in self.tokens_since_fired.iter_mut().zip(fired) {
            *t = if f { 0 } else { t.saturating_add(rows) };
        }

        if self.config.resample && step.is_multiple_of(self.config.resample_interval_steps) {
            let dead = self.dead_features();
            if !dead.is_empty() {
                let row_losses: Vec<f64> = (0..batch.rows())
                    .map(|b| {
                        (0..batch.n_sides())
                            .map(|i| {
                                let a = batch.side(i).row(b);
                                let r = fwd.recon[i].row(b);
                                a.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                            })
                            .sum()
                    })
                    .collect();
                let seed = resample_seed(self.config.seed, step);
                let report = resample_dead(&mut self.params, &mut self.adam, &dead, &batch, &row_losses, seed);
                for &k in &dead {
                    self.tokens_since_fired[k] = 0;
                }
                self.resamples.push((step, report));
            }
        }

        self.step = step;
        self.window.add(&record);
        if step.is_multiple_of(self.config.log_every) {
            let (total_loss, recon_mse_per_side, sparsity_term, l0) = self.window.drain();
            return Ok(Some(TrainMetrics {
                step,
                total_loss,
                recon_mse_per_side,
                sparsity_term,
                l0,
                dead_features: self.dead_features().len(),
                learning_rate: lr,
                lambda,
            }));
        }
        Ok(None)
    }

    /// Steps until `total_steps`, pulling one batch per step.
    pub fn run<I>(&mut self, data: I) -> Result<Vec<TrainMetrics>>
    where
        I: IntoIterator<Item = Result<Batch>>,
    {
        let mut data = data.into_iter();
        let mut log = Vec::new();
        while !self.is_done() {
            let batch = data.next().ok_or(Error::StreamExhausted {
                step: self.step,
                total_steps: self.config.total_steps,
            })??;
            if let Some(m) = self.step(&batch)? {
                log.push(m);
            }
        }
        Ok(log)
    }
}

fn resolve_factors(config: &TrainConfig, n_sides: usize) -> Result<Vec<f64>> {
    match config.normalization.len() {
        0 => Ok(vec![1.0; n_sides]),
        n if n == n_sides => Ok(config.normalization.clone()),
        n => Err(Error::SideMismatch(format!(
            "{n} normalization factors for {n_sides} sides"
        ))),
    }
}

fn resample_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Normalized-space parameters.
    pub params: CrosscoderParams,
    pub metrics: Vec<TrainMetrics>,
    pub checkpoint: Checkpoint,
}

/// Trains from scratch, or continues from `resume`.
///
/// `data` must be the same stream the run started with: when resuming, the
/// batches consumed before the checkpoint are skipped so the continuation
/// sees exactly what an uninterrupted run would have.
pub fn train<I>(config: TrainConfig, dims: &[usize], data: I, resume: Option<Checkpoint>) -> Result<TrainOutput>
where
    I: IntoIterator<Item = Result<Batch>>,
{
    let mut trainer = match resume {
        Some(ckpt) => {
            if ckpt.header.config_digest != config.digest() {
                return Err(Error::InvalidConfig(
                    "resume checkpoint was written under a different configuration".into(),
                ));
            }
            if ckpt.header.shape.dims != dims {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint dims {:?} but stream dims {:?}",
                    ckpt.header.shape.dims, dims
                )));
            }
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(config, dims)?,
    };
    let mut data = data.into_iter();
    for consumed in 0..trainer.step_count() {
        if data.next().transpose()?.is_none() {
            return Err(Error::StreamExhausted {
                step: consumed,
                total_steps: trainer.config().total_steps,
            });
        }
    }
    let metrics = trainer.run(data)?;
    Ok(TrainOutput {
        params: trainer.params().clone(),
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}
