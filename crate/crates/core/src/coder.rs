//! Sparse crosscoder forward pass, loss and analytic gradients.
//!
//! A crosscoder reads one activation vector per model side, sums the per-side
//! encoder projections into a single shared feature code, and decodes that
//! code back into a reconstruction for every side:
//!
//! ```text
//! f      = ReLU( Σ_i W_enc^(i) a^(i) + b_enc )
//! a'^(i) = Σ_k f_k W_dec,k^(i) + b_dec^(i)
//! L      = Σ_i ‖a'^(i) − a^(i)‖² + λ Σ_k f_k Σ_i ‖W_dec,k^(i)‖₂
//! ```
//!
//! With a single side this is an ordinary sparse autoencoder. The loss is
//! averaged over batch rows. Under [`SparsityKind::TopK`] only the `k` largest
//! pre-activations per row survive and the decoder-norm penalty is dropped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm_l2, Matrix};

/// Norm of every freshly initialised decoder row, per side.
pub const INIT_DECODER_NORM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoderShape {
    pub n_sides: usize,
    pub dims: Vec<usize>,
    pub n_features: usize,
}

impl CoderShape {
    pub fn new(n_sides: usize, dims: Vec<usize>, n_features: usize) -> Result<Self> {
        let shape = Self {
            n_sides,
            dims,
            n_features,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn crosscoder(d_base: usize, d_distilled: usize, n_features: usize) -> Result<Self> {
        Self::new(2, vec![d_base, d_distilled], n_features)
    }

    pub fn sae(d: usize, n_features: usize) -> Result<Self> {
        Self::new(1, vec![d], n_features)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_sides) {
            return Err(Error::InvalidShape(format!(
                "n_sides must be 1 or 2, got {}",
                self.n_sides
            )));
        }
        if self.dims.len() != self.n_sides {
            return Err(Error::InvalidShape(format!(
                "{} dims given for {} sides",
                self.dims.len(),
                self.n_sides
            )));
        }
        if let Some(i) = self.dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("side {i} has dimension 0")));
        }
        if self.n_features == 0 {
            return Err(Error::InvalidShape("n_features must be at least 1".into()));
        }
        Ok(())
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsityKind {
    /// Decoder-norm weighted L1 penalty with coefficient λ.
    WeightedL1 { coefficient: f64 },
    /// Keep the `k` largest pre-activations per row; no penalty term.
    TopK { k: usize },
}

impl Default for SparsityKind {
    fn default() -> Self {
        SparsityKind::WeightedL1 { coefficient: 1.0 }
    }
}

impl SparsityKind {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        match *self {
            SparsityKind::WeightedL1 { coefficient } => {
                if !(coefficient >= 0.0 && coefficient.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "sparsity coefficient must be finite and >= 0, got {coefficient}"
                    )));
                }
            }
            SparsityKind::TopK { k } => {
                if k == 0 || k > n_features {
                    return Err(Error::InvalidConfig(format!(
                        "top-k must lie in 1..={n_features}, got {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same kind with the penalty coefficient replaced; TopK is returned unchanged.
    pub fn with_coefficient(self, coefficient: f64) -> Self {
        match self {
            SparsityKind::WeightedL1 { .. } => SparsityKind::WeightedL1 { coefficient },
            topk => topk,
        }
    }

    fn penalty(&self) -> f64 {
        match *self {
            SparsityKind::WeightedL1 { coefficient } => coefficient,
            SparsityKind::TopK { .. } => 0.0,
        }
    }
}

/// A batch of paired activations: one `B × d_i` matrix per side.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    sides: Vec<Matrix>,
}

impl Batch {
    pub fn new(sides: Vec<Matrix>) -> Result<Self> {
        let Some(first) = sides.first() else {
            return Err(Error::ShapeMismatch("batch has no sides".into()));
        };
        let rows = first.rows();
        if let Some(i) = sides.iter().position(|m| m.rows() != rows) {
            return Err(Error::ShapeMismatch(format!(
                "side {i} has {} rows, side 0 has {rows}",
                sides[i].rows()
            )));
        }
        Ok(Self { sides })
    }

    /// Single-row batch from per-side vectors.
    pub fn from_row(sides: &[&[f64]]) -> Result<Self> {
        Self::new(
            sides
                .iter()
                .map(|s| Matrix::from_vec(1, s.len(), s.to_vec()))
                .collect::<Result<_>>()?,
        )
    }

    pub fn rows(&self) -> usize {
        self.sides[0].rows()
    }

    pub fn n_sides(&self) -> usize {
        self.sides.len()
    }

    pub fn side(&self, i: usize) -> &Matrix {
        &self.sides[i]
    }

    pub fn sides(&self) -> &[Matrix] {
        &self.sides
    }

    pub fn sides_mut(&mut self) -> &mut [Matrix] {
        &mut self.sides
    }

    pub fn into_sides(self) -> Vec<Matrix> {
        self.sides
    }

    pub fn is_finite(&self) -> bool {
        self.sides.iter().all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideParams {
    /// `F × d`; row `k` projects this side's activation onto feature `k`.
    pub w_enc: Matrix,
    /// `F × d`; row `k` is feature `k`'s decoder vector for this side.
    pub w_dec: Matrix,
    pub b_dec: Vec<f64>,
}

impl SideParams {
    fn zeros(n_features: usize, dim: usize) -> Self {
        Self {
            w_enc: Matrix::zeros(n_features, dim),
            w_dec: Matrix::zeros(n_features, dim),
            b_dec: vec![0.0; dim],
        }
    }
}

/// Crosscoder (or SAE, with one side) parameters.
///
/// The same structure doubles as the gradient and optimizer-moment record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscoderParams {
    pub shape: CoderShape,
    pub b_enc: Vec<f64>,
    pub sides: Vec<SideParams>,
}

impl CrosscoderParams {
    pub fn zeros(shape: &CoderShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape: shape.clone(),
            b_enc: vec![0.0; shape.n_features],
            sides: shape
                .dims
                .iter()
                .map(|&d| SideParams::zeros(shape.n_features, d))
                .collect(),
        })
    }

    /// Seeded initialisation.
    ///
    /// Decoder rows are uniform on the sphere, rescaled to norm
    /// [`INIT_DECODER_NORM`] per side; the encoder is the transpose of the
    /// concatenated decoder and all biases are zero.
    pub fn init(shape: &CoderShape, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for side in &mut params.sides {
            for k in 0..shape.n_features {
                let row = side.w_dec.row_mut(k);
                random_unit(&mut rng, row);
                row.iter_mut().for_each(|x| *x *= INIT_DECODER_NORM);
            }
            side.w_enc = side.w_dec.clone();
        }
        Ok(params)
    }

    pub fn n_features(&self) -> usize {
        self.shape.n_features
    }

    pub fn n_sides(&self) -> usize {
        self.shape.n_sides
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Parameter blocks in the canonical order: `b_enc`, then for every side
    /// `w_enc`, `w_dec`, `b_dec`.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.b_enc];
        for side in &self.sides {
            out.push(side.w_enc.as_slice());
            out.push(side.w_dec.as_slice());
            out.push(&side.b_dec);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.b_enc];
        for side in &mut self.sides {
            out.push(side.w_enc.as_mut_slice());
            out.push(side.w_dec.as_mut_slice());
            out.push(&mut side.b_dec);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Checks internal consistency of every block with `shape`.
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let f = self.shape.n_features;
        if self.b_enc.len() != f || self.sides.len() != self.shape.n_sides {
            return Err(Error::ShapeMismatch("parameter blocks disagree with shape".into()));
        }
        for (i, (side, &d)) in self.sides.iter().zip(&self.shape.dims).enumerate() {
            if side.w_enc.shape() != (f, d) || side.w_dec.shape() != (f, d) || side.b_dec.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "side {i} blocks do not match {f} features x {d} dims"
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("parameters contain NaN or infinity".into()));
        }
        Ok(())
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.n_sides() != self.shape.n_sides {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} sides, coder has {}",
                batch.n_sides(),
                self.shape.n_sides
            )));
        }
        for (i, (m, &d)) in batch.sides().iter().zip(&self.shape.dims).enumerate() {
            if m.cols() != d {
                return Err(Error::ShapeMismatch(format!(
                    "batch side {i} has width {}, coder expects {d}",
                    m.cols()
                )));
            }
        }
        Ok(())
    }

    /// Per-side L2 norms of every decoder row, `[side][feature]`.
    pub fn decoder_l2_norms(&self) -> Vec<Vec<f64>> {
        self.sides
            .iter()
            .map(|s| s.w_dec.row_iter().map(norm_l2).collect())
            .collect()
    }

    /// Encoder row `k` concatenated across sides.
    pub fn encoder_row(&self, k: usize) -> Vec<f64> {
        self.sides.iter().flat_map(|s| s.w_enc.row(k).iter().copied()).collect()
    }
}

/// Fills `out` with a uniformly distributed unit vector.
pub(crate) fn random_unit<R: rand::Rng>(rng: &mut R, out: &mut [f64]) {
    loop {
        for x in out.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let n = norm_l2(out);
        if n > 1e-12 {
            out.iter_mut().for_each(|x| *x /= n);
            return;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    /// Batch mean of `‖a'^(i) − a^(i)‖²` per side.
    pub recon_mse_per_side: Vec<f64>,
    /// Batch mean of the λ-weighted decoder-norm penalty (0 under TopK).
    pub sparsity_term: f64,
    /// Mean number of active features per row.
    pub l0: f64,
}

/// Intermediate values of one forward pass.
pub(crate) struct Forward {
    pub codes: Matrix,
    /// Active (strictly positive, unmasked) feature ids per row, ascending.
    pub active: Vec<Vec<usize>>,
    /// Per-side reconstructions.
    pub recon: Vec<Matrix>,
}

fn pre_activations(params: &CrosscoderParams, batch: &Batch) -> Matrix {
    let f = params.n_features();
    let mut pre = Matrix::zeros(batch.rows(), f);
    for b in 0..batch.rows() {
        let row = pre.row_mut(b);
        row.copy_from_slice(&params.b_enc);
        for (side, a) in params.sides.iter().zip(batch.sides()) {
            let a_row = a.row(b);
            for (k, v) in row.iter_mut().enumerate() {
                *v += dot(side.w_enc.row(k), a_row);
            }
        }
    }
    pre
}

/// Applies the activation to a row of pre-activations in place; returns the
/// ids of strictly positive survivors in ascending order.
fn activate_row(row: &mut [f64], sparsity: &SparsityKind, scratch: &mut Vec<usize>) -> Vec<usize> {
    if let SparsityKind::TopK { k } = *sparsity {
        if k < row.len() {
            scratch.clear();
            scratch.extend(0..row.len());
            // Descending by value, ties to the lower index.
            scratch.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            for &i in &scratch[k..] {
                row[i] = 0.0;
            }
        }
    }
    let mut active = Vec::new();
    for (k, v) in row.iter_mut().enumerate() {
        if *v > 0.0 {
            active.push(k);
        } else {
            *v = 0.0;
        }
    }
    active
}

pub(crate) fn forward(params: &CrosscoderParams, batch: &Batch, sparsity: &SparsityKind) -> Result<Forward> {
    params.check_batch(batch)?;
    let mut codes = pre_activations(params, batch);
    let mut scratch = Vec::new();
    let active: Vec<Vec<usize>> = (0..codes.rows())
        .map(|b| activate_row(codes.row_mut(b), sparsity, &mut scratch))
        .collect();
    let recon = decode_sparse(params, &codes, &active);
    Ok(Forward { codes, active, recon })
}

fn decode_sparse(params: &CrosscoderParams, codes: &Matrix, active: &[Vec<usize>]) -> Vec<Matrix> {
    params
        .sides
        .iter()
        .map(|side| {
            let d = side.b_dec.len();
            let mut out = Matrix::zeros(codes.rows(), d);
            for (b, act) in active.iter().enumerate() {
                let row = out.row_mut(b);
                row.copy_from_slice(&side.b_dec);
                for &k in act {
                    axpy(codes[(b, k)], side.w_dec.row(k), row);
                }
            }
            out
        })
        .collect()
}

/// Feature activations, `B × F`, all entries `>= 0`.
pub fn encode(params: &CrosscoderParams, batch: &Batch, sparsity: &SparsityKind) -> Result<Matrix> {
    Ok(forward(params, batch, sparsity)?.codes)
}

/// Per-side reconstructions from a feature code matrix.
pub fn decode(params: &CrosscoderParams, codes: &Matrix) -> Result<Vec<Matrix>> {
    if codes.cols() != params.n_features() {
        return Err(Error::ShapeMismatch(format!(
            "code has {} features, coder has {}",
            codes.cols(),
            params.n_features()
        )));
    }
    debug_assert!(codes.as_slice().iter().all(|&x| x >= 0.0));
    let active: Vec<Vec<usize>> = codes
        .row_iter()
        .map(|r| (0..r.len()).filter(|&k| r[k] != 0.0).collect())
        .collect();
    Ok(decode_sparse(params, codes, &active))
}

fn loss_from_forward(
    params: &CrosscoderParams,
    batch: &Batch,
    fwd: &Forward,
    sparsity: &SparsityKind,
    dec_norm_sum: &[f64],
) -> LossRecord {
    let rows = batch.rows();
    let inv_b = 1.0 / rows.max(1) as f64;
    let lambda = sparsity.penalty();
    let mut recon_mse = vec![0.0; params.n_sides()];
    for (i, (a, r)) in batch.sides().iter().zip(&fwd.recon).enumerate() {
        let mut acc = 0.0;
        for b in 0..rows {
            acc += a
                .row(b)
                .iter()
                .zip(r.row(b))
                .map(|(x, y)| (y - x) * (y - x))
                .sum::<f64>();
        }
        recon_mse[i] = acc * inv_b;
    }
    let mut sparsity_acc = 0.0;
    let mut l0 = 0usize;
    for (b, act) in fwd.active.iter().enumerate() {
        l0 += act.len();
        if lambda != 0.0 {
            for &k in act {
                sparsity_acc += fwd.codes[(b, k)] * dec_norm_sum[k];
            }
        }
    }
    let sparsity_term = lambda * sparsity_acc * inv_b;
    LossRecord {
        total: recon_mse.iter().sum::<f64>() + sparsity_term,
        recon_mse_per_side: recon_mse,
        sparsity_term,
        l0: l0 as f64 * inv_b,
    }
}

fn summed_decoder_norms(norms: &[Vec<f64>], n_features: usize) -> Vec<f64> {
    (0..n_features).map(|k| norms.iter().map(|n| n[k]).sum()).collect()
}

pub fn loss(params: &CrosscoderParams, batch: &Batch, sparsity: &SparsityKind) -> Result<LossRecord> {
    if !batch.is_finite() {
        return Err(Error::NonFinite("batch activations contain NaN or infinity".into()));
    }
    let fwd = forward(params, batch, sparsity)?;
    let norms = params.decoder_l2_norms();
    let sums = summed_decoder_norms(&norms, params.n_features());
    Ok(loss_from_forward(params, batch, &fwd, sparsity, &sums))
}

/// Loss together with its analytic gradient.
///
/// The ReLU subgradient at exactly zero is taken as zero and the TopK mask is
/// held fixed, so only features that are active on a row receive encoder
/// gradient from that row.
pub fn loss_and_grad(
    params: &CrosscoderParams,
    batch: &Batch,
    sparsity: &SparsityKind,
) -> Result<(LossRecord, CrosscoderParams)> {
    let (record, grads, _) = evaluate(params, batch, sparsity)?;
    Ok((record, grads))
}

/// Loss, gradient and the forward intermediates they were computed from.
pub(crate) fn evaluate(
    params: &CrosscoderParams,
    batch: &Batch,
    sparsity: &SparsityKind,
) -> Result<(LossRecord, CrosscoderParams, Forward)> {
    if !batch.is_finite() {
        return Err(Error::NonFinite("batch activations contain NaN or infinity".into()));
    }
    let fwd = forward(params, batch, sparsity)?;
    let n_features = params.n_features();
    let norms = params.decoder_l2_norms();
    let sums = summed_decoder_norms(&norms, n_features);
    let record = loss_from_forward(params, batch, &fwd, sparsity, &sums);

    let rows = batch.rows();
    let inv_b = 1.0 / rows.max(1) as f64;
    let lambda = sparsity.penalty();
    let mut grads = CrosscoderParams::zeros(&params.shape)?;
    let mut code_mass = vec![0.0; n_features];
    let mut residuals: Vec<Vec<f64>> = params.shape.dims.iter().map(|&d| vec![0.0; d]).collect();

    for b in 0..rows {
        // r_i = a'_i − a_i, pre-scaled by 2/B.
        for (i, r) in residuals.iter_mut().enumerate() {
            let a = batch.side(i).row(b);
            let rec = fwd.recon[i].row(b);
            for j in 0..r.len() {
                r[j] = 2.0 * (rec[j] - a[j]) * inv_b;
            }
            axpy(1.0, r, &mut grads.sides[i].b_dec);
        }
        for &k in &fwd.active[b] {
            let fk = fwd.codes[(b, k)];
            code_mass[k] += fk;
            let mut d_pre = lambda * sums[k] * inv_b;
            for (i, r) in residuals.iter().enumerate() {
                d_pre += dot(r, params.sides[i].w_dec.row(k));
                axpy(fk, r, grads.sides[i].w_dec.row_mut(k));
            }
            grads.b_enc[k] += d_pre;
            for (i, side) in grads.sides.iter_mut().enumerate() {
                axpy(d_pre, batch.side(i).row(b), side.w_enc.row_mut(k));
            }
        }
    }

    if lambda != 0.0 {
        for (i, side) in grads.sides.iter_mut().enumerate() {
            for k in 0..n_features {
                let n = norms[i][k];
                if code_mass[k] != 0.0 && n > 0.0 {
                    let scale = lambda * code_mass[k] * inv_b / n;
                    axpy(scale, params.sides[i].w_dec.row(k), side.w_dec.row_mut(k));
                }
            }
        }
    }

    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    Ok((record, grads, fwd))
}

/// Analytic gradient of [`loss`] with respect to every parameter.
pub fn grad(params: &CrosscoderParams, batch: &Batch, sparsity: &SparsityKind) -> Result<CrosscoderParams> {
    Ok(loss_and_grad(params, batch, sparsity)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_coder() -> CrosscoderParams {
        let shape = CoderShape::crosscoder(2, 2, 2).unwrap();
        let mut p = CrosscoderParams::zeros(&shape).unwrap();
        p.sides[0].w_enc = Matrix::identity(2);
        p
    }

    #[test]
    fn init_rows_have_fixed_norm_and_are_deterministic() {
        let shape = CoderShape::crosscoder(4, 4, 8).unwrap();
        let p = CrosscoderParams::init(&shape, 7).unwrap();
        for norms in p.decoder_l2_norms() {
            for n in norms {
                assert!((n - 0.1).abs() < 1e-9);
            }
        }
        assert_eq!(p, CrosscoderParams::init(&shape, 7).unwrap());
        assert_ne!(p, CrosscoderParams::init(&shape, 8).unwrap());
        assert_eq!(p.sides[0].w_enc, p.sides[0].w_dec);
        assert!(p.b_enc.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_single_side_is_sae() {
        let shape = CoderShape::sae(4, 8).unwrap();
        let p = CrosscoderParams::init(&shape, 7).unwrap();
        assert_eq!(p.sides.len(), 1);
        assert_eq!(p.num_params(), 8 + 8 * 4 * 2 + 4);
    }

    #[test]
    fn shape_validation() {
        assert!(CoderShape::new(3, vec![1, 1, 1], 4).is_err());
        assert!(CoderShape::new(2, vec![4], 4).is_err());
        assert!(CoderShape::new(2, vec![4, 0], 4).is_err());
        assert!(CoderShape::new(1, vec![4], 0).is_err());
        assert!(CrosscoderParams::init(
            &CoderShape {
                n_sides: 2,
                dims: vec![4, 0],
                n_features: 3
            },
            1
        )
        .is_err());
    }

    #[test]
    fn encode_relu_identity() {
        let p = identity_coder();
        let batch = Batch::from_row(&[&[3.0, -2.0], &[0.0, 0.0]]).unwrap();
        let f = encode(&p, &batch, &SparsityKind::default()).unwrap();
        assert_eq!(f.row(0), &[3.0, 0.0]);
    }

    #[test]
    fn encode_sums_sides() {
        let mut p = identity_coder();
        p.sides[1].w_enc = Matrix::identity(2);
        let batch = Batch::from_row(&[&[1.0, 2.0], &[1.0, 1.0]]).unwrap();
        let f = encode(&p, &batch, &SparsityKind::default()).unwrap();
        assert_eq!(f.row(0), &[2.0, 3.0]);
    }

    #[test]
    fn encode_bias_below_threshold() {
        let mut p = identity_coder();
        p.b_enc = vec![-5.0, -5.0];
        let batch = Batch::from_row(&[&[3.0, -2.0], &[0.0, 0.0]]).unwrap();
        let f = encode(&p, &batch, &SparsityKind::default()).unwrap();
        assert_eq!(f.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn topk_keeps_largest_with_low_index_ties() {
        let shape = CoderShape::sae(4, 4).unwrap();
        let mut p = CrosscoderParams::zeros(&shape).unwrap();
        p.sides[0].w_enc = Matrix::identity(4);
        let batch = Batch::from_row(&[&[2.0, 5.0, 2.0, 1.0]]).unwrap();
        let f = encode(&p, &batch, &SparsityKind::TopK { k: 2 }).unwrap();
        assert_eq!(f.row(0), &[2.0, 5.0, 0.0, 0.0]);
        let f = encode(&p, &batch, &SparsityKind::TopK { k: 1 }).unwrap();
        assert_eq!(f.row(0), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_rejects_shape_mismatch() {
        let p = identity_coder();
        let batch = Batch::from_row(&[&[1.0, 2.0, 3.0], &[0.0, 0.0]]).unwrap();
        assert!(matches!(
            encode(&p, &batch, &SparsityKind::default()),
            Err(Error::ShapeMismatch(_))
        ));
        let one_side = Batch::from_row(&[&[1.0, 2.0]]).unwrap();
        assert!(encode(&p, &one_side, &SparsityKind::default()).is_err());
    }

    #[test]
    fn decode_zero_code_is_bias() {
        let mut p = identity_coder();
        p.sides[0].b_dec = vec![1.0, 1.0];
        p.sides[1].b_dec = vec![-1.0, 4.0];
        let out = decode(&p, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(out[0].row(0), &[1.0, 1.0]);
        assert_eq!(out[1].row(0), &[-1.0, 4.0]);
    }

    #[test]
    fn decode_single_feature() {
        let mut p = identity_coder();
        p.sides[0].w_dec.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        p.sides[0].b_dec = vec![1.0, 1.0];
        let codes = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let out = decode(&p, &codes).unwrap();
        assert_eq!(out[0].row(0), &[3.0, 1.0]);
        assert!(decode(&p, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn loss_zero_for_bias_reconstruction() {
        let mut p = identity_coder();
        p.sides[0].w_enc = Matrix::zeros(2, 2);
        p.sides[0].b_dec = vec![0.5, -1.0];
        p.sides[1].b_dec = vec![2.0, 3.0];
        let batch = Batch::from_row(&[&[0.5, -1.0], &[2.0, 3.0]]).unwrap();
        let rec = loss(&p, &batch, &SparsityKind::default()).unwrap();
        assert_eq!(rec.total, 0.0);
    }

    #[test]
    fn loss_sparsity_term_uses_l2_decoder_norms() {
        // One row, f = (1, 0), decoder norms 2 and 3, exact reconstruction.
        let shape = CoderShape::crosscoder(2, 2, 2).unwrap();
        let mut p = CrosscoderParams::zeros(&shape).unwrap();
        p.sides[0].w_enc.row_mut(0).copy_from_slice(&[0.5, 0.0]);
        p.sides[0].w_dec.row_mut(0).copy_from_slice(&[2.0, 0.0]);
        p.sides[1].w_dec.row_mut(0).copy_from_slice(&[0.0, 3.0]);
        let batch = Batch::from_row(&[&[2.0, 0.0], &[0.0, 3.0]]).unwrap();
        let f = encode(&p, &batch, &SparsityKind::default()).unwrap();
        assert_eq!(f.row(0), &[1.0, 0.0]);
        let rec = loss(&p, &batch, &SparsityKind::WeightedL1 { coefficient: 1.0 }).unwrap();
        assert_eq!(rec.recon_mse_per_side, vec![0.0, 0.0]);
        assert_eq!(rec.total, 5.0);
        let topk = loss(&p, &batch, &SparsityKind::TopK { k: 1 }).unwrap();
        assert_eq!(topk.sparsity_term, 0.0);
    }

    #[test]
    fn loss_rejects_non_finite() {
        let p = identity_coder();
        let batch = Batch::from_row(&[&[f64::NAN, 0.0], &[0.0, 0.0]]).unwrap();
        assert!(matches!(
            loss(&p, &batch, &SparsityKind::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_batch_gives_zero_encoder_gradient() {
        let shape = CoderShape::crosscoder(3, 3, 5).unwrap();
        let p = CrosscoderParams::init(&shape, 3).unwrap();
        let batch = Batch::new(vec![Matrix::zeros(4, 3), Matrix::zeros(4, 3)]).unwrap();
        let g = grad(&p, &batch, &SparsityKind::default()).unwrap();
        for side in &g.sides {
            assert!(side.w_enc.as_slice().iter().all(|&x| x == 0.0));
        }
        assert!(g.b_enc.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decoder_bias_gradient_single_row() {
        let shape = CoderShape::crosscoder(3, 2, 4).unwrap();
        let mut p = CrosscoderParams::init(&shape, 11).unwrap();
        p.sides[0].b_dec = vec![0.3, -0.2, 0.1];
        p.sides[1].b_dec = vec![1.0, 2.0];
        let a = [0.5, 0.25, -1.0];
        let bb = [0.1, -0.4];
        let batch = Batch::from_row(&[&a, &bb]).unwrap();
        let fwd = forward(&p, &batch, &SparsityKind::default()).unwrap();
        let g = grad(&p, &batch, &SparsityKind::default()).unwrap();
        for (i, x) in [&a[..], &bb[..]].iter().enumerate() {
            for j in 0..x.len() {
                let expected = 2.0 * (fwd.recon[i][(0, j)] - x[j]);
                assert!((g.sides[i].b_dec[j] - expected).abs() < 1e-15);
            }
        }
    }
}
