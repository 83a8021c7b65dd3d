//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria 3 to 6 run on the artifacts of a deterministic `repro-desk` run
//! of the shipped binary with the default configuration; every measured
//! quantity is recomputed here from the raw artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use xcdiff_cli::config::RunConfig;
use xcdiff_cli::run::checkpoint_params;
use xcdiff_core::actstore::{open_shard, write_shard, TokenMeta};
use xcdiff_core::coder::{loss, loss_and_grad, Batch, CoderShape};
use xcdiff_core::geometry::{geometry_report, parallelogram_loss, synthetic_parallelograms, GeometryOptions, PcaMode};
use xcdiff_core::intervene::{
    logit_change, steer, steered_residuals, LogitChangeOptions, ModelAdapter, ReasoningCategory,
};
use xcdiff_core::toymodel::{planted_adapter, PlantedCorpus, PlantedKind, PlantedWorld};
use xcdiff_core::trainer::Checkpoint;
use xcdiff_core::{CrosscoderParams, Error, Matrix, Side, SparsityKind};

const BIN: &str = env!("CARGO_BIN_EXE_xcdiff");

const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-4;
const FD_TIME_LIMIT: Duration = Duration::from_secs(5);
const LOSS_TOL: f64 = 1e-10;
const RECOVERY_MMCS: f64 = 0.9;
const RECOVERY_FRACTION: f64 = 0.85;
const TRAIN_TIME_LIMIT: Duration = Duration::from_secs(15 * 60);
const MAX_TRAIN_STEPS: u64 = 20_000;
const BAND_FRACTION: f64 = 0.8;
const ABLATION_GRID: [f64; 6] = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0];
const ABLATION_DROP: f64 = 0.5;
const BASE_TO_DISTILLED: f64 = 0.2;
const STEER_ALPHAS: [f64; 4] = [0.0, 1.0, 2.0, 4.0];
const LINEARITY_TOL: f64 = 1e-9;
const EXACT_GEOMETRY_TOL: f64 = 1e-10;
const GEOMETRY_DIMS: [usize; 4] = [2, 5, 10, 20];
const NOISE_GRID: [f64; 4] = [0.0, 0.05, 0.1, 0.2];
const NOISE_TRIALS: u64 = 100;
const HAND_TOL: f64 = 1e-12;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// Oracle arithmetic, written against the definitions only.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn l1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let n = l2(a) * l2(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

fn oracle_pre(params: &CrosscoderParams, inputs: &[&[f64]]) -> Vec<f64> {
    (0..params.n_features())
        .map(|k| {
            params.b_enc[k]
                + params
                    .sides
                    .iter()
                    .zip(inputs)
                    .map(|(s, a)| dot(s.w_enc.row(k), a))
                    .sum::<f64>()
        })
        .collect()
}

fn oracle_codes(params: &CrosscoderParams, inputs: &[&[f64]]) -> Vec<f64> {
    oracle_pre(params, inputs).into_iter().map(|x| x.max(0.0)).collect()
}

/// Batch mean of `Σ_i ‖a'^(i) − a^(i)‖² + λ Σ_k f_k Σ_i ‖W_dec,k^(i)‖₂`.
fn oracle_loss(params: &CrosscoderParams, rows: &[Vec<Vec<f64>>], lambda: f64) -> f64 {
    let mut total = 0.0;
    for row in rows {
        let inputs: Vec<&[f64]> = row.iter().map(Vec::as_slice).collect();
        let f = oracle_codes(params, &inputs);
        for (side, a) in params.sides.iter().zip(row) {
            for (j, &aj) in a.iter().enumerate() {
                let recon = side.b_dec[j] + (0..f.len()).map(|k| f[k] * side.w_dec.row(k)[j]).sum::<f64>();
                total += (recon - aj).powi(2);
            }
        }
        for (k, &fk) in f.iter().enumerate() {
            total += lambda * fk * params.sides.iter().map(|s| l2(s.w_dec.row(k))).sum::<f64>();
        }
    }
    total / rows.len() as f64
}

/// Parameters, rows as `[side][dim]`, and the same rows as a batch.
type Instance = (CrosscoderParams, Vec<Vec<Vec<f64>>>, Batch);

fn random_instance(rng: &mut ChaCha8Rng, dims: &[usize], n_features: usize, batch: usize) -> Result<Instance> {
    let shape = CoderShape::new(dims.len(), dims.to_vec(), n_features)?;
    let mut params = CrosscoderParams::zeros(&shape)?;
    for block in params.blocks_mut() {
        for x in block.iter_mut() {
            *x = 0.5 * normal(rng);
        }
    }
    let rows: Vec<Vec<Vec<f64>>> = (0..batch)
        .map(|_| dims.iter().map(|&d| (0..d).map(|_| normal(rng)).collect()).collect())
        .collect();
    let sides = dims
        .iter()
        .enumerate()
        .map(|(i, &d)| Matrix::from_vec(batch, d, rows.iter().flat_map(|r| r[i].clone()).collect()))
        .collect::<xcdiff_core::Result<Vec<_>>>()?;
    Ok((params, rows, Batch::new(sides)?))
}

fn criterion_gradient() -> Result<Verdict> {
    let start = Instant::now();
    let lambda = 0.7;
    let sparsity = SparsityKind::WeightedL1 { coefficient: lambda };
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut cases = 0;
    for dims in [vec![6, 6], vec![6]] {
        // Central differences need every pre-activation clear of the ReLU kink.
        let (params, rows, batch) = loop {
            let inst = random_instance(&mut rng, &dims, 10, 4)?;
            let clear = inst.1.iter().all(|row| {
                let inputs: Vec<&[f64]> = row.iter().map(Vec::as_slice).collect();
                oracle_pre(&inst.0, &inputs).iter().all(|p| p.abs() > 1e-2)
            });
            if clear {
                break inst;
            }
        };
        cases += 1;
        let (_, grads) = loss_and_grad(&params, &batch, &sparsity)?;
        let analytic: Vec<f64> = grads.blocks().iter().flat_map(|b| b.iter().copied()).collect();
        let mut probe = params.clone();
        let mut idx = 0;
        for b in 0..probe.blocks().len() {
            let len = probe.blocks()[b].len();
            for j in 0..len {
                let orig = probe.blocks()[b][j];
                probe.blocks_mut()[b][j] = orig + FD_STEP;
                let up = loss(&probe, &batch, &sparsity)?.total;
                probe.blocks_mut()[b][j] = orig - FD_STEP;
                let down = loss(&probe, &batch, &sparsity)?.total;
                probe.blocks_mut()[b][j] = orig;
                let fd = (up - down) / (2.0 * FD_STEP);
                let a = analytic[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                idx += 1;
                checked += 1;
            }
        }
        ensure!(
            idx == analytic.len(),
            "gradient has {} entries, parameters {}",
            analytic.len(),
            idx
        );
        let _ = rows;
    }
    let elapsed = start.elapsed();
    verdict(
        worst < FD_REL_TOL && elapsed < FD_TIME_LIMIT,
        format!(
            "{cases} instances, {checked} parameters, max relative error {worst:.2e} (< {FD_REL_TOL:e}), {:.2}s (< 5s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_loss_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut single = 0;
    for _ in 0..100 {
        let n_sides = if rng.random_bool(0.3) { 1 } else { 2 };
        single += usize::from(n_sides == 1);
        let dims: Vec<usize> = (0..n_sides).map(|_| rng.random_range(1..=8)).collect();
        let f = rng.random_range(1..=12);
        let b = rng.random_range(1..=6);
        let lambda = rng.random_range(0.0..3.0);
        let (params, rows, batch) = random_instance(&mut rng, &dims, f, b)?;
        let sparsity = SparsityKind::WeightedL1 { coefficient: lambda };
        let want = oracle_loss(&params, &rows, lambda);
        let (record, _) = loss_and_grad(&params, &batch, &sparsity)?;
        let plain = loss(&params, &batch, &sparsity)?;
        worst = worst.max((record.total - want).abs()).max((plain.total - want).abs());
    }
    verdict(
        worst <= LOSS_TOL,
        format!("100 instances ({single} single-side), max |Δ| {worst:.2e} (≤ 1e-10)"),
    )
}

/// Artifacts of one deterministic `repro-desk` run.
struct Pipeline {
    out: PathBuf,
    config: RunConfig,
    world: Arc<PlantedWorld>,
    ckpt: Checkpoint,
    norm: CrosscoderParams,
    raw: CrosscoderParams,
    wall: Duration,
}

impl Pipeline {
    fn report(&self, name: &str) -> Result<Value> {
        let text = std::fs::read_to_string(self.out.join(name)).with_context(|| format!("reading {name}"))?;
        Ok(serde_json::from_str::<Value>(&text)?["report"].clone())
    }
}

fn repro_desk(out: &Path) -> Result<Duration> {
    let start = Instant::now();
    let status = Command::new(BIN)
        .args(["--deterministic", "--no-timestamp", "--out"])
        .arg(out)
        .arg("repro-desk")
        .stdout(Stdio::null())
        .status()?;
    ensure!(status.success(), "repro-desk exited with {status}");
    Ok(start.elapsed())
}

fn load_pipeline(out: &Path, wall: Duration) -> Result<Pipeline> {
    let config = RunConfig::default().resolve(None);
    let world = Arc::new(PlantedWorld::load_json(out.join("shards").join("world.json"))?);
    let ckpt = Checkpoint::load(out.join("checkpoint.bin"))?;
    let (norm, raw) = checkpoint_params(&ckpt)?;
    Ok(Pipeline {
        out: out.to_path_buf(),
        config,
        world,
        ckpt,
        norm,
        raw,
        wall,
    })
}

/// Best learned feature per planted feature: the cosine is the minimum over
/// the sides on which the planted feature lives.
fn oracle_matches(world: &PlantedWorld, params: &CrosscoderParams) -> Vec<(usize, PlantedKind, usize, f64)> {
    let sides = [Side::Base, Side::Distilled];
    (0..world.n_planted())
        .map(|g| {
            let (best, score) = (0..params.n_features())
                .map(|k| {
                    let s = sides
                        .iter()
                        .filter_map(|&side| {
                            world
                                .row(g, side)
                                .map(|row| cos(row, params.sides[side.index()].w_dec.row(k)))
                        })
                        .fold(f64::INFINITY, f64::min);
                    (k, s)
                })
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            (g, world.kind(g), best, score)
        })
        .collect()
}

fn oracle_nrn(params: &CrosscoderParams, k: usize) -> f64 {
    let a = l1(params.sides[0].w_dec.row(k));
    let b = l1(params.sides[1].w_dec.row(k));
    if a == 0.0 && b == 0.0 {
        0.5
    } else {
        b / (a + b)
    }
}

fn criterion_recovery(p: &Pipeline) -> Result<Verdict> {
    let matches = oracle_matches(&p.world, &p.raw);
    let recovered = matches.iter().filter(|m| m.3 >= RECOVERY_MMCS).count();
    let fraction = recovered as f64 / matches.len() as f64;
    let steps = p.ckpt.header.step;
    let f = p.raw.n_features();
    let tokens = p.report("synth_report.json")?["n_tokens"].as_u64().unwrap_or(0);
    let cli = p.report("train_report.json")?["recovery"]["recovered_fraction"].as_f64();
    verdict(
        fraction >= RECOVERY_FRACTION
            && p.wall < TRAIN_TIME_LIMIT
            && steps <= MAX_TRAIN_STEPS
            && f == 96
            && tokens == 300_000
            && cli == Some(fraction),
        format!(
            "{recovered}/{} recovered at cos ≥ 0.9 ({:.1}%, ≥ 85%), F={f}, {tokens} tokens, {steps} steps, \
             whole pipeline {:.0}s (< 900s)",
            matches.len(),
            100.0 * fraction,
            p.wall.as_secs_f64()
        ),
    )
}

/// Local maxima of a 20-bin histogram, one inside each band, with a strictly
/// lower bin between consecutive peaks.
fn oracle_trimodal(nrns: &[f64]) -> (bool, Vec<usize>) {
    const BINS: usize = 20;
    let mut counts = [0usize; BINS];
    for &x in nrns {
        counts[((x * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let bands = [0..6, 7..13, 14..20];
    let mut peaks = Vec::new();
    for band in bands {
        let peak = band.clone().max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
        let left = if peak == 0 { 0 } else { counts[peak - 1] };
        let right = if peak + 1 == BINS { 0 } else { counts[peak + 1] };
        if counts[peak] == 0 || counts[peak] < left || counts[peak] < right {
            return (false, counts.to_vec());
        }
        peaks.push(peak);
    }
    let separated = peaks
        .windows(2)
        .all(|w| (w[0] + 1..w[1]).any(|i| counts[i] < counts[w[0]] && counts[i] < counts[w[1]]));
    (separated, counts.to_vec())
}

fn criterion_nrn(p: &Pipeline) -> Result<Verdict> {
    let matches = oracle_matches(&p.world, &p.raw);
    let mut detail = Vec::new();
    let mut pass = true;
    for (kind, name, band) in [
        (
            PlantedKind::UniqueDistilled,
            "unique-distilled nrn>0.7",
            (0.7, f64::INFINITY, false),
        ),
        (
            PlantedKind::UniqueBase,
            "unique-base nrn<0.3",
            (f64::NEG_INFINITY, 0.3, false),
        ),
        (PlantedKind::Shared, "shared nrn∈[0.35,0.65]", (0.35, 0.65, true)),
    ] {
        let rec: Vec<f64> = matches
            .iter()
            .filter(|m| m.1 == kind && m.3 >= RECOVERY_MMCS)
            .map(|m| oracle_nrn(&p.norm, m.2))
            .collect();
        let inside = rec
            .iter()
            .filter(|&&x| {
                if band.2 {
                    x >= band.0 && x <= band.1
                } else {
                    x > band.0 && x < band.1
                }
            })
            .count();
        let frac = inside as f64 / rec.len().max(1) as f64;
        pass &= !rec.is_empty() && frac >= BAND_FRACTION;
        detail.push(format!("{name}: {inside}/{}", rec.len()));
    }
    let all: Vec<f64> = (0..p.norm.n_features()).map(|k| oracle_nrn(&p.norm, k)).collect();
    let (trimodal, counts) = oracle_trimodal(&all);
    let cli_trimodal = p.report("diff_report.json")?["diff"]["modality"]["trimodal"].as_bool();
    pass &= trimodal && cli_trimodal == Some(true);
    verdict(
        pass,
        format!("{}; trimodal {trimodal}, histogram {counts:?}", detail.join(", ")),
    )
}

fn budget(top_percent: f64, n_active: usize) -> usize {
    let micro = (top_percent * 1e6).round() as u128;
    ((micro * n_active as u128).div_ceil(100_000_000)) as usize
}

/// Selection rule recomputed from the diff report's per-feature table.
fn oracle_selection(diff: &Value, category: &str, top_percent: f64) -> Result<Vec<usize>> {
    let mut active: Vec<(usize, f64, f64)> = diff["diff"]["features"]
        .as_array()
        .ok_or_else(|| anyhow!("diff report has no features"))?
        .iter()
        .map(|f| {
            (
                f["feature"].as_u64().unwrap_or(0) as usize,
                f["nrn"].as_f64().unwrap_or(0.0),
                f["frequency"][category].as_f64().unwrap_or(0.0),
            )
        })
        .filter(|f| f.2 > 0.0)
        .collect();
    let n = budget(top_percent, active.len());
    active.retain(|f| f.1 > 0.5);
    active.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    Ok(active.into_iter().take(n).map(|f| f.0).collect())
}

fn criterion_ablation(p: &Pipeline) -> Result<Verdict> {
    let report = p.report("ablate_report.json")?;
    let diff = p.report("diff_report.json")?;
    let sparsity = p.ckpt.header.config.sparsity;
    let eval = Arc::new(PlantedCorpus::sample(
        p.world.clone(),
        p.config.ablate.eval_tokens,
        p.config.eval_seed(),
    ));
    let prompts = eval.documents();
    let distilled = planted_adapter(eval.clone(), Side::Distilled);
    let base = planted_adapter(eval.clone(), Side::Base);
    let options = LogitChangeOptions {
        n_targets: p.config.ablate.n_targets,
        seed: p.config.seed,
        scope: p.config.ablate.scope,
    };
    let rows = report["rows"]
        .as_array()
        .ok_or_else(|| anyhow!("ablate report has no rows"))?;
    let markers: Vec<(usize, u32)> = p
        .world
        .ids_of(PlantedKind::UniqueDistilled)
        .into_iter()
        .map(|g| (g, p.world.marker_of(g).unwrap()))
        .collect();

    let mut pass = true;
    let mut lines = Vec::new();
    let mut worst_oracle_gap: f64 = 0.0;
    let mut worst_category: (f64, String) = (f64::NEG_INFINITY, String::new());
    for &k in &ABLATION_GRID {
        let (mut sum_d, mut sum_b, mut sum_c, mut n) = (0.0, 0.0, 0.0, 0usize);
        for &(g, marker) in &markers {
            let text = p.world.token_text(marker).unwrap();
            let name = text.trim_matches(['<', '>']).to_string();
            let row = rows
                .iter()
                .find(|r| r["category"] == name.as_str() && r["top_percent"].as_f64() == Some(k))
                .ok_or_else(|| anyhow!("no ablation row for {name} at {k}%"))?;
            let features: Vec<usize> = serde_json::from_value(row["features"].clone())?;
            let expected = oracle_selection(&diff, &name, k)?;
            ensure!(
                features == expected,
                "{name} at {k}%: selected {features:?}, rule gives {expected:?}"
            );
            let cat = ReasoningCategory {
                name: name.clone(),
                target_tokens: vec![text],
            };
            let d = logit_change(&distilled, &p.raw, &sparsity, &prompts, &cat, &features, &options)?;
            let b = logit_change(&base, &p.raw, &sparsity, &prompts, &cat, &features, &options)?;
            ensure!(
                d.occurrences
                    .iter()
                    .map(|o| (o.prompt, o.position))
                    .eq(b.occurrences.iter().map(|o| (o.prompt, o.position))),
                "{name}: sides measured different occurrences"
            );
            let (mut cd, mut cc) = (0.0, 0.0);
            for (od, ob) in d.occurrences.iter().zip(&b.occurrences) {
                let origin = prompts[od.prompt].origin.unwrap() as usize;
                let t = origin + od.position - 1;
                let acts = eval.activations(t);
                let f = oracle_codes(&p.raw, &[&acts[0], &acts[1]]);
                let delta = |side: Side| -> f64 {
                    let u = p.world.unembed[side.index()].row(od.token_id as usize);
                    -features
                        .iter()
                        .map(|&j| f[j] * dot(u, p.raw.sides[side.index()].w_dec.row(j)))
                        .sum::<f64>()
                };
                let (dd, db) = (delta(Side::Distilled), delta(Side::Base));
                worst_oracle_gap = worst_oracle_gap.max((dd - od.delta).abs()).max((db - ob.delta).abs());
                let contribution = eval.samples[t].active.iter().find(|a| a.0 == g).map_or(0.0, |a| a.1);
                sum_d += dd;
                sum_b += db.abs();
                sum_c += contribution;
                cd += dd;
                cc += contribution;
                n += 1;
            }
            let ratio = cd / cc;
            if ratio > worst_category.0 {
                worst_category = (ratio, format!("{name} at {k}%"));
            }
        }
        let (md, mb, mc) = (sum_d / n as f64, sum_b / n as f64, sum_c / n as f64);
        let ok = md <= -ABLATION_DROP * mc && mb < BASE_TO_DISTILLED * md.abs();
        pass &= ok;
        lines.push(format!(
            "k={k}%: Δ/contribution {:.3}, base/distilled {:.3}",
            md / mc,
            mb / md.abs()
        ));
    }
    pass &= worst_oracle_gap <= 1e-9;
    verdict(
        pass,
        format!(
            "12 markers pooled; {}; per-occurrence oracle gap {worst_oracle_gap:.1e}; \
             worst single marker {:.3} ({}, reported only)",
            lines.join("; "),
            worst_category.0,
            worst_category.1
        ),
    )
}

fn criterion_steering(p: &Pipeline) -> Result<Verdict> {
    let matches = oracle_matches(&p.world, &p.raw);
    let (g, _, feature, score) = *matches
        .iter()
        .find(|m| m.1 == PlantedKind::UniqueDistilled && m.3 >= RECOVERY_MMCS)
        .ok_or_else(|| anyhow!("no recovered unique-distilled feature to steer"))?;
    let marker = p.world.marker_of(g).unwrap();
    let eval = Arc::new(PlantedCorpus::sample(
        p.world.clone(),
        p.config.ablate.eval_tokens,
        p.config.eval_seed(),
    ));
    let adapter = planted_adapter(eval.clone(), Side::Distilled);
    let mut prompt = eval.document(0);
    prompt.tokens.truncate(16);
    let max_steps = 8;
    let u = &p.world.unembed[Side::Distilled.index()];
    let w = p.raw.sides[Side::Distilled.index()].w_dec.row(feature);
    let origin = prompt.origin.unwrap() as usize;

    // Unsteered greedy decoding, from the stream and the unembedding alone.
    let mut greedy = Vec::new();
    let mut clean_marker = Vec::new();
    for s in 0..max_steps {
        let x = eval.activations(origin + prompt.tokens.len() - 1 + s)[1].clone();
        let logits: Vec<f64> = (0..u.rows()).map(|v| dot(u.row(v), &x)).collect();
        let best = (0..logits.len()).fold(0, |b, v| if logits[v] > logits[b] { v } else { b });
        greedy.push(best as u32);
        clean_marker.push(logits[marker as usize]);
    }

    let mut bit_exact = true;
    let mut first_logits = Vec::new();
    let mut logit_gap: f64 = 0.0;
    let slope = dot(u.row(marker as usize), w);
    for &alpha in &STEER_ALPHAS {
        let t = steer(&adapter, &p.raw, &prompt, feature, alpha, max_steps, &[marker])?;
        if alpha == 0.0 {
            bit_exact &= t.generated == greedy;
            let mut current = prompt.clone();
            for step in &t.steps {
                let x = adapter.residuals(&current)?;
                let logits = adapter.logits_from(&x)?;
                let row = logits.row(x.rows() - 1);
                bit_exact &= step.watched_logits[0].to_bits() == row[marker as usize].to_bits();
                current.tokens.push(step.token_id);
            }
        }
        let l = t.steps[0].watched_logits[0];
        logit_gap = logit_gap.max((l - (clean_marker[0] + alpha * slope)).abs());
        first_logits.push(l);
    }
    let increasing = first_logits.windows(2).all(|w| w[1] > w[0]);

    let clean = adapter.residuals(&prompt)?;
    let mut linear_gap: f64 = 0.0;
    for &(a1, a2) in &[(1.0, 2.0), (0.5, -3.0), (4.0, 4.0)] {
        let s1 = steered_residuals(&adapter, &p.raw, &prompt, feature, a1)?;
        let s2 = steered_residuals(&adapter, &p.raw, &prompt, feature, a2)?;
        let s12 = steered_residuals(&adapter, &p.raw, &prompt, feature, a1 + a2)?;
        for r in 0..clean.rows() {
            for (j, &wj) in w.iter().enumerate() {
                let c = clean.row(r)[j];
                linear_gap = linear_gap
                    .max((s1.row(r)[j] - c - a1 * wj).abs())
                    .max((s12.row(r)[j] - s1.row(r)[j] - s2.row(r)[j] + c).abs());
            }
        }
    }
    verdict(
        bit_exact && increasing && linear_gap <= LINEARITY_TOL && logit_gap <= LINEARITY_TOL,
        format!(
            "feature {feature} (cos {score:.4} to planted {g}), α=0 bit-exact {bit_exact}, marker logits {:.4?}, \
             linearity gap {linear_gap:.1e}",
            first_logits
        ),
    )
}

fn criterion_geometry() -> Result<Verdict> {
    let mut pass = true;
    let mut exact_worst: f64 = 0.0;
    let mut curves_ok = true;
    for mode in [PcaMode::PerClass, PcaMode::Global] {
        let (dataset, table) = synthetic_parallelograms(4, 12, 32, 0.0, 7);
        let options = GeometryOptions {
            dims: GEOMETRY_DIMS.to_vec(),
            pca_mode: mode,
            ..GeometryOptions::default()
        };
        let r = geometry_report(&dataset, &table, &options)?;
        for dim in &r.results {
            ensure!(
                dim.skipped.is_empty(),
                "class skipped at dim {}: {:?}",
                dim.dim,
                dim.skipped
            );
            ensure!(dim.classes.len() == 4);
            for c in &dim.classes {
                exact_worst = c.losses.iter().copied().fold(exact_worst, f64::max);
                curves_ok &= curve_ok(&c.curve);
            }
        }
    }
    pass &= exact_worst < EXACT_GEOMETRY_TOL;

    let mut means = Vec::new();
    for &sigma in &NOISE_GRID {
        let mut per_dim = vec![0.0; GEOMETRY_DIMS.len()];
        for trial in 0..NOISE_TRIALS {
            let (dataset, table) = synthetic_parallelograms(3, 12, 24, sigma, 1000 + trial);
            let options = GeometryOptions {
                dims: GEOMETRY_DIMS.to_vec(),
                ..GeometryOptions::default()
            };
            let r = geometry_report(&dataset, &table, &options)?;
            for (slot, dim) in per_dim.iter_mut().zip(&r.results) {
                let losses: Vec<f64> = dim.classes.iter().flat_map(|c| c.losses.iter().copied()).collect();
                *slot += losses.iter().sum::<f64>() / losses.len() as f64 / NOISE_TRIALS as f64;
                curves_ok &= dim.classes.iter().all(|c| curve_ok(&c.curve));
            }
        }
        means.push(per_dim);
    }
    let nondecreasing = (0..GEOMETRY_DIMS.len()).all(|d| means.windows(2).all(|w| w[1][d] >= w[0][d]));
    pass &= nondecreasing && curves_ok;

    let hand = parallelogram_loss(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0])?;
    let hand_gap = (hand - std::f64::consts::SQRT_2).abs();
    pass &= hand_gap <= HAND_TOL;
    let at20: Vec<String> = means.iter().map(|m| format!("{:.4}", m[3])).collect();
    verdict(
        pass,
        format!(
            "exact max loss {exact_worst:.1e}; mean loss at dim 20 over σ grid [{}] nondecreasing at all dims {nondecreasing}; \
             curves monotone to 1 {curves_ok}; √2 gap {hand_gap:.1e}",
            at20.join(", ")
        ),
    )
}

fn curve_ok(curve: &[(f64, f64)]) -> bool {
    !curve.is_empty()
        && curve.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1)
        && curve.last().is_some_and(|l| l.1 == 1.0)
}

fn shard_checks(dir: &Path) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let dims = [5usize, 3];
    let rows: Vec<Vec<Vec<f32>>> = (0..257)
        .map(|_| {
            dims.iter()
                .map(|&d| {
                    (0..d)
                        .map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF))
                        .collect()
                })
                .collect()
        })
        .collect();
    let meta: Vec<TokenMeta> = (0..rows.len())
        .map(|i| TokenMeta {
            doc_id: (i / 64) as u64,
            position: (i % 64) as u64,
            token_id: i as u32,
            token_text: format!("w{i} \"q\"\n"),
        })
        .collect();
    let path = dir.join("roundtrip.bin");
    write_shard(&path, &dims, rows.clone(), meta.clone())?;
    let (mut reader, header) = open_shard(&path)?;
    ensure!(header.n_rows == rows.len() as u64);
    let mut back = Vec::new();
    while let Some(r) = reader.next_row()? {
        back.push(r);
    }
    let bits = |r: &Vec<Vec<Vec<f32>>>| -> Vec<u32> { r.iter().flatten().flatten().map(|x| x.to_bits()).collect() };
    ensure!(bits(&back) == bits(&rows), "rows differ after roundtrip");
    ensure!(
        xcdiff_core::actstore::read_meta(&path)? == meta,
        "metadata differs after roundtrip"
    );

    let bytes = std::fs::read(&path)?;
    let bad_magic = dir.join("bad_magic.bin");
    let mut b = bytes.clone();
    b[0] ^= 0xFF;
    std::fs::write(&bad_magic, b)?;
    let truncated = dir.join("truncated.bin");
    std::fs::write(&truncated, &bytes[..bytes.len() - 6])?;
    let read_all = |p: &Path| -> xcdiff_core::Result<()> {
        let (mut r, _) = open_shard(p)?;
        while r.next_row()?.is_some() {}
        Ok(())
    };
    let magic_err = read_all(&bad_magic);
    let trunc_err = read_all(&truncated);
    ensure!(
        matches!(magic_err, Err(Error::BadMagic { .. })),
        "corrupted magic gave {magic_err:?}"
    );
    ensure!(
        matches!(trunc_err, Err(Error::TruncatedPayload { .. })),
        "truncated payload gave {trunc_err:?}"
    );
    Ok(format!(
        "{} rows bit-exact, BadMagic and TruncatedPayload distinct",
        rows.len()
    ))
}

fn report_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_file() {
            out.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p)?,
            );
        }
    }
    Ok(out)
}

fn criterion_format(a: &Path, b: &Path, scratch: &Path) -> Result<Verdict> {
    let shard = shard_checks(scratch)?;
    let fa = report_files(a)?;
    let fb = report_files(b)?;
    let mut differing: Vec<&String> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();
    differing.extend(fb.keys().filter(|k| !fa.contains_key(*k)));
    let sa = report_files(&a.join("shards"))?;
    let sb = report_files(&b.join("shards"))?;
    let shards_equal = sa == sb;
    let json_reports = fa.keys().filter(|k| k.ends_with(".json")).count();
    if json_reports < 7 {
        bail!("only {json_reports} JSON reports written");
    }
    verdict(
        differing.is_empty() && shards_equal,
        format!(
            "{shard}; two repro-desk runs: {} files ({json_reports} JSON reports), differing {differing:?}, shards identical {shards_equal}",
            fa.len()
        ),
    )
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let run_a = scratch.path().join("run-a");
    let run_b = scratch.path().join("run-b");

    let mut results: Vec<(u32, &str, Result<Verdict>)> = Vec::new();
    results.push((1, "gradient fidelity", criterion_gradient()));
    results.push((2, "loss oracle equivalence", criterion_loss_oracle()));

    let pipeline = repro_desk(&run_a).and_then(|wall| load_pipeline(&run_a, wall));
    let second = repro_desk(&run_b);
    match &pipeline {
        Ok(p) => {
            results.push((3, "dictionary recovery", criterion_recovery(p)));
            results.push((4, "NRN separation", criterion_nrn(p)));
            results.push((5, "ablation causality", criterion_ablation(p)));
            results.push((6, "steering monotonicity", criterion_steering(p)));
        }
        Err(e) => {
            for (id, name) in [
                (3, "dictionary recovery"),
                (4, "NRN separation"),
                (5, "ablation causality"),
                (6, "steering monotonicity"),
            ] {
                results.push((id, name, Err(anyhow!("pipeline failed: {e:#}"))));
            }
        }
    }
    results.push((7, "geometry sanity", criterion_geometry()));
    let format = match (&pipeline, &second) {
        (Ok(_), Ok(_)) => criterion_format(&run_a, &run_b, scratch.path()),
        (_, Err(e)) | (Err(e), _) => Err(anyhow!("repro-desk failed: {e:#}")),
    };
    results.push((8, "format and determinism", format));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, r) in &results {
        let (pass, detail) = match r {
            Ok(v) => (v.pass, v.detail.clone()),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!pass);
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
