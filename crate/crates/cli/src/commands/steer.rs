use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use xcdiff_core::intervene::{steer as steer_feature, ModelAdapter, Prompt, SteerStep, SteerTranscript};
use xcdiff_core::toymodel::{planted_adapter, recovery, PlantedKind};

use crate::commands::train::RECOVERY_THRESHOLD;
use crate::run::{checkpoint_params, Run};

/// Greedy decoding without any intervention.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineTranscript {
    pub prompt: Prompt,
    pub watched_tokens: Vec<u32>,
    pub generated: Vec<u32>,
    pub steps: Vec<SteerStep>,
}

#[derive(Debug, Serialize)]
pub struct AlphaEntry {
    pub alpha: f64,
    pub file: String,
    pub generated: Vec<u32>,
    /// Watched-token logits at the first generated position.
    pub first_watched_logits: Vec<f64>,
    pub matches_baseline: bool,
}

#[derive(Debug, Serialize)]
pub struct SteerReport {
    pub checkpoint_sha256: String,
    pub feature: usize,
    pub planted_match: Option<usize>,
    pub side: xcdiff_core::Side,
    pub watched_tokens: Vec<u32>,
    pub prompt: Prompt,
    pub baseline_file: String,
    pub transcripts: Vec<AlphaEntry>,
}

pub fn greedy(
    adapter: &dyn ModelAdapter,
    prompt: &Prompt,
    max_steps: usize,
    watched: &[u32],
) -> Result<BaselineTranscript> {
    let mut current = prompt.clone();
    let mut steps = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        let logits = adapter.forward(&current)?;
        let last = logits.rows() - 1;
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
            watched_logits: watched.iter().map(|&t| row[t as usize]).collect(),
        });
        current.tokens.push(token_id);
    }
    Ok(BaselineTranscript {
        prompt: prompt.clone(),
        watched_tokens: watched.to_vec(),
        generated: steps.iter().map(|s| s.token_id).collect(),
        steps,
    })
}

pub fn steer(run: &Run, feature_override: Option<usize>, alphas_override: Option<Vec<f64>>) -> Result<SteerReport> {
    let cfg = &run.config.steer;
    let alphas = alphas_override.unwrap_or_else(|| cfg.alphas.clone());
    let ckpt = run.load_checkpoint()?;
    let (norm, raw) = checkpoint_params(&ckpt)?;
    let world = run.require_world()?;
    let rec = recovery(&world, &norm, RECOVERY_THRESHOLD)?;
    let (feature, planted_match) = match feature_override.or(cfg.feature) {
        Some(k) => (
            k,
            rec.matches
                .iter()
                .find(|m| m.recovered && m.learned == Some(k))
                .map(|m| m.planted),
        ),
        None => {
            let m = rec
                .recovered(PlantedKind::UniqueDistilled)
                .into_iter()
                .next()
                .context("no unique-distilled planted feature was recovered; pass --feature")?;
            (
                m.learned.expect("recovered matches name a learned feature"),
                Some(m.planted),
            )
        }
    };
    let watched = match &cfg.watched_tokens {
        Some(w) => w.clone(),
        None => planted_match.and_then(|g| world.marker_of(g)).into_iter().collect(),
    };
    let eval = run.eval_corpus(world.clone());
    if cfg.prompt_doc >= eval.n_docs() {
        bail!(
            "prompt document {} but the held-out stream has {} documents",
            cfg.prompt_doc,
            eval.n_docs()
        );
    }
    let doc = eval.document(cfg.prompt_doc);
    let prompt = Prompt {
        tokens: doc.tokens[..cfg.prompt_len.clamp(1, doc.tokens.len())].to_vec(),
        origin: doc.origin,
    };
    let adapter = planted_adapter(eval, cfg.side);

    let baseline = greedy(&adapter, &prompt, cfg.max_steps, &watched)?;
    let baseline_file = "steer_baseline.json";
    run.write_report("steer", baseline_file, &baseline)?;
    let mut csv = String::from("alpha,step,position,token_id");
    for t in &watched {
        write!(csv, ",logit_{t}").unwrap();
    }
    csv.push('\n');
    let mut transcripts = Vec::with_capacity(alphas.len());
    for &alpha in &alphas {
        let t: SteerTranscript = steer_feature(&adapter, &raw, &prompt, feature, alpha, cfg.max_steps, &watched)?;
        let file = format!("steer_alpha_{alpha}.json");
        run.write_report("steer", &file, &t)?;
        for (i, s) in t.steps.iter().enumerate() {
            write!(csv, "{alpha},{i},{},{}", s.position, s.token_id).unwrap();
            for v in &s.watched_logits {
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
        }
        transcripts.push(AlphaEntry {
            alpha,
            file,
            first_watched_logits: t.steps.first().map(|s| s.watched_logits.clone()).unwrap_or_default(),
            matches_baseline: t.generated == baseline.generated && t.steps == baseline.steps,
            generated: t.generated,
        });
    }
    run.write_text("steer_logits.csv", &csv)?;
    let report = SteerReport {
        checkpoint_sha256: ckpt.digest()?,
        feature,
        planted_match,
        side: cfg.side,
        watched_tokens: watched,
        prompt,
        baseline_file: baseline_file.into(),
        transcripts,
    };
    run.write_report("steer", "steer_report.json", &report)?;
    Ok(report)
}
