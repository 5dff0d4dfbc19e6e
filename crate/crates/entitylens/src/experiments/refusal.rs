//! Knowledge-refusal steering experiment: original vs steered vs
//! orthogonalized vs random-latent controls, on known- and unknown-entity
//! questions (paired design: every condition sees the same prompt lists).

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{detect_refusal, ExperimentReport, RefusalLexicon};
use crate::error::Result;
use crate::interventions::{decode_generation, steered_generation, SteerPositions, SteeringSpec};
use crate::metrics::LatentId;
use crate::model::ModelCheckpoint;
use crate::tokenizer::Tokenizer;
use crate::world::{Class, EntityType, EvalPrompt};

/// One steering arm: a latent direction with its coefficient.
#[derive(Debug, Clone)]
pub struct LatentArm {
    pub latent: LatentId,
    pub direction: Array1<f32>,
    pub alpha: f32,
}

impl LatentArm {
    pub fn spec(&self, positions: SteerPositions) -> SteeringSpec {
        SteeringSpec {
            latent: self.latent,
            direction: self.direction.clone(),
            alpha: self.alpha,
            positions,
        }
    }
}

pub struct RefusalInputs<'a> {
    pub chat: &'a ModelCheckpoint,
    pub orthogonalized: &'a ModelCheckpoint,
    pub known_questions: &'a [EvalPrompt],
    pub unknown_questions: &'a [EvalPrompt],
    pub known_arm: LatentArm,
    pub unknown_arm: LatentArm,
    /// Random latents evaluated at the known arm's layer/alpha.
    pub random_known_config: Vec<LatentArm>,
    /// Random latents evaluated at the unknown arm's layer/alpha.
    pub random_unknown_config: Vec<LatentArm>,
    pub lexicon: &'a RefusalLexicon,
    pub max_new: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub condition: String,
    pub prompt_id: String,
    pub etype: EntityType,
    pub class: Class,
    pub text: String,
    pub refusal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionCounts {
    pub refusals: usize,
    pub n: usize,
    pub per_etype: BTreeMap<String, (usize, usize)>,
}

impl ConditionCounts {
    pub fn rate(&self) -> f64 {
        self.refusals as f64 / self.n.max(1) as f64
    }
}

fn run_condition(
    checkpoint: &ModelCheckpoint,
    prompts: &[EvalPrompt],
    tokenizer: &Tokenizer,
    spec: Option<&SteeringSpec>,
    lexicon: &RefusalLexicon,
    max_new: usize,
    condition: &str,
) -> Result<(ConditionCounts, Vec<GenerationRecord>)> {
    use rayon::prelude::*;
    let eos = tokenizer.specials().eos;
    let records: Result<Vec<GenerationRecord>> = prompts
        .par_iter()
        .map(|p| {
            let out =
                steered_generation(checkpoint, &p.record, tokenizer, spec, max_new, &[eos])?;
            let text = decode_generation(tokenizer, &out);
            let refusal = detect_refusal(&text, lexicon);
            Ok(GenerationRecord {
                condition: condition.to_string(),
                prompt_id: p.record.id.clone(),
                etype: p.etype,
                class: p.class,
                text,
                refusal,
            })
        })
        .collect();
    let records = records?;
    let mut per_etype: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut refusals = 0;
    for r in &records {
        let slot = per_etype.entry(r.etype.word().to_string()).or_insert((0, 0));
        slot.1 += 1;
        if r.refusal {
            slot.0 += 1;
            refusals += 1;
        }
    }
    Ok((
        ConditionCounts {
            refusals,
            n: records.len(),
            per_etype,
        },
        records,
    ))
}

pub fn run_refusal_experiment(
    inputs: &RefusalInputs<'_>,
    tokenizer: &Tokenizer,
    config_snapshot: serde_json::Value,
) -> Result<(ExperimentReport, Vec<GenerationRecord>)> {
    let mut report = ExperimentReport::new("refusal", inputs.seed, config_snapshot);
    let mut archive = Vec::new();
    let positions = SteerPositions::EntityAndInstructionEnd;
    let mut counts: BTreeMap<String, ConditionCounts> = BTreeMap::new();

    let run = |name: &str,
                   checkpoint: &ModelCheckpoint,
                   prompts: &[EvalPrompt],
                   spec: Option<SteeringSpec>,
                   counts: &mut BTreeMap<String, ConditionCounts>,
                   archive: &mut Vec<GenerationRecord>|
     -> Result<f64> {
        let (c, records) = run_condition(
            checkpoint,
            prompts,
            tokenizer,
            spec.as_ref(),
            inputs.lexicon,
            inputs.max_new,
            name,
        )?;
        let rate = c.rate();
        counts.insert(name.to_string(), c);
        archive.extend(records);
        Ok(rate)
    };

    // Unknown-entity questions (the Fig. 3 panel).
    let unknown_original = run(
        "unknown.original",
        inputs.chat,
        inputs.unknown_questions,
        None,
        &mut counts,
        &mut archive,
    )?;
    let unknown_steer_known = run(
        "unknown.steer_known_latent",
        inputs.chat,
        inputs.unknown_questions,
        Some(inputs.known_arm.spec(positions.clone())),
        &mut counts,
        &mut archive,
    )?;
    let unknown_ortho = run(
        "unknown.orthogonalized",
        inputs.orthogonalized,
        inputs.unknown_questions,
        None,
        &mut counts,
        &mut archive,
    )?;
    let mut unknown_random_rates = Vec::new();
    for (i, arm) in inputs.random_known_config.iter().enumerate() {
        unknown_random_rates.push(run(
            &format!("unknown.random{i:02}"),
            inputs.chat,
            inputs.unknown_questions,
            Some(arm.spec(positions.clone())),
            &mut counts,
            &mut archive,
        )?);
    }

    // Known-entity questions: steering with the unknown latent should induce
    // refusal.
    let known_original = run(
        "known.original",
        inputs.chat,
        inputs.known_questions,
        None,
        &mut counts,
        &mut archive,
    )?;
    let known_steer_unknown = run(
        "known.steer_unknown_latent",
        inputs.chat,
        inputs.known_questions,
        Some(inputs.unknown_arm.spec(positions.clone())),
        &mut counts,
        &mut archive,
    )?;
    let mut known_random_rates = Vec::new();
    for (i, arm) in inputs.random_unknown_config.iter().enumerate() {
        known_random_rates.push(run(
            &format!("known.random{i:02}"),
            inputs.chat,
            inputs.known_questions,
            Some(arm.spec(positions.clone())),
            &mut counts,
            &mut archive,
        )?);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    report.insert("counts", &counts);
    report.insert("unknown.original.rate", unknown_original);
    report.insert("unknown.steer_known.rate", unknown_steer_known);
    report.insert("unknown.orthogonalized.rate", unknown_ortho);
    report.insert("unknown.random_rates", &unknown_random_rates);
    report.insert("unknown.random_mean.rate", mean(&unknown_random_rates));
    report.insert(
        "unknown.random_mean_abs_delta_pp",
        (mean(&unknown_random_rates) - unknown_original).abs() * 100.0,
    );
    report.insert("known.original.rate", known_original);
    report.insert("known.steer_unknown.rate", known_steer_unknown);
    report.insert("known.random_rates", &known_random_rates);
    report.insert("known.random_mean.rate", mean(&known_random_rates));
    report.insert(
        "known.random_mean_abs_delta_pp",
        (mean(&known_random_rates) - known_original).abs() * 100.0,
    );
    report.insert("n_known_questions", inputs.known_questions.len());
    report.insert("n_unknown_questions", inputs.unknown_questions.len());
    report.insert(
        "alpha",
        serde_json::json!({
            "known": inputs.known_arm.alpha,
            "unknown": inputs.unknown_arm.alpha,
        }),
    );
    Ok((report, archive))
}
