//! Self-knowledge probes: Yes-No logit differences on "Are you sure you know
//! the {etype} {name}?" prompts, under entity-token steering.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::refusal::LatentArm;
use super::ExperimentReport;
use crate::error::{Error, Result};
use crate::interventions::{steer, SteerPositions};
use crate::model::{forward_hooked, logit_diff, ModelCheckpoint};
use crate::tokenizer::Tokenizer;
use crate::world::EvalPrompt;

pub struct SelfKnowledgeInputs<'a> {
    pub chat: &'a ModelCheckpoint,
    /// Test-split known-entity probes (steered with the unknown latent).
    pub known_prompts: &'a [EvalPrompt],
    /// Test-split unknown-entity probes (steered with the known latent).
    pub unknown_prompts: &'a [EvalPrompt],
    pub known_arm: LatentArm,
    pub unknown_arm: LatentArm,
    /// Single random-latent control arm per panel, matched configuration.
    pub random_for_known_panel: LatentArm,
    pub random_for_unknown_panel: LatentArm,
    pub yes_id: u32,
    pub no_id: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelRow {
    pub prompt_id: String,
    pub original: f64,
    pub steered: f64,
    pub random: f64,
}

fn yes_no_diffs(
    checkpoint: &ModelCheckpoint,
    prompts: &[EvalPrompt],
    tokenizer: &Tokenizer,
    steer_arm: &LatentArm,
    random_arm: &LatentArm,
    yes_id: u32,
    no_id: u32,
) -> Result<Vec<PanelRow>> {
    use rayon::prelude::*;
    prompts
        .par_iter()
        .map(|p| {
            let ids = tokenizer.encode(&p.record.text)?;
            let last = ids.len() - 1;
            let base = forward_hooked(checkpoint, &ids, &BTreeSet::new(), None)?;
            let steered = steer(
                checkpoint,
                &p.record,
                tokenizer,
                &steer_arm.spec(SteerPositions::EntityOnly),
                &BTreeSet::new(),
            )?;
            let random = steer(
                checkpoint,
                &p.record,
                tokenizer,
                &random_arm.spec(SteerPositions::EntityOnly),
                &BTreeSet::new(),
            )?;
            Ok(PanelRow {
                prompt_id: p.record.id.clone(),
                original: logit_diff(&base, yes_id, no_id, last)?,
                steered: logit_diff(&steered, yes_id, no_id, last)?,
                random: logit_diff(&random, yes_id, no_id, last)?,
            })
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn panel_metrics(rows: &[PanelRow], expect_increase: bool) -> serde_json::Value {
    let n = rows.len().max(1) as f64;
    let moved = rows
        .iter()
        .filter(|r| {
            if expect_increase {
                r.steered > r.original
            } else {
                r.steered < r.original
            }
        })
        .count() as f64
        / n;
    let random_moved = rows
        .iter()
        .filter(|r| {
            if expect_increase {
                r.random > r.original
            } else {
                r.random < r.original
            }
        })
        .count() as f64
        / n;
    let mut orig: Vec<f64> = rows.iter().map(|r| r.original).collect();
    let mut steered: Vec<f64> = rows.iter().map(|r| r.steered).collect();
    let mut random: Vec<f64> = rows.iter().map(|r| r.random).collect();
    serde_json::json!({
        "n": rows.len(),
        "fraction_moved": moved,
        "random_fraction_moved": random_moved,
        "median_original": median(&mut orig),
        "median_steered": median(&mut steered),
        "median_random": median(&mut random),
    })
}

pub fn run_self_knowledge_experiment(
    inputs: &SelfKnowledgeInputs<'_>,
    tokenizer: &Tokenizer,
    config_snapshot: serde_json::Value,
) -> Result<(ExperimentReport, Vec<PanelRow>, Vec<PanelRow>)> {
    if inputs.known_prompts.is_empty() || inputs.unknown_prompts.is_empty() {
        return Err(Error::SingleClassLabels("self-knowledge prompts".into()));
    }
    let mut report = ExperimentReport::new("self_knowledge", inputs.seed, config_snapshot);
    // Known entities steered toward "unknown": the Yes-No margin should drop.
    let known_rows = yes_no_diffs(
        inputs.chat,
        inputs.known_prompts,
        tokenizer,
        &inputs.unknown_arm,
        &inputs.random_for_known_panel,
        inputs.yes_id,
        inputs.no_id,
    )?;
    // Unknown entities steered toward "known": the margin should rise.
    let unknown_rows = yes_no_diffs(
        inputs.chat,
        inputs.unknown_prompts,
        tokenizer,
        &inputs.known_arm,
        &inputs.random_for_unknown_panel,
        inputs.yes_id,
        inputs.no_id,
    )?;
    report.insert("known_panel", panel_metrics(&known_rows, false));
    report.insert("unknown_panel", panel_metrics(&unknown_rows, true));
    report.insert(
        "alpha",
        serde_json::json!({"known": inputs.known_arm.alpha, "unknown": inputs.unknown_arm.alpha}),
    );
    Ok((report, known_rows, unknown_rows))
}
