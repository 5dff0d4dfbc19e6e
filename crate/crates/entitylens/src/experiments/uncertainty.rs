//! Uncertainty latents: t-statistic selection over correct-vs-error answer
//! activations at the assistant-start token, then AUROC/F1 of the top latent
//! as an error predictor on held-out questions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{detect_refusal, ExperimentReport, RefusalLexicon};
use crate::error::{Error, Result};
use crate::interventions::decode_generation;
use crate::metrics::{classifier_eval, t_statistics, LatentId};
use crate::model::{generate_greedy, ModelCheckpoint};
use crate::sae::SaeSuite;
use crate::store::ActivationShard;
use crate::tokenizer::Tokenizer;
use crate::world::{fuzzy, Class, EntityType, EvalPrompt, Split};

/// The paper-scale reference numbers, recorded alongside the toy result but
/// never gated on.
pub const REFERENCE_AUROC: f64 = 0.732;
pub const REFERENCE_F1: f64 = 0.72;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Error,
    Refusal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerOutcome {
    pub prompt_id: String,
    pub etype: EntityType,
    pub class: Class,
    pub split: Split,
    pub outcome: Outcome,
    pub answer: String,
}

pub struct UncertaintyInputs<'a> {
    pub chat: &'a ModelCheckpoint,
    /// SAE suite trained on chat-model activations.
    pub suite: &'a SaeSuite,
    /// All labeled questions across splits.
    pub questions: &'a [EvalPrompt],
    /// Assistant-start-token activations per layer, one row per question in
    /// the same order.
    pub assistant_shards: &'a BTreeMap<usize, ActivationShard>,
    pub lexicon: &'a RefusalLexicon,
    pub fuzzy_threshold: f64,
    pub max_new: usize,
    pub seed: u64,
}

/// Greedy-answer every question and label it correct / error / refusal.
pub fn classify_answers(
    chat: &ModelCheckpoint,
    questions: &[EvalPrompt],
    tokenizer: &Tokenizer,
    lexicon: &RefusalLexicon,
    fuzzy_threshold: f64,
    max_new: usize,
) -> Result<Vec<AnswerOutcome>> {
    use rayon::prelude::*;
    let eos = tokenizer.specials().eos;
    questions
        .par_iter()
        .map(|q| {
            let ids = tokenizer.encode(&q.record.text)?;
            let out = generate_greedy(chat, &ids, max_new, &[eos], None)?;
            let answer = decode_generation(tokenizer, &out);
            let outcome = if detect_refusal(&answer, lexicon) {
                Outcome::Refusal
            } else if fuzzy::normalized_similarity(&answer, &q.record.gold_answer)
                >= fuzzy_threshold
            {
                Outcome::Correct
            } else {
                Outcome::Error
            };
            Ok(AnswerOutcome {
                prompt_id: q.record.id.clone(),
                etype: q.etype,
                class: q.class,
                split: q.split,
                outcome,
                answer,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyTable {
    /// Min-over-etypes t per (layer, latent), NaN where undefined.
    pub min_t: BTreeMap<usize, Vec<f64>>,
    pub dropped_etypes: Vec<String>,
    pub used_etypes: Vec<String>,
}

pub fn run_uncertainty_experiment(
    inputs: &UncertaintyInputs<'_>,
    tokenizer: &Tokenizer,
    config_snapshot: serde_json::Value,
) -> Result<(ExperimentReport, Vec<AnswerOutcome>, UncertaintyTable)> {
    let mut report = ExperimentReport::new("uncertainty", inputs.seed, config_snapshot);
    let outcomes = classify_answers(
        inputs.chat,
        inputs.questions,
        tokenizer,
        inputs.lexicon,
        inputs.fuzzy_threshold,
        inputs.max_new,
    )?;

    // Per-etype train samples with refusals excluded.
    let train_idx = |etype: EntityType, outcome: Outcome| -> Vec<usize> {
        outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o.split == Split::Train && o.etype == etype && o.outcome == outcome)
            .map(|(i, _)| i)
            .collect()
    };
    let mut used = Vec::new();
    let mut dropped = Vec::new();
    let mut etype_rows: Vec<(EntityType, Vec<usize>, Vec<usize>)> = Vec::new();
    for etype in EntityType::ALL {
        let correct = train_idx(etype, Outcome::Correct);
        let error = train_idx(etype, Outcome::Error);
        if correct.is_empty() || error.is_empty() {
            dropped.push(etype.word().to_string());
        } else {
            used.push(etype.word().to_string());
            etype_rows.push((etype, correct, error));
        }
    }
    if etype_rows.is_empty() {
        return Err(Error::SingleClassLabels(
            "uncertainty: every entity type lacks a correct or error class".into(),
        ));
    }

    // Min-over-usable-etypes t-statistic per latent, every layer with an SAE.
    let mut min_t: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&layer, sae) in &inputs.suite.by_layer {
        let shard = inputs.assistant_shards.get(&layer).ok_or_else(|| {
            Error::MissingLatentSelection(format!("no assistant shard for layer {layer}"))
        })?;
        let mut per_latent_min = vec![f64::INFINITY; sae.d_sae()];
        for (_, correct_idx, error_idx) in &etype_rows {
            let stats = t_statistics(
                sae,
                shard.rows_at(correct_idx).view(),
                shard.rows_at(error_idx).view(),
            )?;
            for (j, s) in stats.iter().enumerate() {
                per_latent_min[j] = per_latent_min[j].min(s.t);
            }
        }
        min_t.insert(layer, per_latent_min);
    }

    // Rank 1 = highest min-t (ties toward lower layer, lower index).
    let mut best: Option<(f64, LatentId)> = None;
    for (&layer, ts) in &min_t {
        for (index, &t) in ts.iter().enumerate() {
            if !t.is_finite() {
                continue;
            }
            let candidate = (t, LatentId { layer, index });
            best = match best {
                None => Some(candidate),
                Some((bt, bl)) => {
                    if t > bt || (t == bt && (layer, index) < (bl.layer, bl.index)) {
                        Some(candidate)
                    } else {
                        Some((bt, bl))
                    }
                }
            };
        }
    }
    let (best_t, top) =
        best.ok_or_else(|| Error::MissingLatentSelection("no finite t-statistics".into()))?;

    // Held-out evaluation of the top latent as a correctness score:
    // threshold from validation, AUROC/F1 on test.
    let sae = inputs.suite.get(top.layer)?;
    let shard = &inputs.assistant_shards[&top.layer];
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut is_val = Vec::new();
    let mut hist_correct = Vec::new();
    let mut hist_error = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        if o.outcome == Outcome::Refusal || o.split == Split::Train {
            continue;
        }
        let act = f64::from(sae.encode(shard.row(i))[top.index]);
        scores.push(act);
        labels.push(o.outcome == Outcome::Correct);
        is_val.push(o.split == Split::Validation);
        if o.split == Split::Test {
            if o.outcome == Outcome::Correct {
                hist_correct.push(act);
            } else {
                hist_error.push(act);
            }
        }
    }
    let eval = classifier_eval(&scores, &labels, &is_val)?;

    let outcome_counts = |outcome: Outcome| {
        outcomes.iter().filter(|o| o.outcome == outcome).count()
    };
    report.insert("top_latent", serde_json::json!({"layer": top.layer, "index": top.index}));
    report.insert("top_latent.min_t", best_t);
    report.insert("auroc", eval.auroc);
    report.insert("f1", eval.f1);
    report.insert("threshold", eval.threshold);
    report.insert("n_validation", eval.n_validation);
    report.insert("n_test", eval.n_test);
    report.insert("n_correct", outcome_counts(Outcome::Correct));
    report.insert("n_error", outcome_counts(Outcome::Error));
    report.insert("n_refusal", outcome_counts(Outcome::Refusal));
    report.insert("used_etypes", &used);
    report.insert("dropped_etypes", &dropped);
    report.insert("histogram.correct", &hist_correct);
    report.insert("histogram.error", &hist_error);
    report.insert("reference.paper_auroc", REFERENCE_AUROC);
    report.insert("reference.paper_f1", REFERENCE_F1);
    let table = UncertaintyTable {
        min_t,
        dropped_etypes: dropped,
        used_etypes: used,
    };
    Ok((report, outcomes, table))
}
