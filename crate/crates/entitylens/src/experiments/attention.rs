//! Activation-patching grids (residual stream and head outputs), the
//! attribute-extraction-head identification they yield, and the
//! attention-to-entity experiment with steering and random-vector controls.

use std::collections::BTreeSet;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::refusal::LatentArm;
use super::ExperimentReport;
use crate::error::{Error, Result};
use crate::interventions::{
    activation_patch, attention_to_entity, HeadAttentionStats, PatchSpec, SteerPositions,
    SteeringSpec,
};
use crate::model::{forward_hooked, HookPoint, ModelCheckpoint};
use crate::rng;
use crate::tokenizer::Tokenizer;
use crate::world::PromptRecord;

/// Mean recovered-logit-difference grids over prompt pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchGrids {
    pub n_layers: usize,
    pub n_positions: usize,
    /// [layer][position] mean recovered at resid_post hooks.
    pub resid: Vec<Vec<f64>>,
    /// [layer][head] mean recovered at head outputs, final position.
    pub heads: Vec<Vec<f64>>,
    pub n_pairs: usize,
    /// (layer, head, mean recovered), descending.
    pub top_heads: Vec<(usize, usize, f64)>,
}

/// Denoising patch sweep: clean = known-entity prompt, corrupted =
/// token-aligned unknown-entity prompt; the metric contrasts the clean run's
/// prediction against the corrupted run's.
pub fn run_patching(
    checkpoint: &ModelCheckpoint,
    pairs: &[(PromptRecord, PromptRecord)],
    tokenizer: &Tokenizer,
    top_k: usize,
) -> Result<PatchGrids> {
    let cfg = &checkpoint.config;
    let n_positions = pairs
        .iter()
        .map(|(c, _)| tokenizer.encode(&c.text).map(|v| v.len()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .unwrap_or(0);
    let mut capture: BTreeSet<HookPoint> = BTreeSet::new();
    for l in 0..cfg.n_layers {
        capture.insert(HookPoint::ResidPost { layer: l });
        for h in 0..cfg.n_heads {
            capture.insert(HookPoint::HeadOut { layer: l, head: h });
        }
    }

    let mut resid_sum = vec![vec![0.0f64; n_positions]; cfg.n_layers];
    let mut resid_n = vec![vec![0usize; n_positions]; cfg.n_layers];
    let mut head_sum = vec![vec![0.0f64; cfg.n_heads]; cfg.n_layers];
    let mut head_n = vec![vec![0usize; cfg.n_heads]; cfg.n_layers];
    let mut used_pairs = 0usize;

    for (clean_rec, corr_rec) in pairs {
        let clean_ids = tokenizer.encode(&clean_rec.text)?;
        let corr_ids = tokenizer.encode(&corr_rec.text)?;
        if clean_ids.len() != corr_ids.len() {
            return Err(Error::ShapeMismatch {
                what: format!("patch pair {} / {}", clean_rec.id, corr_rec.id),
                expected: format!("{} tokens", clean_ids.len()),
                got: format!("{} tokens", corr_ids.len()),
            });
        }
        let final_pos = clean_ids.len() - 1;
        let clean = forward_hooked(checkpoint, &clean_ids, &capture, None)?;
        let corr = forward_hooked(checkpoint, &corr_ids, &BTreeSet::new(), None)?;
        let argmax = |row: ndarray::ArrayView1<'_, f32>| {
            row.iter()
                .enumerate()
                .fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| {
                    if v > acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                })
                .0 as u32
        };
        let token_a = argmax(clean.logits.row(final_pos));
        let token_b = argmax(corr.logits.row(final_pos));
        if token_a == token_b {
            // Metric degenerate for this pair; the runs agree already.
            continue;
        }
        used_pairs += 1;
        for layer in 0..cfg.n_layers {
            for position in 0..clean_ids.len() {
                let spec = PatchSpec {
                    hook: HookPoint::ResidPost { layer },
                    position,
                    clean_trace: &clean,
                    token_a,
                    token_b,
                    metric_position: final_pos,
                };
                if let Some(r) = activation_patch(checkpoint, &corr_ids, &spec)?.recovered {
                    resid_sum[layer][position] += r;
                    resid_n[layer][position] += 1;
                }
            }
            for head in 0..cfg.n_heads {
                let spec = PatchSpec {
                    hook: HookPoint::HeadOut { layer, head },
                    position: final_pos,
                    clean_trace: &clean,
                    token_a,
                    token_b,
                    metric_position: final_pos,
                };
                if let Some(r) = activation_patch(checkpoint, &corr_ids, &spec)?.recovered {
                    head_sum[layer][head] += r;
                    head_n[layer][head] += 1;
                }
            }
        }
    }

    let resid: Vec<Vec<f64>> = resid_sum
        .iter()
        .zip(&resid_n)
        .map(|(sums, ns)| {
            sums.iter()
                .zip(ns)
                .map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN })
                .collect()
        })
        .collect();
    let heads: Vec<Vec<f64>> = head_sum
        .iter()
        .zip(&head_n)
        .map(|(sums, ns)| {
            sums.iter()
                .zip(ns)
                .map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN })
                .collect()
        })
        .collect();
    let mut ranked: Vec<(usize, usize, f64)> = (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.n_heads).map(move |h| (l, h)))
        .filter(|&(l, h)| heads[l][h].is_finite())
        .map(|(l, h)| (l, h, heads[l][h]))
        .collect();
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    ranked.truncate(top_k);
    Ok(PatchGrids {
        n_layers: cfg.n_layers,
        n_positions,
        resid,
        heads,
        n_pairs: used_pairs,
        top_heads: ranked,
    })
}

/// One-sided exact sign test: probability of >= `k` successes out of `n`
/// fair coin flips, where k = deltas matching `decrease` (zeros dropped).
pub fn sign_test_p(deltas: &[f64], decrease: bool) -> f64 {
    let n_dec = deltas.iter().filter(|&&d| d < 0.0).count();
    let n_inc = deltas.iter().filter(|&&d| d > 0.0).count();
    let n = n_dec + n_inc;
    if n == 0 {
        return 1.0;
    }
    let k = if decrease { n_dec } else { n_inc };
    // Exact binomial tail via iterative pmf.
    let mut pmf = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += pmf;
        }
        pmf *= (n - i) as f64 / (i + 1) as f64;
    }
    tail.min(1.0)
}

pub struct AttentionInputs<'a> {
    pub base: &'a ModelCheckpoint,
    pub known_prompts: &'a [PromptRecord],
    pub unknown_prompts: &'a [PromptRecord],
    pub heads: Vec<(usize, usize)>,
    /// Known-entity latent arm (alpha already scaled for this experiment).
    pub known_arm: LatentArm,
    pub unknown_arm: LatentArm,
    pub seed: u64,
}

fn pooled_means(stats: &[HeadAttentionStats]) -> Vec<f64> {
    let n = stats.first().map(|s| s.per_prompt.len()).unwrap_or(0);
    (0..n)
        .map(|i| stats.iter().map(|s| s.per_prompt[i]).sum::<f64>() / stats.len().max(1) as f64)
        .collect()
}

fn summarize(stats: &[HeadAttentionStats]) -> serde_json::Value {
    serde_json::json!(stats
        .iter()
        .map(|s| {
            serde_json::json!({
                "layer": s.layer,
                "head": s.head,
                "mean": s.mean,
                "std": s.std,
                "n": s.n,
            })
        })
        .collect::<Vec<_>>())
}

pub fn run_attention_experiment(
    inputs: &AttentionInputs<'_>,
    tokenizer: &Tokenizer,
    config_snapshot: serde_json::Value,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("attention", inputs.seed, config_snapshot);
    let heads = &inputs.heads;

    let known_base = attention_to_entity(inputs.base, inputs.known_prompts, tokenizer, heads, None)?;
    let unknown_base =
        attention_to_entity(inputs.base, inputs.unknown_prompts, tokenizer, heads, None)?;

    // Steering at the entity token (unknown latent on known prompts, known
    // latent on unknown prompts).
    let known_steered = attention_to_entity(
        inputs.base,
        inputs.known_prompts,
        tokenizer,
        heads,
        Some(&inputs.unknown_arm.spec(SteerPositions::EntityOnly)),
    )?;
    let unknown_steered = attention_to_entity(
        inputs.base,
        inputs.unknown_prompts,
        tokenizer,
        heads,
        Some(&inputs.known_arm.spec(SteerPositions::EntityOnly)),
    )?;

    // Random same-norm control on known prompts: an independent direction per
    // prompt, so the paired test has an honest null.
    let mut random_means: Vec<Vec<f64>> = Vec::with_capacity(inputs.known_prompts.len());
    for (i, record) in inputs.known_prompts.iter().enumerate() {
        let mut r = rng::substream(inputs.seed, "attention.random_vector", i as u64);
        let d = inputs.base.config.d_model;
        let mut v = Array1::from_shape_fn(d, |_| crate::model::math_normal(&mut r) as f32);
        let norm = v.iter().map(|&x| x * x).sum::<f32>().sqrt().max(1e-12);
        v.mapv_inplace(|x| x / norm);
        let spec = SteeringSpec {
            latent: inputs.unknown_arm.latent,
            direction: v,
            alpha: inputs.unknown_arm.alpha,
            positions: SteerPositions::EntityOnly,
        };
        let stats = attention_to_entity(
            inputs.base,
            std::slice::from_ref(record),
            tokenizer,
            heads,
            Some(&spec),
        )?;
        random_means.push(stats.iter().map(|s| s.per_prompt[0]).collect());
    }
    let random_pooled: Vec<f64> = random_means
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
        .collect();

    let known_pool = pooled_means(&known_base);
    let unknown_pool = pooled_means(&unknown_base);
    let steered_pool = pooled_means(&known_steered);
    let steer_deltas: Vec<f64> = steered_pool
        .iter()
        .zip(&known_pool)
        .map(|(s, b)| s - b)
        .collect();
    let random_deltas: Vec<f64> = random_pooled
        .iter()
        .zip(&known_pool)
        .map(|(s, b)| s - b)
        .collect();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let steer_p = sign_test_p(&steer_deltas, true);
    let random_p_two_sided = (2.0
        * sign_test_p(&random_deltas, true).min(sign_test_p(&random_deltas, false)))
    .min(1.0);

    report.insert("heads", heads);
    report.insert("known.per_head", summarize(&known_base));
    report.insert("unknown.per_head", summarize(&unknown_base));
    report.insert("known.steered_unknown_latent.per_head", summarize(&known_steered));
    report.insert("unknown.steered_known_latent.per_head", summarize(&unknown_steered));
    report.insert("known.pooled_mean", mean(&known_pool));
    report.insert("unknown.pooled_mean", mean(&unknown_pool));
    report.insert("known.steered.pooled_mean", mean(&steered_pool));
    report.insert("unknown.steered.pooled_mean", mean(&pooled_means(&unknown_steered)));
    report.insert("random.pooled_mean", mean(&random_pooled));
    report.insert(
        "steer.fraction_decreased",
        steer_deltas.iter().filter(|&&d| d < 0.0).count() as f64
            / steer_deltas.len().max(1) as f64,
    );
    report.insert("steer.sign_test_p_decrease", steer_p);
    report.insert("random.sign_test_p_two_sided", random_p_two_sided);
    report.insert("n_known_prompts", inputs.known_prompts.len());
    report.insert("n_unknown_prompts", inputs.unknown_prompts.len());
    report.insert(
        "alpha",
        serde_json::json!({"known": inputs.known_arm.alpha, "unknown": inputs.unknown_arm.alpha}),
    );
    Ok(report)
}
