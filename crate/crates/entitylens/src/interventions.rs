//! Causal tools: latent steering, alpha sweeps, weight orthogonalization,
//! activation patching with recovered logit difference, attention-to-entity
//! probes, and head logit attribution.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LatentId;
use crate::model::{
    forward_hooked, generate_greedy, logit_diff, Action, Captured, ForwardTrace, HookPoint,
    InterventionPlan, InterventionStep, ModelCheckpoint,
};
use crate::tokenizer::Tokenizer;
use crate::world::{last_entity_token_index, PromptRecord};

/// Where a steering vector is added.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerPositions {
    /// Last entity token plus the chat-template tokens from the end of the
    /// user turn through the assistant-start token.
    EntityAndInstructionEnd,
    /// Last entity token only.
    EntityOnly,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct SteeringSpec {
    pub latent: LatentId,
    /// Unit-normalized direction; alpha carries all magnitude.
    pub direction: Array1<f32>,
    pub alpha: f32,
    pub positions: SteerPositions,
}

fn check_unit_norm(direction: &Array1<f32>) -> Result<()> {
    let norm = direction.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::NotUnitNorm(norm));
    }
    Ok(())
}

/// Resolve steer positions for a prompt.
pub fn resolve_positions(
    positions: &SteerPositions,
    record: &PromptRecord,
    tokenizer: &Tokenizer,
) -> Result<Vec<usize>> {
    match positions {
        SteerPositions::Explicit(v) => Ok(v.clone()),
        SteerPositions::EntityOnly => Ok(vec![last_entity_token_index(record, tokenizer)?]),
        SteerPositions::EntityAndInstructionEnd => {
            let entity = last_entity_token_index(record, tokenizer)?;
            let ids = tokenizer.encode(&record.text)?;
            let specials = tokenizer.specials();
            let user_end = ids.iter().rposition(|&t| t == specials.user_end);
            let assistant = ids.iter().rposition(|&t| t == specials.assistant_start);
            let (Some(ue), Some(a)) = (user_end, assistant) else {
                return Err(Error::UnresolvablePosition {
                    prompt_id: record.id.clone(),
                    rule: "instruction_end".into(),
                });
            };
            let mut out = vec![entity];
            out.extend(ue..=a);
            Ok(out)
        }
    }
}

/// Build the residual-stream steering plan x <- x + alpha * d at the latent's
/// layer and the resolved positions.
pub fn steering_plan(spec: &SteeringSpec, positions: Vec<usize>) -> Result<InterventionPlan> {
    check_unit_norm(&spec.direction)?;
    Ok(InterventionPlan::single(InterventionStep {
        hook: HookPoint::ResidPost {
            layer: spec.latent.layer,
        },
        positions,
        action: Action::AddVector {
            v: spec.direction.clone(),
            alpha: spec.alpha,
        },
    }))
}

/// Steered forward pass over a rendered prompt.
pub fn steer(
    checkpoint: &ModelCheckpoint,
    record: &PromptRecord,
    tokenizer: &Tokenizer,
    spec: &SteeringSpec,
    capture: &BTreeSet<HookPoint>,
) -> Result<ForwardTrace> {
    let ids = tokenizer.encode(&record.text)?;
    let plan = steering_plan(spec, resolve_positions(&spec.positions, record, tokenizer)?)?;
    forward_hooked(checkpoint, &ids, capture, Some(&plan))
}

/// Steered greedy generation; `spec` None gives the plain baseline.
pub fn steered_generation(
    checkpoint: &ModelCheckpoint,
    record: &PromptRecord,
    tokenizer: &Tokenizer,
    spec: Option<&SteeringSpec>,
    max_new: usize,
    stop: &[u32],
) -> Result<Vec<u32>> {
    let ids = tokenizer.encode(&record.text)?;
    let plan = match spec {
        Some(spec) => Some(steering_plan(
            spec,
            resolve_positions(&spec.positions, record, tokenizer)?,
        )?),
        None => None,
    };
    generate_greedy(checkpoint, &ids, max_new, stop, plan.as_ref())
}

// ---------------------------------------------------------------------------
// alpha sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub refusal_rate: f64,
    pub coherence: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Smallest alpha meeting the objective with sufficient coherence.
    pub recommended: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "objective")]
pub enum SweepObjective {
    RaiseRefusal { min_rate: f64 },
    LowerRefusal { max_rate: f64 },
}

impl SweepObjective {
    fn met(&self, rate: f64) -> bool {
        match self {
            SweepObjective::RaiseRefusal { min_rate } => rate >= *min_rate,
            SweepObjective::LowerRefusal { max_rate } => rate <= *max_rate,
        }
    }
}

/// Latent + direction + positions, without a coefficient: the sweep supplies
/// alphas.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub latent: LatentId,
    pub direction: Array1<f32>,
    pub positions: SteerPositions,
}

#[allow(clippy::too_many_arguments)]
pub fn sweep_alpha(
    checkpoint: &ModelCheckpoint,
    prompts: &[PromptRecord],
    tokenizer: &Tokenizer,
    spec: &SweepSpec,
    alphas: &[f64],
    objective: SweepObjective,
    coherence_min: f64,
    max_new: usize,
    stop: &[u32],
    is_refusal: &(dyn Fn(&str) -> bool + Sync),
    is_coherent: &(dyn Fn(&str) -> bool + Sync),
) -> Result<SweepTable> {
    if alphas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("alphas must be sorted ascending".into()));
    }
    check_unit_norm(&spec.direction)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let steering = SteeringSpec {
            latent: spec.latent,
            direction: spec.direction.clone(),
            alpha: alpha as f32,
            positions: spec.positions.clone(),
        };
        let outcomes: Result<Vec<(bool, bool)>> = prompts
            .par_iter()
            .map(|record| {
                let out =
                    steered_generation(checkpoint, record, tokenizer, Some(&steering), max_new, stop)?;
                let text = decode_generation(tokenizer, &out);
                Ok((is_refusal(&text), is_coherent(&text)))
            })
            .collect();
        let outcomes = outcomes?;
        let n = outcomes.len();
        let refusals = outcomes.iter().filter(|(r, _)| *r).count();
        let coherent = outcomes.iter().filter(|(_, c)| *c).count();
        rows.push(SweepRow {
            alpha,
            refusal_rate: refusals as f64 / n.max(1) as f64,
            coherence: coherent as f64 / n.max(1) as f64,
            n,
        });
    }
    let recommended = rows
        .iter()
        .filter(|r| r.alpha > 0.0 && objective.met(r.refusal_rate) && r.coherence >= coherence_min)
        .map(|r| r.alpha)
        .next();
    Ok(SweepTable { rows, recommended })
}

/// Decoded generation with special tokens stripped.
pub fn decode_generation(tokenizer: &Tokenizer, ids: &[u32]) -> String {
    let body: Vec<u32> = ids.iter().copied().filter(|&t| !tokenizer.is_special(t)).collect();
    tokenizer.decode(&body)
}

/// Mean residual-stream L2 norm at the given layer over (prompt, position)
/// pairs; the natural unit for steering coefficients.
pub fn mean_residual_norm(
    checkpoint: &ModelCheckpoint,
    prompts: &[(Vec<u32>, usize)],
    layer: usize,
) -> Result<f64> {
    let capture: BTreeSet<HookPoint> = [HookPoint::ResidPost { layer }].into_iter().collect();
    let norms: Result<Vec<f64>> = prompts
        .par_iter()
        .map(|(ids, position)| {
            let trace = forward_hooked(checkpoint, ids, &capture, None)?;
            let resid = trace.require(&HookPoint::ResidPost { layer })?.matrix();
            Ok(resid
                .row(*position)
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt())
        })
        .collect();
    let norms = norms?;
    Ok(norms.iter().sum::<f64>() / norms.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// weight orthogonalization
// ---------------------------------------------------------------------------

/// Project `direction` out of every matrix that writes to the residual
/// stream (token/positional embeddings, attention output projections, MLP
/// output projections): row <- row - (row . d) d. Returns a new checkpoint.
pub fn orthogonalize_weights(
    checkpoint: &ModelCheckpoint,
    direction: &Array1<f32>,
) -> Result<ModelCheckpoint> {
    check_unit_norm(direction)?;
    if direction.len() != checkpoint.config.d_model {
        return Err(Error::ShapeMismatch {
            what: "orthogonalization direction".into(),
            expected: format!("[{}]", checkpoint.config.d_model),
            got: format!("[{}]", direction.len()),
        });
    }
    let mut out = checkpoint.clone();
    let layout = out.layout();
    for (_, slot) in layout.residual_writing_slots() {
        let mut mat = out.params.view_mut(slot);
        for mut row in mat.rows_mut() {
            let dot: f32 = row.iter().zip(direction.iter()).map(|(&r, &d)| r * d).sum();
            row.zip_mut_with(direction, |r, &d| *r -= dot * d);
        }
    }
    Ok(out)
}

/// Largest |row . d| over all residual-writing matrices.
pub fn max_residual_alignment(checkpoint: &ModelCheckpoint, direction: &Array1<f32>) -> f64 {
    let layout = checkpoint.layout();
    let mut worst = 0f64;
    for (_, slot) in layout.residual_writing_slots() {
        let mat = checkpoint.params.view(slot);
        for row in mat.rows() {
            let dot: f64 = row
                .iter()
                .zip(direction.iter())
                .map(|(&r, &d)| f64::from(r) * f64::from(d))
                .sum();
            worst = worst.max(dot.abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// activation patching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PatchSpec<'a> {
    pub hook: HookPoint,
    pub position: usize,
    pub clean_trace: &'a ForwardTrace,
    pub token_a: u32,
    pub token_b: u32,
    /// Position where the logit-difference metric is read (normally the
    /// final prompt token).
    pub metric_position: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchOutcome {
    /// Primary metric: LD_patched / LD_clean. None when |LD_clean| < 1e-9.
    pub recovered: Option<f64>,
    /// (LD_patched - LD_corr) / (LD_clean - LD_corr); None when degenerate.
    pub recovered_rebased: Option<f64>,
    pub ld_clean: f64,
    pub ld_corr: f64,
    pub ld_patched: f64,
}

/// Denoising patch: replace the corrupted run's activation at (hook,
/// position) with the clean run's captured value and measure how much of the
/// clean logit difference comes back.
pub fn activation_patch(
    checkpoint: &ModelCheckpoint,
    corrupted_ids: &[u32],
    spec: &PatchSpec<'_>,
) -> Result<PatchOutcome> {
    let clean_value = match spec.clean_trace.require(&spec.hook)? {
        Captured::Matrix(m) => m,
        Captured::Heads(_) => return Err(Error::UnsupportedIntervention),
    };
    if spec.position >= clean_value.nrows() {
        return Err(Error::PositionOutOfRange {
            position: spec.position,
            len: clean_value.nrows(),
        });
    }
    let mut rows = Array2::zeros((1, clean_value.ncols()));
    rows.row_mut(0).assign(&clean_value.row(spec.position));
    let plan = InterventionPlan::single(InterventionStep {
        hook: spec.hook,
        positions: vec![spec.position],
        action: Action::ReplaceWith { rows },
    });
    let none = BTreeSet::new();
    let corr = forward_hooked(checkpoint, corrupted_ids, &none, None)?;
    let patched = forward_hooked(checkpoint, corrupted_ids, &none, Some(&plan))?;

    let ld_clean = logit_diff(spec.clean_trace, spec.token_a, spec.token_b, spec.metric_position)?;
    let ld_corr = logit_diff(&corr, spec.token_a, spec.token_b, spec.metric_position)?;
    let ld_patched = logit_diff(&patched, spec.token_a, spec.token_b, spec.metric_position)?;
    let recovered = (ld_clean.abs() >= 1e-9).then(|| ld_patched / ld_clean);
    let recovered_rebased =
        ((ld_clean - ld_corr).abs() >= 1e-9).then(|| (ld_patched - ld_corr) / (ld_clean - ld_corr));
    Ok(PatchOutcome {
        recovered,
        recovered_rebased,
        ld_clean,
        ld_corr,
        ld_patched,
    })
}

// ---------------------------------------------------------------------------
// attention to entity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadAttentionStats {
    pub layer: usize,
    pub head: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Attention(final -> last entity token) per prompt, in prompt order.
    pub per_prompt: Vec<f64>,
}

/// Attention paid from the final position to the last entity token at the
/// given heads, optionally under a steering intervention at the entity token.
pub fn attention_to_entity(
    checkpoint: &ModelCheckpoint,
    records: &[PromptRecord],
    tokenizer: &Tokenizer,
    heads: &[(usize, usize)],
    steering: Option<&SteeringSpec>,
) -> Result<Vec<HeadAttentionStats>> {
    let capture: BTreeSet<HookPoint> = heads
        .iter()
        .map(|&(layer, _)| HookPoint::AttnPattern { layer })
        .collect();
    let per_prompt: Result<Vec<Vec<f64>>> = records
        .par_iter()
        .map(|record| {
            let ids = tokenizer.encode(&record.text)?;
            let entity_pos = last_entity_token_index(record, tokenizer)?;
            let final_pos = ids.len() - 1;
            let plan = match steering {
                Some(spec) => Some(steering_plan(
                    spec,
                    resolve_positions(&spec.positions, record, tokenizer)?,
                )?),
                None => None,
            };
            let trace = forward_hooked(checkpoint, &ids, &capture, plan.as_ref())?;
            heads
                .iter()
                .map(|&(layer, head)| {
                    let pat = trace.require(&HookPoint::AttnPattern { layer })?.heads();
                    Ok(f64::from(pat[(head, final_pos, entity_pos)]))
                })
                .collect()
        })
        .collect();
    let per_prompt = per_prompt?;
    let n = per_prompt.len();
    Ok(heads
        .iter()
        .enumerate()
        .map(|(hi, &(layer, head))| {
            let values: Vec<f64> = per_prompt.iter().map(|row| row[hi]).collect();
            let mean = values.iter().sum::<f64>() / n.max(1) as f64;
            let var = if n > 1 {
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            HeadAttentionStats {
                layer,
                head,
                mean,
                std: var.sqrt(),
                n,
                per_prompt: values,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// head logit attribution
// ---------------------------------------------------------------------------

/// Additive decomposition of the final-position logits through the frozen
/// final LayerNorm: embedding, each head's output, and each MLP output.
pub struct LogitDecomposition {
    /// (component name, logit contribution vector)
    pub components: Vec<(String, Array1<f64>)>,
    /// Constant part (centering + final LN bias through the unembedding).
    pub constant: Array1<f64>,
    /// Actual final-position logits.
    pub logits: Array1<f64>,
}

pub fn logit_decomposition(
    checkpoint: &ModelCheckpoint,
    ids: &[u32],
) -> Result<LogitDecomposition> {
    let cfg = &checkpoint.config;
    let mut capture: BTreeSet<HookPoint> = BTreeSet::new();
    for l in 0..cfg.n_layers {
        capture.insert(HookPoint::ResidPost { layer: l });
        for h in 0..cfg.n_heads {
            capture.insert(HookPoint::HeadOut { layer: l, head: h });
        }
    }
    let trace = forward_hooked(checkpoint, ids, &capture, None)?;
    let final_pos = ids.len() - 1;
    let layout = checkpoint.layout();
    let d = cfg.d_model;

    // Residual components at the final position.
    let mut components: Vec<(String, Array1<f64>)> = Vec::new();
    let tok = checkpoint.params.view(layout.tok_embed);
    let pos = checkpoint.params.view(layout.pos_embed);
    let embed: Array1<f64> = (0..d)
        .map(|c| f64::from(tok[(ids[final_pos] as usize, c)]) + f64::from(pos[(final_pos, c)]))
        .collect();
    components.push(("embed".to_string(), embed));
    let mut prev: Array1<f64> = components[0].1.clone();
    let mut running = prev.clone();
    for l in 0..cfg.n_layers {
        let mut attn_sum = Array1::<f64>::zeros(d);
        for h in 0..cfg.n_heads {
            let contrib = trace
                .require(&HookPoint::HeadOut { layer: l, head: h })?
                .matrix();
            let v: Array1<f64> = contrib.row(final_pos).mapv(f64::from);
            attn_sum += &v;
            components.push((format!("layer{l}.head{h}"), v));
        }
        let resid = trace
            .require(&HookPoint::ResidPost { layer: l })?
            .matrix()
            .row(final_pos)
            .mapv(f64::from);
        let mlp = &resid - &running - &attn_sum;
        components.push((format!("layer{l}.mlp"), mlp));
        running = resid.clone();
        prev = resid;
    }
    let x_final = prev;

    // Frozen final-LN linearization: logits = ((x - mu)/sigma .* w + b) W_U.
    let mean = x_final.sum() / d as f64;
    let var = x_final.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let sigma = (var + cfg.norm_eps).sqrt();
    let w_f: Array1<f64> = checkpoint.params.vec_view(layout.lnf_w).mapv(f64::from);
    let b_f: Array1<f64> = checkpoint.params.vec_view(layout.lnf_b).mapv(f64::from);
    let unembed = checkpoint.params.view(layout.unembed);
    let project = |v: &Array1<f64>| -> Array1<f64> {
        let m = v.sum() / d as f64;
        let scaled: Array1<f64> = v
            .iter()
            .zip(w_f.iter())
            .map(|(&vi, &wi)| (vi - m) / sigma * wi)
            .collect();
        (0..cfg.vocab_size)
            .map(|t| {
                scaled
                    .iter()
                    .enumerate()
                    .map(|(c, &s)| s * f64::from(unembed[(c, t)]))
                    .sum::<f64>()
            })
            .collect()
    };
    let logit_components: Vec<(String, Array1<f64>)> = components
        .iter()
        .map(|(name, v)| (name.clone(), project(v)))
        .collect();
    let constant: Array1<f64> = (0..cfg.vocab_size)
        .map(|t| {
            b_f.iter()
                .enumerate()
                .map(|(c, &b)| b * f64::from(unembed[(c, t)]))
                .sum::<f64>()
        })
        .collect();
    let logits = trace.logits.row(final_pos).mapv(f64::from);
    Ok(LogitDecomposition {
        components: logit_components,
        constant,
        logits,
    })
}

/// Top-k tokens promoted by one head at the final position, through the
/// frozen final-LN convention above. Ties break toward lower token ids.
pub fn head_logit_attribution(
    checkpoint: &ModelCheckpoint,
    ids: &[u32],
    layer: usize,
    head: usize,
    top_k: usize,
) -> Result<Vec<(u32, f64)>> {
    let decomp = logit_decomposition(checkpoint, ids)?;
    let name = format!("layer{layer}.head{head}");
    let contrib = decomp
        .components
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::HookOutOfRange(name))?;
    let mut ranked: Vec<(u32, f64)> = contrib
        .iter()
        .enumerate()
        .map(|(t, &v)| (t as u32, v))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    Ok(ranked)
}

#[cfg(test)]
mod tests;
