//! Greedy decoding.

use std::collections::BTreeSet;

use super::checkpoint::ModelCheckpoint;
use super::forward::{forward_hooked, InterventionPlan};
use crate::error::{Error, Result};

/// Greedy continuation. Decoding stops once the running sequence ends in a
/// stop token, so a prompt already ending in one yields an empty
/// continuation; a generated stop token is included in the output. Argmax
/// ties break toward the lowest token id. An optional plan is applied on
/// every decoding step (positions refer to the fixed prompt region).
pub fn generate_greedy(
    ckpt: &ModelCheckpoint,
    prompt: &[u32],
    max_new: usize,
    stop_tokens: &[u32],
    plan: Option<&InterventionPlan>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InvalidConfig("empty prompt".into()));
    }
    if prompt.len() + max_new > ckpt.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + max_new,
            max: ckpt.config.max_seq_len,
        });
    }
    let stop: BTreeSet<u32> = stop_tokens.iter().copied().collect();
    let capture = BTreeSet::new();
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if ids.last().is_some_and(|t| stop.contains(t)) {
            break;
        }
        let trace = forward_hooked(ckpt, &ids, &capture, plan)?;
        let last = trace.logits.row(trace.logits.nrows() - 1);
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (j, &v) in last.iter().enumerate() {
            if v > best_v {
                best = j;
                best_v = v;
            }
        }
        ids.push(best as u32);
        out.push(best as u32);
    }
    Ok(out)
}
