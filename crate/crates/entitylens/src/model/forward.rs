//! Hooked forward pass: capture residual streams, attention patterns, and
//! per-head outputs; apply add/replace interventions at named sites.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{s, Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::checkpoint::ModelCheckpoint;
use super::math::{causal_softmax_inplace, gelu, layer_norm};
use crate::error::{Error, Result};

/// A named site in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HookPoint {
    /// Residual stream after layer `layer`'s MLP add.
    ResidPost { layer: usize },
    /// Post-softmax attention pattern of layer `layer`: [head, query, key].
    AttnPattern { layer: usize },
    /// One head's contribution to the residual stream (z @ W_O block).
    HeadOut { layer: usize, head: usize },
}

#[derive(Debug, Clone)]
pub enum Captured {
    Matrix(Array2<f32>),
    Heads(Array3<f32>),
}

impl Captured {
    pub fn matrix(&self) -> &Array2<f32> {
        match self {
            Captured::Matrix(m) => m,
            Captured::Heads(_) => panic!("expected matrix capture"),
        }
    }

    pub fn heads(&self) -> &Array3<f32> {
        match self {
            Captured::Heads(h) => h,
            Captured::Matrix(_) => panic!("expected attention capture"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// [seq, vocab]
    pub logits: Array2<f32>,
    pub captured: BTreeMap<HookPoint, Captured>,
}

impl ForwardTrace {
    pub fn require(&self, hook: &HookPoint) -> Result<&Captured> {
        self.captured
            .get(hook)
            .ok_or_else(|| Error::HookOutOfRange(format!("{hook:?} was not captured")))
    }
}

#[derive(Debug, Clone)]
pub enum Action {
    /// x[pos] += alpha * v
    AddVector { v: Array1<f32>, alpha: f32 },
    /// x[pos_i] = rows[i]
    ReplaceWith { rows: Array2<f32> },
}

#[derive(Debug, Clone)]
pub struct InterventionStep {
    pub hook: HookPoint,
    pub positions: Vec<usize>,
    pub action: Action,
}

#[derive(Debug, Clone, Default)]
pub struct InterventionPlan {
    pub steps: Vec<InterventionStep>,
}

impl InterventionPlan {
    pub fn single(step: InterventionStep) -> InterventionPlan {
        InterventionPlan { steps: vec![step] }
    }
}

fn validate_hook(hook: &HookPoint, n_layers: usize, n_heads: usize) -> Result<()> {
    let ok = match hook {
        HookPoint::ResidPost { layer } | HookPoint::AttnPattern { layer } => *layer < n_layers,
        HookPoint::HeadOut { layer, head } => *layer < n_layers && *head < n_heads,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::HookOutOfRange(format!("{hook:?}")))
    }
}

fn validate_plan(plan: &InterventionPlan, ckpt: &ModelCheckpoint, n: usize) -> Result<()> {
    let cfg = &ckpt.config;
    for step in &plan.steps {
        validate_hook(&step.hook, cfg.n_layers, cfg.n_heads)?;
        if matches!(step.hook, HookPoint::AttnPattern { .. }) {
            return Err(Error::UnsupportedIntervention);
        }
        for &p in &step.positions {
            if p >= n {
                return Err(Error::PositionOutOfRange { position: p, len: n });
            }
        }
        match &step.action {
            Action::AddVector { v, .. } => {
                if v.len() != cfg.d_model {
                    return Err(Error::ShapeMismatch {
                        what: "add_vector direction".into(),
                        expected: format!("[{}]", cfg.d_model),
                        got: format!("[{}]", v.len()),
                    });
                }
            }
            Action::ReplaceWith { rows } => {
                if rows.nrows() != step.positions.len() || rows.ncols() != cfg.d_model {
                    return Err(Error::ShapeMismatch {
                        what: "replace_with rows".into(),
                        expected: format!("[{}, {}]", step.positions.len(), cfg.d_model),
                        got: format!("[{}, {}]", rows.nrows(), rows.ncols()),
                    });
                }
            }
        }
    }
    Ok(())
}

fn apply_steps(x: &mut Array2<f32>, steps: &[&InterventionStep]) {
    for step in steps {
        match &step.action {
            Action::AddVector { v, alpha } => {
                for &p in &step.positions {
                    let mut row = x.row_mut(p);
                    row.zip_mut_with(v, |xi, &vi| *xi += alpha * vi);
                }
            }
            Action::ReplaceWith { rows } => {
                for (i, &p) in step.positions.iter().enumerate() {
                    x.row_mut(p).assign(&rows.row(i));
                }
            }
        }
    }
}

/// Full forward pass over one sequence. Interventions run before capture at
/// the same site, so captured values are the effective ones.
pub fn forward_hooked(
    ckpt: &ModelCheckpoint,
    ids: &[u32],
    capture: &BTreeSet<HookPoint>,
    plan: Option<&InterventionPlan>,
) -> Result<ForwardTrace> {
    let cfg = &ckpt.config;
    let n = ids.len();
    if n == 0 || n > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    for &id in ids {
        if (id as usize) >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    for hook in capture {
        validate_hook(hook, cfg.n_layers, cfg.n_heads)?;
    }
    if let Some(plan) = plan {
        validate_plan(plan, ckpt, n)?;
    }

    let mut by_hook: HashMap<HookPoint, Vec<&InterventionStep>> = HashMap::new();
    if let Some(plan) = plan {
        for step in &plan.steps {
            by_hook.entry(step.hook).or_default().push(step);
        }
    }

    let layout = ckpt.layout();
    let p = &ckpt.params;
    let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    let eps = cfg.norm_eps as f32;
    let scale = 1.0 / (dh as f32).sqrt();

    let tok = p.view(layout.tok_embed);
    let pos = p.view(layout.pos_embed);
    let mut x = Array2::<f32>::zeros((n, d));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(t);
        row.assign(&tok.row(id as usize));
        row += &pos.row(t);
    }

    let mut captured = BTreeMap::new();
    for (l, slots) in layout.layers.iter().enumerate() {
        let (h1, _, _) = layer_norm(x.view(), p.vec_view(slots.ln1_w), p.vec_view(slots.ln1_b), eps);
        let q = h1.dot(&p.view(slots.wq));
        let k = h1.dot(&p.view(slots.wk));
        let v = h1.dot(&p.view(slots.wv));
        let wo = p.view(slots.wo);

        let mut patterns = Array3::<f32>::zeros((h, n, n));
        let mut attn_sum = Array2::<f32>::zeros((n, d));
        for head in 0..h {
            let cols = s![.., head * dh..(head + 1) * dh];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            causal_softmax_inplace(&mut scores);
            let z = scores.dot(&vh);
            patterns.slice_mut(s![head, .., ..]).assign(&scores);
            let mut contrib = z.dot(&wo.slice(s![head * dh..(head + 1) * dh, ..]));
            let hook = HookPoint::HeadOut { layer: l, head };
            if let Some(steps) = by_hook.get(&hook) {
                apply_steps(&mut contrib, steps);
            }
            if capture.contains(&hook) {
                captured.insert(hook, Captured::Matrix(contrib.clone()));
            }
            attn_sum += &contrib;
        }
        let pattern_hook = HookPoint::AttnPattern { layer: l };
        if capture.contains(&pattern_hook) {
            captured.insert(pattern_hook, Captured::Heads(patterns));
        }
        x += &attn_sum;

        let (h2, _, _) = layer_norm(x.view(), p.vec_view(slots.ln2_w), p.vec_view(slots.ln2_b), eps);
        let mut u = h2.dot(&p.view(slots.w_in));
        u.mapv_inplace(gelu);
        let mlp_out = u.dot(&p.view(slots.w_out));
        x += &mlp_out;

        let resid_hook = HookPoint::ResidPost { layer: l };
        if let Some(steps) = by_hook.get(&resid_hook) {
            apply_steps(&mut x, steps);
        }
        if capture.contains(&resid_hook) {
            captured.insert(resid_hook, Captured::Matrix(x.clone()));
        }
    }

    let (hf, _, _) = layer_norm(x.view(), p.vec_view(layout.lnf_w), p.vec_view(layout.lnf_b), eps);
    let logits = hf.dot(&p.view(layout.unembed));
    Ok(ForwardTrace { logits, captured })
}

/// logits[position][a] - logits[position][b]
pub fn logit_diff(trace: &ForwardTrace, token_a: u32, token_b: u32, position: usize) -> Result<f64> {
    if position >= trace.logits.nrows() {
        return Err(Error::PositionOutOfRange {
            position,
            len: trace.logits.nrows(),
        });
    }
    let vocab = trace.logits.ncols();
    for t in [token_a, token_b] {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
    }
    Ok(f64::from(trace.logits[(position, token_a as usize)])
        - f64::from(trace.logits[(position, token_b as usize)]))
}
