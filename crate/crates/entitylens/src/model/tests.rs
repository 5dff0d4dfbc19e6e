use std::collections::BTreeSet;

use ndarray::{array, Array1, Array2};

use super::*;
use crate::error::Error;
use crate::rng;

pub(crate) fn tiny_cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_mlp: 32,
        vocab_size: vocab,
        max_seq_len: 16,
        norm_eps: 1e-5,
    }
}

fn random_seq(vocab: usize, len: usize, seed: u64) -> Vec<u32> {
    use rand::Rng;
    let mut r = rng::stream(seed, "test.seq");
    (0..len).map(|_| r.random_range(0..vocab as u32)).collect()
}

#[test]
fn initial_loss_is_near_ln_vocab() {
    let cfg = tiny_cfg(50);
    let params = init_params(&cfg, 0);
    let seqs: Vec<Vec<u32>> = (0..4).map(|i| random_seq(50, 12, i)).collect();
    let batch: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (loss, _) = loss_and_grads::<f32>(&cfg, &params, &batch).unwrap();
    let expect = (50f64).ln();
    assert!(
        (loss - expect).abs() < 0.1 * expect,
        "step-0 loss {loss} not within 10% of ln(vocab) = {expect}"
    );
}

#[test]
fn memorizes_a_single_sequence() {
    let cfg = tiny_cfg(30);
    let corpus = vec![random_seq(30, 10, 99)];
    let hyper = TrainHyper {
        lr: 3e-3,
        batch: 1,
        steps: 400,
        seed: 1,
        warmup_frac: 0.05,
        grad_clip: 1.0,
    };
    let (_, logs) = train_lm(&cfg, &corpus, &hyper, None).unwrap();
    let final_loss = logs.last().unwrap().loss;
    assert!(
        final_loss < 0.05,
        "one-sequence corpus should be memorized; loss = {final_loss}"
    );
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_cfg(30);
    let corpus: Vec<Vec<u32>> = (0..6).map(|i| random_seq(30, 9, i)).collect();
    let hyper = TrainHyper {
        lr: 1e-3,
        batch: 3,
        steps: 25,
        seed: 7,
        warmup_frac: 0.05,
        grad_clip: 1.0,
    };
    let (c1, l1) = train_lm(&cfg, &corpus, &hyper, None).unwrap();
    let (c2, l2) = train_lm(&cfg, &corpus, &hyper, None).unwrap();
    assert_eq!(c1.params.data, c2.params.data);
    assert_eq!(
        l1.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>(),
        l2.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn divergence_is_reported() {
    let cfg = tiny_cfg(30);
    let corpus = vec![random_seq(30, 10, 2)];
    // Pre-norm blocks absorb large parameter scales, so overflowing f32
    // attention scores takes an absurd learning rate.
    let hyper = TrainHyper {
        lr: 1e20,
        batch: 1,
        steps: 5,
        seed: 1,
        warmup_frac: 0.0,
        grad_clip: 1e30,
    };
    match train_lm(&cfg, &corpus, &hyper, None) {
        Err(Error::Divergence { .. }) | Err(Error::NonFinite(_)) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn finetune_requires_matching_config() {
    let cfg = tiny_cfg(30);
    let ckpt = random_checkpoint(&cfg, 0);
    let other = tiny_cfg(31);
    let hyper = TrainHyper {
        lr: 1e-3,
        batch: 1,
        steps: 1,
        seed: 0,
        warmup_frac: 0.0,
        grad_clip: 1.0,
    };
    assert!(train_lm(&other, &[vec![0, 1, 2]], &hyper, Some(&ckpt)).is_err());
}

#[test]
fn hooked_forward_matches_train_forward() {
    let cfg = tiny_cfg(40);
    let ckpt = random_checkpoint(&cfg, 5);
    let ids = random_seq(40, 11, 3);
    let hooked = forward_hooked(&ckpt, &ids, &BTreeSet::new(), None).unwrap();
    let packed = train_forward_logits(&cfg, &ckpt.params, &ids);
    let max_diff = (&hooked.logits - &packed)
        .iter()
        .fold(0f32, |m, &d| m.max(d.abs()));
    assert!(max_diff <= 1e-4, "paths disagree by {max_diff}");
}

/// Train-path logits via loss_and_grads' forward (batch of one).
fn train_forward_logits(cfg: &ModelConfig, params: &ParamVec<f32>, ids: &[u32]) -> Array2<f32> {
    super::train::forward_logits(cfg, params, ids).unwrap()
}

#[test]
fn causality_earlier_positions_unchanged() {
    let cfg = tiny_cfg(40);
    let ckpt = random_checkpoint(&cfg, 8);
    let mut ids = random_seq(40, 10, 4);
    let trace1 = forward_hooked(&ckpt, &ids, &BTreeSet::new(), None).unwrap();
    let t = 6;
    ids[t] = (ids[t] + 1) % 40;
    let trace2 = forward_hooked(&ckpt, &ids, &BTreeSet::new(), None).unwrap();
    for pos in 0..t {
        for v in 0..cfg.vocab_size {
            assert_eq!(
                trace1.logits[(pos, v)],
                trace2.logits[(pos, v)],
                "logits at position {pos} changed after perturbing token {t}"
            );
        }
    }
}

#[test]
fn capturing_hooks_does_not_change_logits() {
    let cfg = tiny_cfg(40);
    let ckpt = random_checkpoint(&cfg, 9);
    let ids = random_seq(40, 9, 5);
    let plain = forward_hooked(&ckpt, &ids, &BTreeSet::new(), None).unwrap();
    let mut capture = BTreeSet::new();
    for l in 0..cfg.n_layers {
        capture.insert(HookPoint::ResidPost { layer: l });
        capture.insert(HookPoint::AttnPattern { layer: l });
        for h in 0..cfg.n_heads {
            capture.insert(HookPoint::HeadOut { layer: l, head: h });
        }
    }
    let hooked = forward_hooked(&ckpt, &ids, &capture, None).unwrap();
    assert_eq!(plain.logits, hooked.logits);
    assert_eq!(hooked.captured.len(), capture.len());
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = tiny_cfg(40);
    let ckpt = random_checkpoint(&cfg, 10);
    let ids = random_seq(40, 8, 6);
    let mut capture = BTreeSet::new();
    capture.insert(HookPoint::AttnPattern { layer: 1 });
    let trace = forward_hooked(&ckpt, &ids, &capture, None).unwrap();
    let pat = trace
        .require(&HookPoint::AttnPattern { layer: 1 })
        .unwrap()
        .heads();
    for h in 0..cfg.n_heads {
        for i in 0..ids.len() {
            let mut sum = 0f32;
            for j in 0..ids.len() {
                let p = pat[(h, i, j)];
                assert!(p >= 0.0);
                if j > i {
                    assert_eq!(p, 0.0, "causal mask violated at ({h},{i},{j})");
                }
                sum += p;
            }
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn zero_alpha_plan_is_a_noop() {
    let cfg = tiny_cfg(40);
    let ckpt = random_checkpoint(&cfg, 11);
    let ids = random_seq(40, 8, 7);
    let plain = forward_hooked(&ckpt, &ids, &BTreeSet::new(), None).unwrap();
    let plan = InterventionPlan::single(InterventionStep {
        hook: HookPoint::ResidPost { layer: 0 },
        positions: vec![2, 5],
        action: Action::AddVector {
            v: Array1::from_elem(cfg.d_model, 1.7),
            alpha: 0.0,
        },
    });
    let steered = forward_hooked(&ckpt, &ids, &BTreeSet::new(), Some(&plan)).unwrap();
    let max_diff = (&plain.logits - &steered.logits)
        .iter()
        .fold(0f32, |m, &d| m.max(d.abs()));
    assert!(max_diff <= 1e-6);
}

#[test]
fn self_patch_is_identity() {
    let cfg = tiny_cfg(40);
    let ckpt = random_checkpoint(&cfg, 12);
    let ids = random_seq(40, 8, 8);
    let hook = HookPoint::ResidPost { layer: 1 };
    let mut capture = BTreeSet::new();
    capture.insert(hook);
    let clean = forward_hooked(&ckpt, &ids, &capture, None).unwrap();
    let rows = clean.require(&hook).unwrap().matrix().clone();
    let plan = InterventionPlan::single(InterventionStep {
        hook,
        positions: (0..ids.len()).collect(),
        action: Action::ReplaceWith { rows },
    });
    let patched = forward_hooked(&ckpt, &ids, &BTreeSet::new(), Some(&plan)).unwrap();
    assert_eq!(clean.logits, patched.logits);
}

#[test]
fn interventions_compose_additively() {
    let cfg = tiny_cfg(40);
    let ckpt = random_checkpoint(&cfg, 13);
    let ids = random_seq(40, 8, 9);
    let v: Array1<f32> = Array1::from_iter((0..cfg.d_model).map(|i| (i as f32 * 0.1).sin()));
    let step = |alpha: f32| InterventionStep {
        hook: HookPoint::ResidPost { layer: 0 },
        positions: vec![3],
        action: Action::AddVector { v: v.clone(), alpha },
    };
    let two = InterventionPlan {
        steps: vec![step(0.4), step(0.9)],
    };
    let one = InterventionPlan::single(step(1.3));
    let a = forward_hooked(&ckpt, &ids, &BTreeSet::new(), Some(&two)).unwrap();
    let b = forward_hooked(&ckpt, &ids, &BTreeSet::new(), Some(&one)).unwrap();
    let max_diff = (&a.logits - &b.logits)
        .iter()
        .fold(0f32, |m, &d| m.max(d.abs()));
    assert!(max_diff <= 1e-6, "composition differs by {max_diff}");
}

#[test]
fn plan_validation_errors() {
    let cfg = tiny_cfg(40);
    let ckpt = random_checkpoint(&cfg, 14);
    let ids = random_seq(40, 8, 10);
    let bad_shape = InterventionPlan::single(InterventionStep {
        hook: HookPoint::ResidPost { layer: 0 },
        positions: vec![1, 2],
        action: Action::ReplaceWith {
            rows: Array2::zeros((1, cfg.d_model)),
        },
    });
    assert!(matches!(
        forward_hooked(&ckpt, &ids, &BTreeSet::new(), Some(&bad_shape)),
        Err(Error::ShapeMismatch { .. })
    ));
    let bad_pos = InterventionPlan::single(InterventionStep {
        hook: HookPoint::ResidPost { layer: 0 },
        positions: vec![99],
        action: Action::AddVector {
            v: Array1::zeros(cfg.d_model),
            alpha: 1.0,
        },
    });
    assert!(matches!(
        forward_hooked(&ckpt, &ids, &BTreeSet::new(), Some(&bad_pos)),
        Err(Error::PositionOutOfRange { .. })
    ));
    let bad_hook = InterventionPlan::single(InterventionStep {
        hook: HookPoint::AttnPattern { layer: 0 },
        positions: vec![0],
        action: Action::AddVector {
            v: Array1::zeros(cfg.d_model),
            alpha: 1.0,
        },
    });
    assert!(matches!(
        forward_hooked(&ckpt, &ids, &BTreeSet::new(), Some(&bad_hook)),
        Err(Error::UnsupportedIntervention)
    ));
}

#[test]
fn logit_diff_identities() {
    let trace = ForwardTrace {
        logits: array![[1.0f32, 2.5, 0.0]],
        captured: Default::default(),
    };
    assert_eq!(logit_diff(&trace, 1, 1, 0).unwrap(), 0.0);
    assert_eq!(logit_diff(&trace, 1, 0, 0).unwrap(), 1.5);
    assert_eq!(
        logit_diff(&trace, 0, 1, 0).unwrap(),
        -logit_diff(&trace, 1, 0, 0).unwrap()
    );
    assert!(logit_diff(&trace, 0, 1, 5).is_err());
    assert!(logit_diff(&trace, 9, 1, 0).is_err());
}

#[test]
fn greedy_generation_contract() {
    let cfg = tiny_cfg(40);
    let ckpt = random_checkpoint(&cfg, 15);
    let prompt = random_seq(40, 5, 11);
    let a = generate_greedy(&ckpt, &prompt, 6, &[1], None).unwrap();
    let b = generate_greedy(&ckpt, &prompt, 6, &[1], None).unwrap();
    assert_eq!(a, b, "greedy decoding must be deterministic");

    // Prompt already ending in a stop token yields an empty continuation.
    let mut stopped = prompt.clone();
    stopped.push(1);
    assert!(generate_greedy(&ckpt, &stopped, 6, &[1], None)
        .unwrap()
        .is_empty());

    // All-equal logits break ties toward the lowest token id.
    let mut tied = random_checkpoint(&cfg, 16);
    let layout = tied.layout();
    tied.params.view_mut(layout.unembed).fill(0.0);
    let out = generate_greedy(&tied, &prompt, 3, &[], None).unwrap();
    assert_eq!(out, vec![0, 0, 0]);

    // Prompt + max_new must fit the context window.
    assert!(matches!(
        generate_greedy(&ckpt, &prompt, 100, &[], None),
        Err(Error::SequenceTooLong { .. })
    ));
}

#[test]
fn checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(40);
    let mut ckpt = random_checkpoint(&cfg, 17);
    ckpt.meta = Some(TrainingMeta {
        steps: 5,
        final_loss: 1.25,
        seed: 17,
        phase: Phase::Base,
    });
    ckpt.save(dir.path(), "m").unwrap();
    let loaded = ModelCheckpoint::load(dir.path(), "m").unwrap();
    assert_eq!(loaded.params.data, ckpt.params.data);
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.meta.unwrap().steps, 5);
}

#[test]
fn gradients_match_finite_differences_smoke() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_mlp: 12,
        vocab_size: 20,
        max_seq_len: 8,
        norm_eps: 1e-5,
    };
    let params = init_params(&cfg, 21).to_f64();
    let seqs: Vec<Vec<u32>> = (0..2).map(|i| random_seq(20, 7, 30 + i)).collect();
    let batch: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (_, grads) = loss_and_grads::<f64>(&cfg, &params, &batch).unwrap();

    let layout = Layout::new(&cfg);
    use rand::Rng;
    let mut r = rng::stream(0, "test.gradcheck");
    for (name, slot) in layout.tensor_table() {
        let idx = slot.offset + r.random_range(0..slot.len());
        let h = 1e-5 * params.data[idx].abs().max(1.0);
        let mut plus = params.clone();
        plus.data[idx] += h;
        let mut minus = params.clone();
        minus.data[idx] -= h;
        let (lp, _) = loss_and_grads::<f64>(&cfg, &plus, &batch).unwrap();
        let (lm, _) = loss_and_grads::<f64>(&cfg, &minus, &batch).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.data[idx];
        let denom = fd.abs().max(an.abs());
        if denom > 1e-10 {
            let rel = (fd - an).abs() / denom;
            assert!(rel < 1e-4, "{name}[{idx}] rel err {rel} (fd {fd}, an {an})");
        }
    }
}
