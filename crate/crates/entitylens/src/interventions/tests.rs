use std::collections::BTreeMap;

use ndarray::array;

use super::*;
use crate::model::{random_checkpoint, ModelConfig};
use crate::rng as seeded;
use crate::world::{generate_world, render_probe_prompts, standard_tokenizer, EntityType};

fn fixture() -> (ModelCheckpoint, Vec<PromptRecord>, Tokenizer) {
    let tok = standard_tokenizer();
    let counts: BTreeMap<EntityType, usize> = EntityType::ALL.iter().map(|&e| (e, 8)).collect();
    let world = generate_world(17, &counts).unwrap();
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_mlp: 32,
        vocab_size: tok.vocab_size(),
        max_seq_len: 32,
        norm_eps: 1e-5,
    };
    (
        random_checkpoint(&cfg, 2),
        render_probe_prompts(&world),
        tok,
    )
}

fn unit_direction(d: usize, seed: u64) -> Array1<f32> {
    let mut r = seeded::stream(seed, "iv.dir");
    let mut v = Array1::from_shape_fn(d, |_| crate::model::math_normal(&mut r) as f32);
    let norm = v.iter().map(|&x| x * x).sum::<f32>().sqrt();
    v.mapv_inplace(|x| x / norm);
    v
}

#[test]
fn zero_alpha_steering_is_a_noop() {
    let (ckpt, records, tok) = fixture();
    let spec = SteeringSpec {
        latent: LatentId { layer: 1, index: 0 },
        direction: unit_direction(16, 0),
        alpha: 0.0,
        positions: SteerPositions::EntityOnly,
    };
    let record = &records[0];
    let ids = tok.encode(&record.text).unwrap();
    let baseline = forward_hooked(&ckpt, &ids, &Default::default(), None).unwrap();
    let steered = steer(&ckpt, record, &tok, &spec, &Default::default()).unwrap();
    let max_diff = (&baseline.logits - &steered.logits)
        .iter()
        .fold(0f32, |m, &d| m.max(d.abs()));
    assert!(max_diff <= 1e-6);
}

#[test]
fn non_unit_directions_are_rejected() {
    let (ckpt, records, tok) = fixture();
    let spec = SteeringSpec {
        latent: LatentId { layer: 0, index: 0 },
        direction: Array1::from_elem(16, 1.0),
        alpha: 1.0,
        positions: SteerPositions::EntityOnly,
    };
    assert!(matches!(
        steer(&ckpt, &records[0], &tok, &spec, &Default::default()),
        Err(Error::NotUnitNorm(_))
    ));
}

#[test]
fn orthogonalize_hand_case_idempotence_and_alignment() {
    let (ckpt, _, _) = fixture();
    // Hand case: projecting out e1 zeroes the first coordinate of a row.
    let mut d = Array1::<f32>::zeros(16);
    d[0] = 1.0;
    let row = array![3.0f32, 4.0, 0.0, 0.0];
    let dot = row[0];
    let projected: Vec<f32> = (0..4).map(|i| row[i] - dot * if i == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(projected, vec![0.0, 4.0, 0.0, 0.0]);

    let ortho = orthogonalize_weights(&ckpt, &d).unwrap();
    assert!(max_residual_alignment(&ortho, &d) <= 1e-6);
    // Original untouched.
    assert!(max_residual_alignment(&ckpt, &d) > 1e-4);

    // Idempotent within 1e-7.
    let twice = orthogonalize_weights(&ortho, &d).unwrap();
    let max_diff = ortho
        .params
        .data
        .iter()
        .zip(&twice.params.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);
    assert!(max_diff <= 1e-7);

    // Random direction too.
    let dir = unit_direction(16, 3);
    let ortho2 = orthogonalize_weights(&ckpt, &dir).unwrap();
    assert!(max_residual_alignment(&ortho2, &dir) <= 1e-6);
}

#[test]
fn clean_into_clean_patch_recovers_one() {
    let (ckpt, records, tok) = fixture();
    let record = &records[3];
    let ids = tok.encode(&record.text).unwrap();
    let hook = HookPoint::ResidPost { layer: 1 };
    let capture: std::collections::BTreeSet<HookPoint> = [hook].into_iter().collect();
    let clean = forward_hooked(&ckpt, &ids, &capture, None).unwrap();
    let spec = PatchSpec {
        hook,
        position: 4,
        clean_trace: &clean,
        token_a: 7,
        token_b: 11,
        metric_position: ids.len() - 1,
    };
    let outcome = activation_patch(&ckpt, &ids, &spec).unwrap();
    assert!((outcome.recovered.unwrap() - 1.0).abs() <= 1e-6);
    assert!((outcome.ld_patched - outcome.ld_clean).abs() <= 1e-6);
    assert!((outcome.ld_corr - outcome.ld_clean).abs() <= 1e-6);
}

#[test]
fn patching_corrupted_value_into_itself_is_the_baseline() {
    let (ckpt, records, tok) = fixture();
    // Two prompts with the same token length.
    let a = &records[0];
    let ids_a = tok.encode(&a.text).unwrap();
    let b = records
        .iter()
        .skip(1)
        .find(|r| tok.encode(&r.text).unwrap().len() == ids_a.len())
        .expect("need a token-aligned pair");
    let ids_b = tok.encode(&b.text).unwrap();

    let hook = HookPoint::ResidPost { layer: 0 };
    let capture: std::collections::BTreeSet<HookPoint> = [hook].into_iter().collect();
    let clean = forward_hooked(&ckpt, &ids_a, &capture, None).unwrap();
    let corr_trace = forward_hooked(&ckpt, &ids_b, &capture, None).unwrap();

    // Patch the corrupted run with its own captured value: metric equals the
    // corrupted baseline ratio.
    let spec = PatchSpec {
        hook,
        position: 2,
        clean_trace: &corr_trace,
        token_a: 7,
        token_b: 11,
        metric_position: ids_b.len() - 1,
    };
    let outcome = activation_patch(&ckpt, &ids_b, &spec).unwrap();
    let ld_clean_a = logit_diff(&clean, 7, 11, ids_a.len() - 1).unwrap();
    let expected_ratio = outcome.ld_corr / outcome.ld_clean;
    assert!((outcome.recovered.unwrap() - expected_ratio).abs() <= 1e-9);
    // ld_clean here is the corrupted trace's own diff, not prompt a's.
    assert!((outcome.ld_clean - outcome.ld_corr).abs() <= 1e-9);
    let _ = ld_clean_a;
}

#[test]
fn attention_values_are_probabilities() {
    let (ckpt, records, tok) = fixture();
    let heads: Vec<(usize, usize)> = vec![(1, 0), (2, 1)];
    let stats = attention_to_entity(&ckpt, &records[..12], &tok, &heads, None).unwrap();
    for s in &stats {
        assert_eq!(s.n, 12);
        for &v in &s.per_prompt {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((0.0..=1.0).contains(&s.mean));
    }

    // Steering with the unknown direction at the entity token changes the
    // patterns downstream but keeps them probabilities.
    let spec = SteeringSpec {
        latent: LatentId { layer: 0, index: 0 },
        direction: unit_direction(16, 5),
        alpha: 8.0,
        positions: SteerPositions::EntityOnly,
    };
    let steered = attention_to_entity(&ckpt, &records[..12], &tok, &heads, Some(&spec)).unwrap();
    for s in &steered {
        for &v in &s.per_prompt {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn logit_decomposition_is_additive() {
    let (ckpt, records, tok) = fixture();
    let ids = tok.encode(&records[5].text).unwrap();
    let decomp = logit_decomposition(&ckpt, &ids).unwrap();
    let mut total = decomp.constant.clone();
    for (_, c) in &decomp.components {
        total += c;
    }
    let max_err = total
        .iter()
        .zip(decomp.logits.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0f64, f64::max);
    assert!(max_err <= 1e-4, "decomposition misses logits by {max_err}");
}

#[test]
fn zero_head_output_ranks_by_token_id() {
    let (mut ckpt, records, tok) = fixture();
    // Zero one head's output block in W_o so its contribution vanishes.
    let layout = ckpt.layout();
    let slots = layout.layers[2].wo;
    {
        let mut wo = ckpt.params.view_mut(slots);
        for r in 0..8 {
            wo.row_mut(r).fill(0.0);
        }
    }
    let ids = tok.encode(&records[2].text).unwrap();
    let top = head_logit_attribution(&ckpt, &ids, 2, 0, 5).unwrap();
    let ids_only: Vec<u32> = top.iter().map(|(t, _)| *t).collect();
    assert_eq!(ids_only, vec![0, 1, 2, 3, 4]);
    for (_, v) in top {
        assert!(v.abs() <= 1e-9);
    }
}

#[test]
fn sweep_requires_sorted_alphas_and_reports_all_rows() {
    let (ckpt, records, tok) = fixture();
    let spec = SweepSpec {
        latent: LatentId { layer: 1, index: 0 },
        direction: unit_direction(16, 7),
        positions: SteerPositions::EntityOnly,
    };
    let eos = tok.specials().eos;
    let always_coherent = |_: &str| true;
    let never_refuses = |_: &str| false;
    let table = sweep_alpha(
        &ckpt,
        &records[..6],
        &tok,
        &spec,
        &[0.0, 1.0, 2.0],
        SweepObjective::RaiseRefusal { min_rate: 0.5 },
        0.9,
        4,
        &[eos],
        &never_refuses,
        &always_coherent,
    )
    .unwrap();
    assert_eq!(table.rows.len(), 3);
    assert!(table.rows.iter().all(|r| r.n == 6));
    assert_eq!(table.rows[0].alpha, 0.0);
    assert!(table.recommended.is_none(), "objective never met");

    assert!(sweep_alpha(
        &ckpt,
        &records[..2],
        &tok,
        &spec,
        &[2.0, 1.0],
        SweepObjective::RaiseRefusal { min_rate: 0.5 },
        0.9,
        4,
        &[eos],
        &never_refuses,
        &always_coherent,
    )
    .is_err());
}

#[test]
fn instruction_end_positions_cover_template_tail() {
    let tok = standard_tokenizer();
    let counts: BTreeMap<EntityType, usize> = EntityType::ALL.iter().map(|&e| (e, 8)).collect();
    let world = generate_world(23, &counts).unwrap();
    let labels: Vec<crate::world::KnownnessLabel> = world
        .entities
        .iter()
        .map(|e| crate::world::KnownnessLabel {
            entity_id: e.id,
            verdict: if e.designed_known {
                crate::world::Verdict::Known
            } else {
                crate::world::Verdict::Unknown
            },
            per_attribute_correct: vec![],
        })
        .collect();
    let splits = crate::world::SplitAssignment {
        schema_version: 1,
        seed: 0,
        assignment: world
            .entities
            .iter()
            .map(|e| (e.id, crate::world::Split::Test))
            .collect(),
    };
    let qs = crate::world::render_eval_questions(&world, &labels, &splits);
    let record = &qs[0].record;
    let ids = tok.encode(&record.text).unwrap();
    let got = resolve_positions(&SteerPositions::EntityAndInstructionEnd, record, &tok).unwrap();
    // Entity token plus </user> and <model> (adjacent at the prompt tail).
    assert_eq!(got.len(), 3);
    assert_eq!(got[1], ids.len() - 2);
    assert_eq!(got[2], ids.len() - 1);
    assert_eq!(ids[got[2]], tok.specials().assistant_start);
    assert_eq!(ids[got[1]], tok.specials().user_end);
}
