//! Manual SAE hyperparameter probe:
//! `cargo test -p entitylens --test sae_tune -- --ignored --nocapture`

use entitylens::sae::{train_sae, SaeConfig};
use entitylens::store::{ActivationShard, RowMeta};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

fn shard_from_rows(rows: Array2<f32>) -> ActivationShard {
    let meta = (0..rows.nrows())
        .map(|i| RowMeta {
            prompt_id: format!("r{i}"),
            entity_id: None,
            position: 0,
            etype: None,
            class: None,
            split: None,
        })
        .collect();
    ActivationShard { layer: 0, d_model: rows.ncols(), rows, meta }
}

#[test]
#[ignore]
fn tune_planted() {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut rows = Array2::<f32>::zeros((512, 16));
    for i in 0..512 {
        let k = r.random_range(0..8usize);
        rows[(i, k)] = 3.0;
    }
    let shard = shard_from_rows(rows);
    for (lambda, eps, steps, lr, seed) in [
        (1.0, 4.0, 3500, 5e-3, 4u64),
        (1.5, 4.0, 3500, 5e-3, 4),
        (1.5, 5.0, 3500, 5e-3, 4),
        (2.0, 5.0, 3500, 5e-3, 4),
        (2.0, 4.0, 3500, 5e-3, 4),
        (3.0, 5.0, 3500, 5e-3, 4),
    ] {
        let cfg = SaeConfig { d_sae: 64, lambda, ste_bandwidth: eps, lr, batch: 64, steps, seed };
        let (_, report, _) = train_sae(&shard, &cfg).unwrap();
        println!(
            "lambda={lambda} eps={eps} steps={steps} lr={lr} seed={seed}: fvu={:.4} l0={:.2} dead={} resampled={}",
            report.fvu, report.mean_l0, report.dead_latents, report.resampled
        );
    }
}

#[test]
#[ignore]
fn tune_degenerate() {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(13);
    let rows = Array2::from_shape_fn((256, 8), |_| 2.0 + 0.3 * (r.random::<f32>() - 0.5));
    let shard = shard_from_rows(rows);
    for eps in [0.1, 1.0, 3.0, 6.0] {
        let cfg = SaeConfig { d_sae: 32, lambda: 1e3, ste_bandwidth: eps, lr: 3e-3, batch: 64, steps: 400, seed: 2 };
        let (params, report, _) = train_sae(&shard, &cfg).unwrap();
        let mean = 2.0f32;
        let err = params.b_dec.iter().map(|&b| (b - mean).abs()).fold(0.0f32, f32::max);
        println!("eps={eps}: l0={:.3} fvu={:.3} bdec_err={err:.3}", report.mean_l0, report.fvu);
    }
}
