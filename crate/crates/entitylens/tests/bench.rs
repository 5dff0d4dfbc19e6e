//! Manual throughput probe (ignored by default):
//! `cargo test -p entitylens --test bench -- --ignored --nocapture`

use entitylens::model::{loss_and_grads, init_params, ModelConfig};

fn step_time(cfg: &ModelConfig, batch: usize, seq: usize) -> f64 {
    let params = init_params(cfg, 0);
    let seqs: Vec<Vec<u32>> = (0..batch)
        .map(|i| (0..seq).map(|t| ((i * 31 + t * 7) % cfg.vocab_size) as u32).collect())
        .collect();
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let _ = loss_and_grads::<f32>(cfg, &params, &refs).unwrap();
    let n = 10;
    let t0 = std::time::Instant::now();
    for _ in 0..n {
        let _ = loss_and_grads::<f32>(cfg, &params, &refs).unwrap();
    }
    t0.elapsed().as_secs_f64() / n as f64
}

#[test]
#[ignore]
fn bench_train_step() {
    for (name, layers, d, heads, mlp) in [
        ("4L-64d", 4usize, 64usize, 4usize, 256usize),
        ("6L-64d", 6, 64, 4, 256),
        ("6L-128d", 6, 128, 8, 512),
    ] {
        let cfg = ModelConfig {
            n_layers: layers,
            d_model: d,
            n_heads: heads,
            d_head: d / heads,
            d_mlp: mlp,
            vocab_size: 600,
            max_seq_len: 48,
            norm_eps: 1e-5,
        };
        for (batch, seq) in [(32, 18), (48, 18)] {
            let t = step_time(&cfg, batch, seq);
            println!("{name} batch={batch} seq={seq}: {:.1} ms/step -> {:.0} steps/min", t * 1e3, 60.0 / t);
        }
    }
}
