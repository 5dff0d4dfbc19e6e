use ndarray::{array, Array1, Array2, Axis};
use rand::Rng;

use super::*;
use crate::rng as seeded;
use crate::store::{ActivationShard, RowMeta};
use crate::world::EntityType;

fn shard_from_rows(rows: Array2<f32>) -> ActivationShard {
    let meta = (0..rows.nrows())
        .map(|i| RowMeta {
            prompt_id: format!("r{i}"),
            entity_id: None,
            position: 0,
            etype: Some(EntityType::Player),
            class: None,
            split: None,
        })
        .collect();
    ActivationShard {
        layer: 0,
        d_model: rows.ncols(),
        rows,
        meta,
    }
}

fn hand_params() -> SaeParams<f64> {
    // d_model = 2, d_sae = 2 (loose dims; config validation is not invoked).
    SaeParams {
        w_enc: array![[1.0, 0.0], [0.0, 1.0]],
        b_enc: array![0.0, 0.0],
        w_dec: array![[1.0, 0.0], [0.0, 1.0]],
        b_dec: array![0.0, 0.0],
        theta: array![1.0, 1.0],
    }
}

#[test]
fn encode_is_jumprelu_with_strict_threshold() {
    let p = hand_params();
    // Componentwise rule from the identity encoder.
    assert_eq!(p.encode(array![2.0, 0.5].view()), array![2.0, 0.0]);
    // Exactly at the threshold: H(0) = 0.
    assert_eq!(p.encode(array![1.0, 1.0].view()), array![0.0, 0.0]);
    // Zero input with positive thresholds stays silent.
    assert_eq!(p.encode(array![0.0, 0.0].view()), array![0.0, 0.0]);
}

#[test]
fn decode_is_affine_in_the_code() {
    let mut p = hand_params();
    p.b_dec = array![0.25, -0.5];
    assert_eq!(p.decode(array![0.0, 0.0].view()), p.b_dec);
    // One-hot code scales a single decoder row.
    assert_eq!(p.decode(array![3.0, 0.0].view()), array![3.25, -0.5]);
    // decode(a + delta e_j) - decode(a) = delta * w_dec[j]: the
    // latent-increment / steering identity, exact.
    let a = array![0.7, -1.2];
    let mut a2 = a.clone();
    a2[1] += 2.5;
    let diff = p.decode(a2.view()) - p.decode(a.view());
    assert_eq!(diff, array![0.0, 2.5]);
}

#[test]
fn loss_matches_hand_cases() {
    // d=1 via a single-column encoder: x=(2) -> a=2 -> xhat=1.
    let p = SaeParams {
        w_enc: array![[1.0]],
        b_enc: array![0.0],
        w_dec: array![[0.5]],
        b_dec: array![0.0],
        theta: array![0.0],
    };
    let l = p.loss(array![2.0].view(), 0.5);
    assert_eq!(l.recon, 1.0);
    assert_eq!(l.l0, 1.0);
    assert_eq!(l.total, 1.5);

    // Perfect reconstruction with five active latents at lambda = 0.01.
    let five = SaeParams {
        w_enc: array![[1.0, 1.0, 1.0, 1.0, 1.0]],
        b_enc: Array1::zeros(5),
        w_dec: array![[0.2], [0.2], [0.2], [0.2], [0.2]],
        b_dec: array![0.0],
        theta: Array1::zeros(5),
    };
    let l = five.loss(array![1.0].view(), 0.01);
    assert!(l.recon < 1e-24);
    assert_eq!(l.l0, 5.0);
    assert!((l.total - 0.05).abs() < 1e-12);

    // lambda = 0 reduces to the reconstruction term.
    let l0 = p.loss(array![2.0].view(), 0.0);
    assert_eq!(l0.total, l0.recon);
}

fn random_params(seed: u64, d: usize, f: usize) -> SaeParams<f64> {
    let mut r = seeded::stream(seed, "sae.test");
    let mut mat = |rows: usize, cols: usize| {
        Array2::from_shape_fn((rows, cols), |_| crate::model::math_normal(&mut r) * 0.5)
    };
    let w_enc = mat(d, f);
    let w_dec = mat(f, d);
    let mut r2 = seeded::stream(seed + 1, "sae.test");
    SaeParams {
        w_enc,
        b_enc: Array1::from_shape_fn(f, |_| crate::model::math_normal(&mut r2) * 0.1),
        w_dec,
        b_dec: Array1::from_shape_fn(d, |_| crate::model::math_normal(&mut r2) * 0.1),
        theta: Array1::from_shape_fn(f, |_| crate::model::math_normal(&mut r2).abs() * 0.2),
    }
}

#[test]
fn raising_theta_only_deactivates() {
    for seed in 0..20u64 {
        let mut p = random_params(seed, 6, 24);
        let mut r = seeded::stream(seed, "sae.x");
        let x = Array1::from_shape_fn(6, |_| crate::model::math_normal(&mut r));
        let before = p.encode(x.view());
        let bump = Array1::from_shape_fn(24, |_| crate::model::math_normal(&mut r).abs() * 0.3);
        p.theta = &p.theta + &bump;
        let after = p.encode(x.view());
        for j in 0..24 {
            if after[j] > 0.0 {
                assert!(
                    before[j] > 0.0,
                    "raising theta activated latent {j} (seed {seed})"
                );
            }
        }
    }
}

#[test]
fn decode_encode_is_piecewise_affine() {
    let p = random_params(3, 5, 20);
    let x0 = array![0.9, -0.4, 0.3, 1.1, -0.7];
    let active = |x: &Array1<f64>| {
        p.encode(x.view())
            .iter()
            .map(|&v| v > 0.0)
            .collect::<Vec<_>>()
    };
    // Numerical Jacobian of decode(encode(.)) at two nearby points with the
    // same active set must match exactly (constant within a region).
    let jac = |x: &Array1<f64>| {
        let h = 1e-6;
        let mut j = Array2::<f64>::zeros((5, 5));
        for c in 0..5 {
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            assert_eq!(active(&xp), active(&xm), "active set changed inside FD");
            let fp = p.decode(p.encode(xp.view()).view());
            let fm = p.decode(p.encode(xm.view()).view());
            for r in 0..5 {
                j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        j
    };
    let x1 = &x0 + &Array1::from_elem(5, 1e-4);
    assert_eq!(active(&x0), active(&x1), "test points must share a region");
    let (j0, j1) = (jac(&x0), jac(&x1));
    let max_diff = (&j0 - &j1).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    assert!(max_diff < 1e-7, "Jacobian drifted by {max_diff}");
}

#[test]
fn reconstruction_lies_in_active_decoder_span() {
    let p = random_params(5, 4, 16);
    let x = array![0.8, -0.2, 0.5, 0.1];
    let a = p.encode(x.view());
    let active: Vec<usize> = (0..16).filter(|&j| a[j] > 0.0).collect();
    assert!(!active.is_empty(), "pick another seed: nothing active");
    let y = p.decode(a.view()) - &p.b_dec;
    // Least squares onto active rows via normal equations.
    let k = active.len();
    let mut basis = Array2::<f64>::zeros((k, 4));
    for (r, &j) in active.iter().enumerate() {
        basis.row_mut(r).assign(&p.w_dec.row(j));
    }
    let gram = basis.dot(&basis.t());
    let rhs = basis.dot(&y);
    let coef = solve_small(&gram, &rhs);
    let resid = &y - &basis.t().dot(&coef);
    let norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm <= 1e-6, "residual {norm} outside active span");
}

fn solve_small(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    // Gaussian elimination with partial pivoting; dimensions stay tiny.
    let n = b.len();
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).unwrap())
            .unwrap();
        if m[(pivot, col)].abs() < 1e-12 {
            continue;
        }
        if pivot != col {
            for c in 0..n {
                m.swap((col, c), (pivot, c));
            }
            rhs.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = m[(row, col)] / m[(col, col)];
            for c in col..n {
                m[(row, c)] -= f * m[(col, c)];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = Array1::<f64>::zeros(n);
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for c in row + 1..n {
            acc -= m[(row, c)] * x[c];
        }
        x[row] = if m[(row, row)].abs() < 1e-12 { 0.0 } else { acc / m[(row, row)] };
    }
    x
}

#[test]
fn gradients_match_finite_differences_off_threshold() {
    let p = random_params(11, 4, 16);
    let mut r = seeded::stream(11, "sae.batch");
    let x = Array2::from_shape_fn((3, 4), |_| crate::model::math_normal(&mut r));
    let lambda = 0.01;
    let eps = 1e-3; // narrow kernel so sampled points sit outside it
    let (_, grads) = loss_and_grads::<f64>(&p, x.view(), lambda, eps);

    let loss_of = |p: &SaeParams<f64>| {
        let (l, _) = loss_and_grads::<f64>(p, x.view(), lambda, eps);
        l.total
    };
    let mut checked = 0;
    for k in 0..30 {
        let mut rr = seeded::substream(11, "sae.pick", k);
        let tensor = rr.random_range(0..4u32);
        let h = 1e-6;
        let (an, fd) = match tensor {
            0 => {
                let (i, j) = (rr.random_range(0..4), rr.random_range(0..16));
                let mut pp = p.clone();
                pp.w_enc[(i, j)] += h;
                let mut pm = p.clone();
                pm.w_enc[(i, j)] -= h;
                (grads.w_enc[(i, j)], (loss_of(&pp) - loss_of(&pm)) / (2.0 * h))
            }
            1 => {
                let j = rr.random_range(0..16);
                let mut pp = p.clone();
                pp.b_enc[j] += h;
                let mut pm = p.clone();
                pm.b_enc[j] -= h;
                (grads.b_enc[j], (loss_of(&pp) - loss_of(&pm)) / (2.0 * h))
            }
            2 => {
                let (i, j) = (rr.random_range(0..16), rr.random_range(0..4));
                let mut pp = p.clone();
                pp.w_dec[(i, j)] += h;
                let mut pm = p.clone();
                pm.w_dec[(i, j)] -= h;
                (grads.w_dec[(i, j)], (loss_of(&pp) - loss_of(&pm)) / (2.0 * h))
            }
            _ => {
                let j = rr.random_range(0..4);
                let mut pp = p.clone();
                pp.b_dec[j] += h;
                let mut pm = p.clone();
                pm.b_dec[j] -= h;
                (grads.b_dec[j], (loss_of(&pp) - loss_of(&pm)) / (2.0 * h))
            }
        };
        let denom = an.abs().max(fd.abs());
        if denom > 1e-9 {
            let rel = (an - fd).abs() / denom;
            assert!(rel < 1e-4, "tensor {tensor} rel err {rel}");
            checked += 1;
        }
    }
    assert!(checked >= 10, "too few informative samples ({checked})");
}

fn planted_shard(d: usize, n: usize, scale: f32, seed: u64) -> ActivationShard {
    // Rows are one of 8 fixed orthogonal directions (scaled basis vectors).
    let mut r = seeded::stream(seed, "sae.planted");
    let rows = Array2::from_shape_fn((n, d), |(i, j)| {
        let _ = i;
        let _ = j;
        0.0f32
    });
    let mut rows = rows;
    for i in 0..n {
        let k = r.random_range(0..8usize);
        rows[(i, k)] = scale;
    }
    shard_from_rows(rows)
}

#[test]
fn planted_dictionary_is_recovered() {
    let shard = planted_shard(16, 512, 3.0, 9);
    // The L0 penalty is rotation-invariant on dense codes, so escaping the
    // dense linear-autoencoder optimum needs a threshold squeeze: a kernel
    // wide enough to reach the pre-activation mass and a firm lambda.
    let cfg = SaeConfig {
        d_sae: 64,
        lambda: 1.5,
        ste_bandwidth: 4.0,
        lr: 5e-3,
        batch: 64,
        steps: 3500,
        seed: 4,
    };
    let (_, report, _) = train_sae(&shard, &cfg).unwrap();
    assert!(report.fvu < 0.02, "planted FVU {}", report.fvu);
    assert!(report.mean_l0 <= 2.0, "planted L0 {}", report.mean_l0);
}

#[test]
fn huge_lambda_collapses_to_the_mean() {
    let mut r = seeded::stream(13, "sae.noise");
    let rows = Array2::from_shape_fn((256, 8), |_| {
        2.0 + (crate::model::math_normal(&mut r) * 0.3) as f32
    });
    let shard = shard_from_rows(rows);
    // The kernel must reach the pre-activation mass (window ~ activation
    // scale), or latents sit where the L0 pseudo-gradient vanishes and never
    // die; most of the step budget is b_dec traveling to the mean afterward.
    let cfg = SaeConfig {
        d_sae: 32,
        lambda: 1e3,
        ste_bandwidth: 6.0,
        lr: 5e-3,
        batch: 64,
        steps: 7000,
        seed: 2,
    };
    let (params, report, _) = train_sae(&shard, &cfg).unwrap();
    assert!(report.mean_l0 < 0.5, "L0 should collapse, got {}", report.mean_l0);
    let mean = shard.rows.mean_axis(Axis(0)).unwrap();
    let err: f32 = params
        .b_dec
        .iter()
        .zip(mean.iter())
        .map(|(&b, &m)| (b - m).abs())
        .fold(0.0, f32::max);
    assert!(err < 0.3, "b_dec should approach the data mean (max err {err})");
}

#[test]
fn zero_shard_cannot_resample() {
    let shard = shard_from_rows(Array2::zeros((64, 8)));
    let cfg = SaeConfig {
        d_sae: 32,
        lambda: 0.01,
        ste_bandwidth: 0.05,
        lr: 1e-3,
        batch: 16,
        steps: 200,
        seed: 0,
    };
    assert!(matches!(
        train_sae(&shard, &cfg),
        Err(Error::AllDeadDictionary)
    ));
}

#[test]
fn decoder_rows_stay_in_band_and_training_is_deterministic() {
    let shard = planted_shard(16, 256, 2.0, 21);
    let cfg = SaeConfig {
        d_sae: 64,
        lambda: 0.02,
        ste_bandwidth: 0.04,
        lr: 2e-3,
        batch: 64,
        steps: 300,
        seed: 6,
    };
    let (p1, _, logs1) = train_sae(&shard, &cfg).unwrap();
    let (p2, _, logs2) = train_sae(&shard, &cfg).unwrap();
    assert_eq!(p1.w_dec, p2.w_dec);
    assert_eq!(p1.theta, p2.theta);
    assert_eq!(logs1.len(), logs2.len());
    for j in 0..64 {
        let n = p1.decoder_row_norm(j);
        assert!((0.5 - 1e-4..=2.0 + 1e-4).contains(&n), "row {j} norm {n}");
        assert!(p1.theta[j] >= 0.0);
    }
}

#[test]
fn config_validation_rejects_bad_dims() {
    let cfg = SaeConfig {
        d_sae: 8,
        lambda: 0.01,
        ste_bandwidth: 0.05,
        lr: 1e-3,
        batch: 16,
        steps: 10,
        seed: 0,
    };
    assert!(cfg.validate(2).is_ok());
    assert!(cfg.validate(8).is_err());
    let mut bad = cfg;
    bad.lambda = 0.0;
    assert!(bad.validate(2).is_err());
}

#[test]
fn sae_round_trips_through_the_container() {
    let dir = tempfile::tempdir().unwrap();
    let shard = planted_shard(16, 128, 2.0, 30);
    let cfg = SaeConfig {
        d_sae: 64,
        lambda: 0.02,
        ste_bandwidth: 0.04,
        lr: 2e-3,
        batch: 32,
        steps: 50,
        seed: 8,
    };
    let (params, _, _) = train_sae(&shard, &cfg).unwrap();
    save_sae(&params, 3, dir.path(), "sae_l3").unwrap();
    let (loaded, layer) = load_sae(dir.path(), "sae_l3").unwrap();
    assert_eq!(layer, 3);
    assert_eq!(loaded.w_enc, params.w_enc);
    assert_eq!(loaded.theta, params.theta);
}
