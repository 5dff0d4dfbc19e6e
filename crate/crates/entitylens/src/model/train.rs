//! Next-token training: packed-batch forward/backward with hand-derived
//! gradients, Adam, and seeded batch order. Generic over f32/f64 so gradient
//! checks run in f64 on the exact same code path used for training.

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{ModelCheckpoint, Phase, TrainingMeta};
use super::config::ModelConfig;
use super::math::{
    causal_softmax_inplace, cross_entropy, gelu, gelu_prime, layer_norm, layer_norm_backward,
    softmax_backward_rows,
};
use super::params::{init_params, Layout, ParamVec};
use super::Flt;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Fraction of steps with linear learning-rate warmup.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    /// Global gradient-norm clip.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_warmup() -> f64 {
    0.05
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
}

struct LayerCache<F> {
    xhat1: Array2<F>,
    inv1: Array1<F>,
    h1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// One [S, S] pattern per (batch element, head), index b * n_heads + head.
    patterns: Vec<Array2<F>>,
    z: Array2<F>,
    xhat2: Array2<F>,
    inv2: Array1<F>,
    h2: Array2<F>,
    u: Array2<F>,
    a: Array2<F>,
}

struct FinalCache<F> {
    hf: Array2<F>,
    xhatf: Array2<F>,
    invf: Array1<F>,
}

/// Packed-batch forward shared by training and the logits helper.
fn packed_forward<F: Flt>(
    cfg: &ModelConfig,
    params: &ParamVec<F>,
    seqs: &[&[u32]],
) -> Result<(Array2<F>, Vec<LayerCache<F>>, FinalCache<F>)> {
    let layout = Layout::new(cfg);
    let b = seqs.len();
    let s_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    if s_max == 0 || b == 0 {
        return Err(Error::InvalidConfig("empty training batch".into()));
    }
    if s_max > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: s_max,
            max: cfg.max_seq_len,
        });
    }
    for seq in seqs {
        for &id in *seq {
            if id as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
        }
    }
    let n = b * s_max;
    let (d, n_heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    let eps = F::from_f64(cfg.norm_eps).unwrap();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt()).unwrap();
    let tok = params.view(layout.tok_embed);
    let pos = params.view(layout.pos_embed);
    let mut x = Array2::<F>::zeros((n, d));
    for (bi, seq) in seqs.iter().enumerate() {
        for (t, &id) in seq.iter().enumerate() {
            let mut row = x.row_mut(bi * s_max + t);
            row.assign(&tok.row(id as usize));
            row += &pos.row(t);
        }
    }

    let mut caches: Vec<LayerCache<F>> = Vec::with_capacity(cfg.n_layers);
    for slots in &layout.layers {
        let (h1, xhat1, inv1) = layer_norm(
            x.view(),
            params.vec_view(slots.ln1_w),
            params.vec_view(slots.ln1_b),
            eps,
        );
        let q = h1.dot(&params.view(slots.wq));
        let k = h1.dot(&params.view(slots.wk));
        let v = h1.dot(&params.view(slots.wv));
        let mut z = Array2::<F>::zeros((n, d));
        let mut patterns = Vec::with_capacity(b * n_heads);
        for bi in 0..b {
            let rows = s![bi * s_max..(bi + 1) * s_max, ..];
            for head in 0..n_heads {
                let cols = head * dh..(head + 1) * dh;
                let qh = q.slice(rows).slice_move(s![.., cols.clone()]);
                let kh = k.slice(rows).slice_move(s![.., cols.clone()]);
                let vh = v.slice(rows).slice_move(s![.., cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|v| v * scale);
                causal_softmax_inplace(&mut scores);
                let zh = scores.dot(&vh);
                z.slice_mut(rows)
                    .slice_mut(s![.., cols])
                    .assign(&zh);
                patterns.push(scores);
            }
        }
        let attn = z.dot(&params.view(slots.wo));
        x += &attn;
        let (h2, xhat2, inv2) = layer_norm(
            x.view(),
            params.vec_view(slots.ln2_w),
            params.vec_view(slots.ln2_b),
            eps,
        );
        let u = h2.dot(&params.view(slots.w_in));
        let a = u.mapv(gelu);
        let mlp = a.dot(&params.view(slots.w_out));
        x += &mlp;
        caches.push(LayerCache {
            xhat1,
            inv1,
            h1,
            q,
            k,
            v,
            patterns,
            z,
            xhat2,
            inv2,
            h2,
            u,
            a,
        });
    }
    let (hf, xhatf, invf) = layer_norm(
        x.view(),
        params.vec_view(layout.lnf_w),
        params.vec_view(layout.lnf_b),
        eps,
    );
    let logits = hf.dot(&params.view(layout.unembed));
    Ok((logits, caches, FinalCache { hf, xhatf, invf }))
}

/// Train-path logits for one sequence (test oracle for path consistency).
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn forward_logits<F: Flt>(
    cfg: &ModelConfig,
    params: &ParamVec<F>,
    ids: &[u32],
) -> Result<Array2<F>> {
    let (logits, _, _) = packed_forward(cfg, params, &[ids])?;
    Ok(logits)
}

/// Mean next-token cross-entropy over the batch plus parameter gradients.
pub fn loss_and_grads<F: Flt>(
    cfg: &ModelConfig,
    params: &ParamVec<F>,
    seqs: &[&[u32]],
) -> Result<(f64, ParamVec<F>)> {
    let layout = Layout::new(cfg);
    let b = seqs.len();
    let s_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let (d, n_heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    let scale = F::from_f64(1.0 / (dh as f64).sqrt()).unwrap();
    let (logits, caches, final_cache) = packed_forward(cfg, params, seqs)?;
    let FinalCache { hf, xhatf, invf } = final_cache;
    let n = b * s_max;

    let mut targets: Vec<Option<u32>> = vec![None; n];
    for (bi, seq) in seqs.iter().enumerate() {
        for t in 0..seq.len().saturating_sub(1) {
            targets[bi * s_max + t] = Some(seq[t + 1]);
        }
    }
    let (loss, dlogits) = cross_entropy(&logits, &targets);

    // ---- backward ----
    let mut grads = ParamVec::<F>::zeros(layout.total);
    {
        let g_unembed = hf.t().dot(&dlogits);
        grads.add_into(layout.unembed, g_unembed.view());
    }
    let dhf = dlogits.dot(&params.view(layout.unembed).t());
    let mut dw = Array1::<F>::zeros(d);
    let mut db = Array1::<F>::zeros(d);
    let mut dx = layer_norm_backward(
        dhf.view(),
        &xhatf,
        &invf,
        params.vec_view(layout.lnf_w),
        &mut dw,
        &mut db,
    );
    grads
        .vec_view_mut(layout.lnf_w)
        .zip_mut_with(&dw.view(), |g, &v| *g = *g + v);
    grads
        .vec_view_mut(layout.lnf_b)
        .zip_mut_with(&db.view(), |g, &v| *g = *g + v);

    for (slots, cache) in layout.layers.iter().zip(&caches).rev() {
        // MLP branch: x2 = x1 + W_out(gelu(W_in(ln2(x1))))
        let dmlp = &dx;
        {
            let g_wout = cache.a.t().dot(dmlp);
            grads.add_into(slots.w_out, g_wout.view());
        }
        let da = dmlp.dot(&params.view(slots.w_out).t());
        let mut du = cache.u.mapv(gelu_prime);
        du.zip_mut_with(&da, |g, &d| *g = *g * d);
        {
            let g_win = cache.h2.t().dot(&du);
            grads.add_into(slots.w_in, g_win.view());
        }
        let dh2 = du.dot(&params.view(slots.w_in).t());
        let mut dw2 = Array1::<F>::zeros(d);
        let mut db2 = Array1::<F>::zeros(d);
        let dx1_from_mlp = layer_norm_backward(
            dh2.view(),
            &cache.xhat2,
            &cache.inv2,
            params.vec_view(slots.ln2_w),
            &mut dw2,
            &mut db2,
        );
        grads
            .vec_view_mut(slots.ln2_w)
            .zip_mut_with(&dw2.view(), |g, &v| *g = *g + v);
        grads
            .vec_view_mut(slots.ln2_b)
            .zip_mut_with(&db2.view(), |g, &v| *g = *g + v);
        let dx1 = &dx + &dx1_from_mlp;

        // Attention branch: x1 = x0 + z @ W_o
        {
            let g_wo = cache.z.t().dot(&dx1);
            grads.add_into(slots.wo, g_wo.view());
        }
        let dz = dx1.dot(&params.view(slots.wo).t());
        let mut dq = Array2::<F>::zeros((n, d));
        let mut dk = Array2::<F>::zeros((n, d));
        let mut dv = Array2::<F>::zeros((n, d));
        for bi in 0..b {
            let rows = s![bi * s_max..(bi + 1) * s_max, ..];
            for head in 0..n_heads {
                let cols = head * dh..(head + 1) * dh;
                let p = &cache.patterns[bi * n_heads + head];
                let dzh = dz.slice(rows).slice_move(s![.., cols.clone()]);
                let qh = cache.q.slice(rows).slice_move(s![.., cols.clone()]);
                let kh = cache.k.slice(rows).slice_move(s![.., cols.clone()]);
                let vh = cache.v.slice(rows).slice_move(s![.., cols.clone()]);
                let dp = dzh.dot(&vh.t());
                let dvh = p.t().dot(&dzh);
                let mut ds = softmax_backward_rows(p, &dp);
                ds.mapv_inplace(|v| v * scale);
                let dqh = ds.dot(&kh);
                let dkh = ds.t().dot(&qh);
                dq.slice_mut(rows)
                    .slice_mut(s![.., cols.clone()])
                    .assign(&dqh);
                dk.slice_mut(rows)
                    .slice_mut(s![.., cols.clone()])
                    .assign(&dkh);
                dv.slice_mut(rows).slice_mut(s![.., cols]).assign(&dvh);
            }
        }
        {
            let g_wq = cache.h1.t().dot(&dq);
            grads.add_into(slots.wq, g_wq.view());
            let g_wk = cache.h1.t().dot(&dk);
            grads.add_into(slots.wk, g_wk.view());
            let g_wv = cache.h1.t().dot(&dv);
            grads.add_into(slots.wv, g_wv.view());
        }
        let mut dh1 = dq.dot(&params.view(slots.wq).t());
        dh1 += &dk.dot(&params.view(slots.wk).t());
        dh1 += &dv.dot(&params.view(slots.wv).t());
        let mut dw1 = Array1::<F>::zeros(d);
        let mut db1 = Array1::<F>::zeros(d);
        let dx0_from_attn = layer_norm_backward(
            dh1.view(),
            &cache.xhat1,
            &cache.inv1,
            params.vec_view(slots.ln1_w),
            &mut dw1,
            &mut db1,
        );
        grads
            .vec_view_mut(slots.ln1_w)
            .zip_mut_with(&dw1.view(), |g, &v| *g = *g + v);
        grads
            .vec_view_mut(slots.ln1_b)
            .zip_mut_with(&db1.view(), |g, &v| *g = *g + v);
        dx = dx1 + dx0_from_attn;
    }

    // Embedding scatter.
    {
        let mut g_tok = Array2::<F>::zeros((cfg.vocab_size, d));
        let mut g_pos = Array2::<F>::zeros((cfg.max_seq_len, d));
        for (bi, seq) in seqs.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                let drow = dx.row(bi * s_max + t);
                g_tok
                    .row_mut(id as usize)
                    .zip_mut_with(&drow, |g, &v| *g = *g + v);
                g_pos.row_mut(t).zip_mut_with(&drow, |g, &v| *g = *g + v);
            }
        }
        grads.add_into(layout.tok_embed, g_tok.view());
        grads.add_into(layout.pos_embed, g_pos.view());
    }
    Ok((loss, grads))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamVec<f32>, grads: &ParamVec<f32>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.data.len() {
            let g = f64::from(grads.data[i]);
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
            params.data[i] -= update as f32;
        }
    }
}

fn grad_norm(grads: &ParamVec<f32>) -> f64 {
    grads
        .data
        .iter()
        .map(|&g| f64::from(g) * f64::from(g))
        .sum::<f64>()
        .sqrt()
}

/// Train (or fine-tune, when `init` is given) a next-token model on the
/// corpus. Deterministic for a fixed seed.
pub fn train_lm(
    cfg: &ModelConfig,
    corpus: &[Vec<u32>],
    hyper: &TrainHyper,
    init: Option<&ModelCheckpoint>,
) -> Result<(ModelCheckpoint, Vec<StepLog>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("empty corpus".into()));
    }
    for seq in corpus {
        if seq.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: cfg.max_seq_len,
            });
        }
    }
    let mut params = match init {
        Some(ckpt) => {
            if ckpt.config != *cfg {
                return Err(Error::InvalidConfig(
                    "fine-tune init checkpoint config differs from target config".into(),
                ));
            }
            ckpt.params.clone()
        }
        None => init_params(cfg, hyper.seed),
    };

    let mut adam = Adam::new(params.data.len());
    let warmup = ((hyper.steps as f64) * hyper.warmup_frac).ceil().max(1.0);
    let mut logs = Vec::with_capacity(hyper.steps);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = usize::MAX; // force initial shuffle

    for step in 0..hyper.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng::substream(hyper.seed, "lm.batches", epoch));
            epoch += 1;
            cursor = 0;
        }
        let take = hyper.batch.min(order.len() - cursor);
        let batch: Vec<&[u32]> = order[cursor..cursor + take]
            .iter()
            .map(|&i| corpus[i].as_slice())
            .collect();
        cursor += take;

        let (loss, mut grads) = loss_and_grads::<f32>(cfg, &params, &batch)?;
        let norm = grad_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                loss,
                grad_norm: norm,
            });
        }
        if norm > hyper.grad_clip {
            let s = (hyper.grad_clip / norm) as f32;
            for g in &mut grads.data {
                *g *= s;
            }
        }
        let lr = hyper.lr * ((step as f64 + 1.0) / warmup).min(1.0);
        adam.step(&mut params, &grads, lr);
        logs.push(StepLog { step, loss });
    }

    if !params.is_finite() {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    let final_loss = logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
    Ok((
        ModelCheckpoint {
            config: *cfg,
            params,
            meta: Some(TrainingMeta {
                steps: hyper.steps,
                final_loss,
                seed: hyper.seed,
                phase: if init.is_some() { Phase::Chat } else { Phase::Base },
            }),
        },
        logs,
    ))
}
