//! JumpReLU sparse autoencoder: encode/decode, the L2 + lambda*L0 objective,
//! and training with straight-through threshold gradients, dead-latent
//! resampling, and a bounded decoder dictionary.
//!
//! encode(x) = pre .* H(pre - theta) with pre = x W_enc + b_enc, strict
//! inequality (H(0) = 0); decode(a) = a W_dec + b_dec. For training, H' is
//! replaced by the rectangular kernel (1/eps) 1[|z| <= eps/2] wherever it
//! appears in the chain rule, so theta receives pseudo-gradients while other
//! parameters keep exact branch gradients away from the threshold.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, TensorEntry, CONTAINER_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::model::Flt;
use crate::rng;
use crate::store::{stream_batches, ActivationShard};

#[derive(Debug, Clone)]
pub struct SaeParams<F> {
    /// [d_model, d_sae]
    pub w_enc: Array2<F>,
    /// [d_sae]
    pub b_enc: Array1<F>,
    /// [d_sae, d_model]; rows are the latent directions.
    pub w_dec: Array2<F>,
    /// [d_model]
    pub b_dec: Array1<F>,
    /// [d_sae], non-negative thresholds.
    pub theta: Array1<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    pub d_sae: usize,
    /// Sparsity coefficient.
    pub lambda: f64,
    /// Width of the straight-through kernel (absolute units of pre-activation).
    pub ste_bandwidth: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl SaeConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.d_sae < 4 * d_model {
            return Err(Error::InvalidSaeConfig(format!(
                "d_sae {} must be >= 4 * d_model {}",
                self.d_sae, d_model
            )));
        }
        if self.lambda <= 0.0 || self.ste_bandwidth <= 0.0 || self.lr <= 0.0 {
            return Err(Error::InvalidSaeConfig(
                "lambda, ste_bandwidth and lr must be positive".into(),
            ));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::InvalidSaeConfig("batch and steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SaeLoss {
    pub total: f64,
    pub recon: f64,
    pub l0: f64,
}

impl<F: Flt> SaeParams<F> {
    pub fn d_model(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn encode(&self, x: ArrayView1<'_, F>) -> Array1<F> {
        let mut pre = x.dot(&self.w_enc) + &self.b_enc;
        for (p, &t) in pre.iter_mut().zip(self.theta.iter()) {
            if !(*p > t) {
                *p = F::zero();
            }
        }
        pre
    }

    pub fn encode_batch(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut pre = x.dot(&self.w_enc);
        for mut row in pre.rows_mut() {
            row += &self.b_enc;
            for (p, &t) in row.iter_mut().zip(self.theta.iter()) {
                if !(*p > t) {
                    *p = F::zero();
                }
            }
        }
        pre
    }

    pub fn decode(&self, a: ArrayView1<'_, F>) -> Array1<F> {
        a.dot(&self.w_dec) + &self.b_dec
    }

    pub fn decode_batch(&self, a: ArrayView2<'_, F>) -> Array2<F> {
        let mut out = a.dot(&self.w_dec);
        for mut row in out.rows_mut() {
            row += &self.b_dec;
        }
        out
    }

    /// total = ||x - decode(encode(x))||^2 + lambda * ||a||_0
    pub fn loss(&self, x: ArrayView1<'_, F>, lambda: f64) -> SaeLoss {
        let a = self.encode(x);
        let xhat = self.decode(a.view());
        let recon: f64 = x
            .iter()
            .zip(xhat.iter())
            .map(|(&xi, &xh)| {
                let d = (xi - xh).to_f64().unwrap();
                d * d
            })
            .sum();
        let l0 = a.iter().filter(|&&v| v > F::zero()).count() as f64;
        SaeLoss {
            total: recon + lambda * l0,
            recon,
            l0,
        }
    }

    /// Unit-normalized decoder row for latent `j`.
    pub fn latent_direction(&self, j: usize) -> Array1<F> {
        let row = self.w_dec.row(j);
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        row.mapv(|v| v / norm)
    }

    pub fn decoder_row_norm(&self, j: usize) -> f64 {
        self.w_dec
            .row(j)
            .iter()
            .map(|&v| v.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl SaeParams<f32> {
    pub fn to_f64(&self) -> SaeParams<f64> {
        SaeParams {
            w_enc: self.w_enc.mapv(f64::from),
            b_enc: self.b_enc.mapv(f64::from),
            w_dec: self.w_dec.mapv(f64::from),
            b_dec: self.b_dec.mapv(f64::from),
            theta: self.theta.mapv(f64::from),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SaeGrads<F> {
    pub w_enc: Array2<F>,
    pub b_enc: Array1<F>,
    pub w_dec: Array2<F>,
    pub b_dec: Array1<F>,
    pub theta: Array1<F>,
}

/// Batch-mean loss and gradients under the straight-through convention.
pub fn loss_and_grads<F: Flt>(
    params: &SaeParams<F>,
    x: ArrayView2<'_, F>,
    lambda: f64,
    ste_bandwidth: f64,
) -> (SaeLoss, SaeGrads<F>) {
    let b = x.nrows();
    let bf = F::from_usize(b).unwrap();
    let lam = F::from_f64(lambda).unwrap();
    let eps = F::from_f64(ste_bandwidth).unwrap();
    let half_eps = eps / F::from_f64(2.0).unwrap();
    let kernel_height = eps.recip();

    let mut pre = x.dot(&params.w_enc);
    for mut row in pre.rows_mut() {
        row += &params.b_enc;
    }
    let mut a = pre.clone();
    let mut kernel = Array2::<F>::zeros(pre.raw_dim());
    for ((mut a_row, pre_row), mut k_row) in a
        .rows_mut()
        .into_iter()
        .zip(pre.rows())
        .zip(kernel.rows_mut())
    {
        for ((av, &pv), (kv, &tv)) in a_row
            .iter_mut()
            .zip(pre_row.iter())
            .zip(k_row.iter_mut().zip(params.theta.iter()))
        {
            if !(pv > tv) {
                *av = F::zero();
            }
            if (pv - tv).abs() <= half_eps {
                *kv = kernel_height;
            }
        }
    }
    let mut xhat = a.dot(&params.w_dec);
    for mut row in xhat.rows_mut() {
        row += &params.b_dec;
    }
    let diff = &xhat - &x;
    let recon_total: f64 = diff.iter().map(|&d| d.to_f64().unwrap().powi(2)).sum();
    let l0_total: f64 = a
        .iter()
        .filter(|&&v| v > F::zero())
        .count() as f64;
    let loss = SaeLoss {
        recon: recon_total / b as f64,
        l0: l0_total / b as f64,
        total: recon_total / b as f64 + lambda * l0_total / b as f64,
    };

    // d(mean recon)/d xhat
    let ddiff = diff.mapv(|v| v * F::from_f64(2.0).unwrap() / bf);
    let g_wdec = a.t().dot(&ddiff);
    let g_bdec = ddiff.sum_axis(Axis(0));
    let da = ddiff.dot(&params.w_dec.t());

    let mut dpre = Array2::<F>::zeros(pre.raw_dim());
    let mut g_theta = Array1::<F>::zeros(params.theta.len());
    let lam_scaled = lam / bf;
    for i in 0..b {
        for j in 0..params.theta.len() {
            let pv = pre[(i, j)];
            let tv = params.theta[j];
            let kv = kernel[(i, j)];
            let active = pv > tv;
            let mut g = if active { da[(i, j)] } else { F::zero() };
            // H'(pre - theta) -> kernel, both in a = pre*H and in the L0 term.
            g = g + da[(i, j)] * pv * kv + lam_scaled * kv;
            dpre[(i, j)] = g;
            g_theta[j] = g_theta[j] - da[(i, j)] * pv * kv - lam_scaled * kv;
        }
    }
    let g_wenc = x.t().dot(&dpre);
    let g_benc = dpre.sum_axis(Axis(0));
    (
        loss,
        SaeGrads {
            w_enc: g_wenc,
            b_enc: g_benc,
            w_dec: g_wdec,
            b_dec: g_bdec,
            theta: g_theta,
        },
    )
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SaeStepLog {
    pub step: usize,
    pub recon: f64,
    pub l0: f64,
    pub fvu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaeTrainReport {
    pub fvu: f64,
    pub mean_l0: f64,
    pub dead_latents: usize,
    pub resampled: usize,
    pub activation_scale: f64,
}

/// Mean L2 row norm; the natural scale for the STE bandwidth.
pub fn activation_scale(rows: ArrayView2<'_, f32>) -> f64 {
    let n = rows.nrows().max(1);
    rows.axis_iter(Axis(0))
        .map(|r| r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

struct TensorAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl TensorAdam {
    fn new(n: usize) -> TensorAdam {
        TensorAdam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, p: &mut [f32], g: &[f32], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..p.len() {
            let gi = f64::from(g[i]);
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * gi;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * gi * gi;
            p[i] -= (lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS)) as f32;
        }
    }

    fn reset_at(&mut self, idx: &[usize]) {
        for &i in idx {
            self.m[i] = 0.0;
            self.v[i] = 0.0;
        }
    }
}

const THETA_INIT: f32 = 1e-3;
const DEC_NORM_MIN: f32 = 0.5;
const DEC_NORM_MAX: f32 = 2.0;

fn clamp_decoder_rows(w_dec: &mut Array2<f32>) {
    for mut row in w_dec.rows_mut() {
        let norm = row.iter().map(|&v| v * v).sum::<f32>().sqrt();
        if norm > 1e-12 && (norm < DEC_NORM_MIN || norm > DEC_NORM_MAX) {
            let target = norm.clamp(DEC_NORM_MIN, DEC_NORM_MAX);
            let s = target / norm;
            row.mapv_inplace(|v| v * s);
        }
    }
}

/// Train one SAE on a shard. Deterministic for a fixed config. Latents that
/// stay silent for a tenth of an epoch are resampled to random data
/// directions during the first 60% of training; lambda warms up linearly
/// over the first 10% of steps.
pub fn train_sae(
    shard: &ActivationShard,
    config: &SaeConfig,
) -> Result<(SaeParams<f32>, SaeTrainReport, Vec<SaeStepLog>)> {
    config.validate(shard.d_model)?;
    if shard.count() == 0 {
        return Err(Error::InvalidSaeConfig("empty shard".into()));
    }
    let d = shard.d_model;
    let f = config.d_sae;

    // W_dec rows unit-norm random, W_enc = W_dec^T, biases zero.
    let mut r = rng::stream(config.seed, "sae.init");
    let mut w_dec = Array2::<f32>::zeros((f, d));
    for mut row in w_dec.rows_mut() {
        let mut norm = 0f32;
        for v in row.iter_mut() {
            *v = crate::model::math_normal(&mut r) as f32;
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    let mut params = SaeParams {
        w_enc: w_dec.t().as_standard_layout().into_owned(),
        b_enc: Array1::zeros(f),
        w_dec,
        b_dec: Array1::zeros(d),
        theta: Array1::from_elem(f, THETA_INIT),
    };

    let mut adam_wenc = TensorAdam::new(d * f);
    let mut adam_benc = TensorAdam::new(f);
    let mut adam_wdec = TensorAdam::new(f * d);
    let mut adam_bdec = TensorAdam::new(d);
    let mut adam_theta = TensorAdam::new(f);

    let steps_per_epoch = shard.count().div_ceil(config.batch);
    // A tenth of an epoch, floored so tiny shards still give newborns a
    // fair audition before the next resample sweep.
    let dead_window = (steps_per_epoch.div_ceil(10)).max(50);
    let warmup_steps = ((config.steps as f64) * 0.1).ceil().max(1.0);
    let resample_cutoff = (config.steps as f64 * 0.6) as usize;

    let mut last_fired = vec![0usize; f];
    let mut resample_counter = 0u64;
    let mut resampled_total = 0usize;
    let mut logs = Vec::with_capacity(config.steps);
    let mut epoch = 0u64;
    let mut batches: Vec<Array2<f32>> = Vec::new();
    let mut batch_idx = 0usize;

    // Denominator for per-step FVU estimates.
    let shard_mean = shard.rows.mean_axis(Axis(0)).unwrap();
    let total_var: f64 = shard
        .rows
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(shard_mean.iter())
                .map(|(&v, &m)| (f64::from(v) - f64::from(m)).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / shard.count() as f64;

    for step in 0..config.steps {
        if batch_idx >= batches.len() {
            batches = stream_batches(shard, config.batch, config.seed.wrapping_add(epoch))?
                .collect();
            epoch += 1;
            batch_idx = 0;
        }
        let x = &batches[batch_idx];
        batch_idx += 1;

        let lambda_t = config.lambda * ((step as f64 + 1.0) / warmup_steps).min(1.0);
        let (loss, grads) = loss_and_grads::<f32>(
            &params,
            x.view(),
            lambda_t,
            config.ste_bandwidth,
        );
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: loss.total,
                grad_norm: f64::NAN,
            });
        }

        adam_wenc.step(
            params.w_enc.as_slice_mut().unwrap(),
            grads.w_enc.as_slice().unwrap(),
            config.lr,
        );
        adam_benc.step(
            params.b_enc.as_slice_mut().unwrap(),
            grads.b_enc.as_slice().unwrap(),
            config.lr,
        );
        adam_wdec.step(
            params.w_dec.as_slice_mut().unwrap(),
            grads.w_dec.as_slice().unwrap(),
            config.lr,
        );
        adam_bdec.step(
            params.b_dec.as_slice_mut().unwrap(),
            grads.b_dec.as_slice().unwrap(),
            config.lr,
        );
        adam_theta.step(
            params.theta.as_slice_mut().unwrap(),
            grads.theta.as_slice().unwrap(),
            config.lr,
        );
        params.theta.mapv_inplace(|t| t.max(0.0));
        clamp_decoder_rows(&mut params.w_dec);

        // Activity bookkeeping on the just-used batch (post-update acts would
        // cost another pass; firing trends are what matter here).
        let acts = params.encode_batch(x.view());
        for j in 0..f {
            if acts.column(j).iter().any(|&v| v > 0.0) {
                last_fired[j] = step;
            }
        }
        if step % dead_window == dead_window - 1 && step < resample_cutoff {
            let dead: Vec<usize> = (0..f)
                .filter(|&j| step - last_fired[j] >= dead_window && step >= dead_window)
                .collect();
            for &j in &dead {
                let dir = sample_data_direction(shard, config.seed, &mut resample_counter)?;
                params.w_dec.row_mut(j).assign(&dir);
                // Encoder scaled down so the newborn's pre-activations start
                // inside the STE kernel window instead of above it.
                params.w_enc.column_mut(j).assign(&dir.mapv(|v| v * 0.2));
                params.b_enc[j] = 0.0;
                params.theta[j] = THETA_INIT;
                let wenc_idx: Vec<usize> = (0..d).map(|row| row * f + j).collect();
                adam_wenc.reset_at(&wenc_idx);
                adam_benc.reset_at(&[j]);
                let wdec_idx: Vec<usize> = (j * d..(j + 1) * d).collect();
                adam_wdec.reset_at(&wdec_idx);
                adam_theta.reset_at(&[j]);
                last_fired[j] = step;
                resampled_total += 1;
            }
        }

        logs.push(SaeStepLog {
            step,
            recon: loss.recon,
            l0: loss.l0,
            fvu: if total_var > 0.0 { loss.recon / total_var } else { f64::NAN },
        });
    }

    // Final full-shard evaluation.
    let acts = params.encode_batch(shard.rows.view());
    let xhat = params.decode_batch(acts.view());
    let mut recon_total = 0.0f64;
    for (row, xrow) in xhat.rows().into_iter().zip(shard.rows.rows()) {
        recon_total += row
            .iter()
            .zip(xrow.iter())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>();
    }
    let fvu = if total_var > 0.0 {
        (recon_total / shard.count() as f64) / total_var
    } else {
        f64::NAN
    };
    let mean_l0 = acts.iter().filter(|&&v| v > 0.0).count() as f64 / shard.count() as f64;
    let dead_latents = (0..f)
        .filter(|&j| acts.column(j).iter().all(|&v| v <= 0.0))
        .count();
    let report = SaeTrainReport {
        fvu,
        mean_l0,
        dead_latents,
        resampled: resampled_total,
        activation_scale: activation_scale(shard.rows.view()),
    };
    Ok((params, report, logs))
}

fn sample_data_direction(
    shard: &ActivationShard,
    seed: u64,
    counter: &mut u64,
) -> Result<Array1<f32>> {
    for _ in 0..shard.count().max(8) {
        let mut r = rng::substream(seed, "sae.resample", *counter);
        *counter += 1;
        let i = r.random_range(0..shard.count());
        let row = shard.rows.row(i);
        let norm = row.iter().map(|&v| v * v).sum::<f32>().sqrt();
        if norm > 1e-9 {
            return Ok(row.mapv(|v| v / norm));
        }
    }
    Err(Error::AllDeadDictionary)
}

// ---------------------------------------------------------------------------
// container IO
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SaeManifest {
    schema_version: u32,
    kind: String,
    layer: u32,
    d_model: usize,
    d_sae: usize,
    tensors: Vec<TensorEntry>,
    blob: String,
}

pub fn save_sae(params: &SaeParams<f32>, layer: u32, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let (d, f) = (params.d_model(), params.d_sae());
    let mut blob = Vec::with_capacity(2 * d * f + 2 * d + f);
    let mut tensors = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, data: &[f32], blob: &mut Vec<f32>| {
        tensors.push(TensorEntry::f32(name.to_string(), shape, blob.len()));
        blob.extend_from_slice(data);
    };
    push("w_enc", vec![d, f], params.w_enc.as_slice().unwrap(), &mut blob);
    push("b_enc", vec![f], params.b_enc.as_slice().unwrap(), &mut blob);
    push("w_dec", vec![f, d], params.w_dec.as_slice().unwrap(), &mut blob);
    push("b_dec", vec![d], params.b_dec.as_slice().unwrap(), &mut blob);
    push("theta", vec![f], params.theta.as_slice().unwrap(), &mut blob);
    let manifest = SaeManifest {
        schema_version: CONTAINER_SCHEMA_VERSION,
        kind: "sae_checkpoint".to_string(),
        layer,
        d_model: d,
        d_sae: f,
        tensors,
        blob: format!("{stem}.bin"),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(format!("{stem}.bin"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
    container::write_f32_blob(&bin_path, &blob)?;
    Ok((json_path, bin_path))
}

pub fn load_sae(dir: &Path, stem: &str) -> Result<(SaeParams<f32>, u32)> {
    let manifest: SaeManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    if manifest.schema_version != CONTAINER_SCHEMA_VERSION || manifest.kind != "sae_checkpoint" {
        return Err(Error::InvalidConfig(format!("{stem} is not an SAE checkpoint")));
    }
    let (d, f) = (manifest.d_model, manifest.d_sae);
    let total = 2 * d * f + 2 * f + d;
    let blob = container::read_f32_blob(&dir.join(&manifest.blob), total)?;
    let slice = |name: &str| -> Result<(usize, Vec<usize>)> {
        manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| (t.offset / 4, t.shape.clone()))
            .ok_or_else(|| Error::ShapeMismatch {
                what: format!("sae tensor {name}"),
                expected: "present".into(),
                got: "missing".into(),
            })
    };
    let (o, shape) = slice("w_enc")?;
    let w_enc = Array2::from_shape_vec((shape[0], shape[1]), blob[o..o + d * f].to_vec())
        .map_err(|e| Error::ShardFormat(e.to_string()))?;
    let (o, _) = slice("b_enc")?;
    let b_enc = Array1::from_vec(blob[o..o + f].to_vec());
    let (o, shape) = slice("w_dec")?;
    let w_dec = Array2::from_shape_vec((shape[0], shape[1]), blob[o..o + f * d].to_vec())
        .map_err(|e| Error::ShardFormat(e.to_string()))?;
    let (o, _) = slice("b_dec")?;
    let b_dec = Array1::from_vec(blob[o..o + d].to_vec());
    let (o, _) = slice("theta")?;
    let theta = Array1::from_vec(blob[o..o + f].to_vec());
    let params = SaeParams {
        w_enc,
        b_enc,
        w_dec,
        b_dec,
        theta,
    };
    Ok((params, manifest.layer))
}

/// Per-layer SAEs, keyed by layer index.
#[derive(Debug, Clone, Default)]
pub struct SaeSuite {
    pub by_layer: BTreeMap<usize, SaeParams<f32>>,
}

impl SaeSuite {
    pub fn layers(&self) -> Vec<usize> {
        self.by_layer.keys().copied().collect()
    }

    pub fn get(&self, layer: usize) -> Result<&SaeParams<f32>> {
        self.by_layer
            .get(&layer)
            .ok_or_else(|| Error::MissingLatentSelection(format!("no SAE for layer {layer}")))
    }
}

#[cfg(test)]
mod tests;
