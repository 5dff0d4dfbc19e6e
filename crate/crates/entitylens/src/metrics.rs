//! Latent scoring: activation frequencies, separation scores, layerwise
//! MaxMin curves, filtered top-latent selection, Welch t-statistics, and
//! AUROC/F1 classifier evaluation.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::SaeParams;
use crate::store::ActivationShard;
use crate::world::{Class, EntityType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LatentId {
    pub layer: usize,
    pub index: usize,
}

/// Per-(latent, etype, class) activation fractions with sample counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub layer: usize,
    pub etypes: Vec<EntityType>,
    /// [d_sae, n_etypes] counts of rows where the latent fired (a > 0).
    pub active_known: Array2<u32>,
    pub active_unknown: Array2<u32>,
    pub n_known: Vec<u32>,
    pub n_unknown: Vec<u32>,
}

impl FrequencyTable {
    pub fn d_sae(&self) -> usize {
        self.active_known.nrows()
    }

    pub fn f_known(&self, latent: usize, etype_idx: usize) -> f64 {
        f64::from(self.active_known[(latent, etype_idx)]) / f64::from(self.n_known[etype_idx])
    }

    pub fn f_unknown(&self, latent: usize, etype_idx: usize) -> f64 {
        f64::from(self.active_unknown[(latent, etype_idx)]) / f64::from(self.n_unknown[etype_idx])
    }
}

/// Fraction of rows (per etype and class) on which each latent fires.
/// `indices` selects the shard rows to use; rows must carry etype and class.
pub fn activation_frequencies(
    sae: &SaeParams<f32>,
    layer: usize,
    shard: &ActivationShard,
    indices: &[usize],
) -> Result<FrequencyTable> {
    let etypes = EntityType::ALL.to_vec();
    let d_sae = sae.d_sae();
    let mut active_known = Array2::<u32>::zeros((d_sae, etypes.len()));
    let mut active_unknown = Array2::<u32>::zeros((d_sae, etypes.len()));
    let mut n_known = vec![0u32; etypes.len()];
    let mut n_unknown = vec![0u32; etypes.len()];

    let rows = shard.rows_at(indices);
    let acts = sae.encode_batch(rows.view());
    for (r, &i) in indices.iter().enumerate() {
        let meta = &shard.meta[i];
        let (etype, class) = match (meta.etype, meta.class) {
            (Some(e), Some(c)) => (e, c),
            _ => {
                return Err(Error::ShardFormat(format!(
                    "row {i} ({}) lacks etype/class labels",
                    meta.prompt_id
                )))
            }
        };
        let t = etypes.iter().position(|&e| e == etype).unwrap();
        let (counts, n) = match class {
            Class::Known => (&mut active_known, &mut n_known),
            Class::Unknown => (&mut active_unknown, &mut n_unknown),
        };
        n[t] += 1;
        for j in 0..d_sae {
            if acts[(r, j)] > 0.0 {
                counts[(j, t)] += 1;
            }
        }
    }
    for (t, &etype) in etypes.iter().enumerate() {
        if n_known[t] == 0 {
            return Err(Error::EmptyClassCell {
                etype: etype.word(),
                class: "known",
            });
        }
        if n_unknown[t] == 0 {
            return Err(Error::EmptyClassCell {
                etype: etype.word(),
                class: "unknown",
            });
        }
    }
    Ok(FrequencyTable {
        layer,
        etypes,
        active_known,
        active_unknown,
        n_known,
        n_unknown,
    })
}

/// Per-latent separation scores; s_known = f_known - f_unknown per etype,
/// s_unknown = -s_known, plus min-over-etypes summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTable {
    pub layer: usize,
    pub etypes: Vec<EntityType>,
    /// [d_sae, n_etypes]
    pub s_known: Array2<f64>,
    pub min_known: Vec<f64>,
    pub min_unknown: Vec<f64>,
}

pub fn separation_scores(freq: &FrequencyTable) -> ScoreTable {
    let d_sae = freq.d_sae();
    let t_count = freq.etypes.len();
    let mut s_known = Array2::<f64>::zeros((d_sae, t_count));
    for j in 0..d_sae {
        for t in 0..t_count {
            s_known[(j, t)] = freq.f_known(j, t) - freq.f_unknown(j, t);
        }
    }
    let min_known = (0..d_sae)
        .map(|j| (0..t_count).map(|t| s_known[(j, t)]).fold(f64::INFINITY, f64::min))
        .collect();
    let min_unknown = (0..d_sae)
        .map(|j| (0..t_count).map(|t| -s_known[(j, t)]).fold(f64::INFINITY, f64::min))
        .collect();
    ScoreTable {
        layer: freq.layer,
        etypes: freq.etypes.clone(),
        s_known,
        min_known,
        min_unknown,
    }
}

impl ScoreTable {
    pub fn min_for(&self, class: Class, latent: usize) -> f64 {
        match class {
            Class::Known => self.min_known[latent],
            Class::Unknown => self.min_unknown[latent],
        }
    }

    pub fn score_for(&self, class: Class, latent: usize, etype_idx: usize) -> f64 {
        match class {
            Class::Known => self.s_known[(latent, etype_idx)],
            Class::Unknown => -self.s_known[(latent, etype_idx)],
        }
    }

    /// CSV rows: layer,index,<per-etype s_known>,min_known,min_unknown
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,index");
        for e in &self.etypes {
            out.push_str(&format!(",s_known_{}", e.word()));
        }
        out.push_str(",min_known,min_unknown\n");
        for j in 0..self.min_known.len() {
            out.push_str(&format!("{},{j}", self.layer));
            for t in 0..self.etypes.len() {
                out.push_str(&format!(",{:.6}", self.s_known[(j, t)]));
            }
            out.push_str(&format!(
                ",{:.6},{:.6}\n",
                self.min_known[j], self.min_unknown[j]
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopLatentEntry {
    pub latent: LatentId,
    /// Worst-case (min over etypes) separation score for the class.
    pub min_score: f64,
    /// Best-case (max over etypes) score, the other error bar.
    pub max_score: f64,
}

/// Per-layer MaxMin values with the Top-5 latents per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxMinCurve {
    pub class: Class,
    pub per_layer: Vec<(usize, f64)>,
    pub top5: Vec<(usize, Vec<TopLatentEntry>)>,
}

/// For each layer: max over latents of the min-over-etypes score, plus the
/// five best latents with their min/max bars.
pub fn maxmin_per_layer(tables: &[ScoreTable], class: Class) -> MaxMinCurve {
    let mut per_layer = Vec::with_capacity(tables.len());
    let mut top5 = Vec::with_capacity(tables.len());
    for table in tables {
        let d_sae = table.min_known.len();
        let mut entries: Vec<TopLatentEntry> = (0..d_sae)
            .map(|j| {
                let scores: Vec<f64> = (0..table.etypes.len())
                    .map(|t| table.score_for(class, j, t))
                    .collect();
                TopLatentEntry {
                    latent: LatentId {
                        layer: table.layer,
                        index: j,
                    },
                    min_score: scores.iter().copied().fold(f64::INFINITY, f64::min),
                    max_score: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect();
        entries.sort_by(|a, b| {
            b.min_score
                .partial_cmp(&a.min_score)
                .unwrap()
                .then(a.latent.index.cmp(&b.latent.index))
        });
        let best = entries.first().map(|e| e.min_score).unwrap_or(f64::NAN);
        per_layer.push((table.layer, best));
        entries.truncate(5);
        top5.push((table.layer, entries));
    }
    MaxMinCurve {
        class,
        per_layer,
        top5,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedLatent {
    pub latent: LatentId,
    pub min_score: f64,
    pub random_token_freq: f64,
}

/// Fraction of shard rows on which each latent fires; the random-token
/// generality filter input.
pub fn random_token_frequencies(sae: &SaeParams<f32>, shard: &ActivationShard) -> Vec<f64> {
    let acts = sae.encode_batch(shard.rows.view());
    let n = shard.count().max(1) as f64;
    (0..sae.d_sae())
        .map(|j| acts.column(j).iter().filter(|&&v| v > 0.0).count() as f64 / n)
        .collect()
}

/// Rank latents by min-over-etypes separation score for `class`, excluding
/// latents whose random-token frequency exceeds `filter`. Ties break toward
/// (lower layer, lower index). Rank 1 is the class's entity latent.
pub fn select_top_latents(
    tables: &[ScoreTable],
    class: Class,
    random_token_freqs: &BTreeMap<usize, Vec<f64>>,
    k: usize,
    filter: f64,
) -> Result<Vec<RankedLatent>> {
    let mut survivors = Vec::new();
    for table in tables {
        let rtf = random_token_freqs.get(&table.layer).ok_or_else(|| {
            Error::MissingLatentSelection(format!(
                "no random-token frequencies for layer {}",
                table.layer
            ))
        })?;
        for j in 0..table.min_known.len() {
            if rtf[j] > filter {
                continue;
            }
            survivors.push(RankedLatent {
                latent: LatentId {
                    layer: table.layer,
                    index: j,
                },
                min_score: table.min_for(class, j),
                random_token_freq: rtf[j],
            });
        }
    }
    if survivors.is_empty() {
        return Err(Error::AllLatentsFiltered);
    }
    survivors.sort_by(|a, b| {
        b.min_score
            .partial_cmp(&a.min_score)
            .unwrap()
            .then(a.latent.layer.cmp(&b.latent.layer))
            .then(a.latent.index.cmp(&b.latent.index))
    });
    survivors.truncate(k);
    Ok(survivors)
}

/// Welch t-statistic per latent over correct-vs-error activation samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TStat {
    pub t: f64,
    pub mean_correct: f64,
    pub mean_error: f64,
    pub var_correct: f64,
    pub var_error: f64,
    pub n_correct: usize,
    pub n_error: usize,
    /// Both sample variances were zero; t was computed with the 1e-12 floor.
    pub degenerate: bool,
}

const VARIANCE_FLOOR: f64 = 1e-12;

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    // Unbiased sample variance; a single observation carries none.
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, var)
}

/// Positive t means the latent is higher on correct samples.
pub fn t_statistics(
    sae: &SaeParams<f32>,
    correct_rows: ArrayView2<'_, f32>,
    error_rows: ArrayView2<'_, f32>,
) -> Result<Vec<TStat>> {
    if correct_rows.nrows() == 0 || error_rows.nrows() == 0 {
        return Err(Error::SingleClassLabels("t_statistics samples".into()));
    }
    let a_c = sae.encode_batch(correct_rows);
    let a_e = sae.encode_batch(error_rows);
    let (n_c, n_e) = (a_c.nrows(), a_e.nrows());
    let mut out = Vec::with_capacity(sae.d_sae());
    for j in 0..sae.d_sae() {
        let xs_c: Vec<f64> = a_c.column(j).iter().map(|&v| f64::from(v)).collect();
        let xs_e: Vec<f64> = a_e.column(j).iter().map(|&v| f64::from(v)).collect();
        let (mean_c, var_c) = mean_var(&xs_c);
        let (mean_e, var_e) = mean_var(&xs_e);
        let denom_sq = (var_c / n_c as f64 + var_e / n_e as f64).max(VARIANCE_FLOOR);
        out.push(TStat {
            t: (mean_c - mean_e) / denom_sq.sqrt(),
            mean_correct: mean_c,
            mean_error: mean_e,
            var_correct: var_c,
            var_error: var_e,
            n_correct: n_c,
            n_error: n_e,
            degenerate: var_c == 0.0 && var_e == 0.0,
        });
    }
    Ok(out)
}

/// Rank-statistic AUROC with ties averaged.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassLabels("auroc".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks across ties (1-based).
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels.iter())
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassifierEval {
    pub auroc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_validation: usize,
    pub n_test: usize,
}

fn f1_at(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Calibrate the threshold for max F1 on the validation portion, then report
/// test AUROC and test F1 at that threshold.
pub fn classifier_eval(
    scores: &[f64],
    labels: &[bool],
    is_validation: &[bool],
) -> Result<ClassifierEval> {
    assert_eq!(scores.len(), labels.len());
    assert_eq!(scores.len(), is_validation.len());
    let pick = |val: bool| -> (Vec<f64>, Vec<bool>) {
        scores
            .iter()
            .zip(labels)
            .zip(is_validation)
            .filter(|(_, &v)| v == val)
            .map(|((&s, &l), _)| (s, l))
            .unzip()
    };
    let (val_scores, val_labels) = pick(true);
    let (test_scores, test_labels) = pick(false);
    if val_labels.iter().all(|&l| l) || val_labels.iter().all(|&l| !l) {
        return Err(Error::SingleClassLabels("classifier validation split".into()));
    }
    // Candidate thresholds: every distinct validation score. Smallest
    // threshold achieving the max F1 wins (deterministic).
    let mut candidates: Vec<f64> = val_scores.clone();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for &c in &candidates {
        let f1 = f1_at(&val_scores, &val_labels, c);
        if f1 > best.0 + 1e-12 {
            best = (f1, c);
        }
    }
    let threshold = best.1;
    Ok(ClassifierEval {
        auroc: auroc(&test_scores, &test_labels)?,
        f1: f1_at(&test_scores, &test_labels, threshold),
        threshold,
        n_validation: val_scores.len(),
        n_test: test_scores.len(),
    })
}
