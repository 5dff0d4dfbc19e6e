//! Activation harvesting and persistence.
//!
//! Shards are per-(layer, position-rule) files: a binary payload (magic
//! "ACTS", version, layer, d_model, row count, dtype, then f32 rows) plus a
//! JSON-lines sidecar with one row-metadata object per row.

use std::collections::BTreeSet;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_hooked, Captured, HookPoint, ModelCheckpoint};
use crate::rng;
use crate::tokenizer::Tokenizer;
use crate::world::{last_entity_token_index, Class, EntityType, PromptRecord, Split};

pub const SHARD_MAGIC: &[u8; 4] = b"ACTS";
pub const SHARD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum PositionRule {
    LastEntityToken,
    AssistantStartToken,
    AllTokens,
    RandomToken { seed: u64 },
}

impl PositionRule {
    pub fn tag(&self) -> String {
        match self {
            PositionRule::LastEntityToken => "last_entity_token".into(),
            PositionRule::AssistantStartToken => "assistant_start_token".into(),
            PositionRule::AllTokens => "all_tokens".into(),
            PositionRule::RandomToken { .. } => "random_token".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowMeta {
    pub prompt_id: String,
    pub entity_id: Option<u32>,
    pub position: usize,
    pub etype: Option<EntityType>,
    pub class: Option<Class>,
    pub split: Option<Split>,
}

/// One prompt ready for harvesting: token ids plus an optional pre-resolved
/// anchor position (last entity token) and label fields.
#[derive(Debug, Clone)]
pub struct HarvestItem {
    pub prompt_id: String,
    pub ids: Vec<u32>,
    pub anchor: Option<usize>,
    pub entity_id: Option<u32>,
    pub etype: Option<EntityType>,
    pub class: Option<Class>,
    pub split: Option<Split>,
}

impl HarvestItem {
    pub fn from_record(
        record: &PromptRecord,
        tokenizer: &Tokenizer,
        etype: EntityType,
        class: Option<Class>,
        split: Option<Split>,
    ) -> Result<HarvestItem> {
        Ok(HarvestItem {
            prompt_id: record.id.clone(),
            ids: tokenizer.encode(&record.text)?,
            anchor: Some(last_entity_token_index(record, tokenizer)?),
            entity_id: Some(record.entity_id.0),
            etype: Some(etype),
            class,
            split,
        })
    }

    pub fn from_line(prompt_id: String, line: &str, tokenizer: &Tokenizer) -> Result<HarvestItem> {
        Ok(HarvestItem {
            prompt_id,
            ids: tokenizer.encode(line)?,
            anchor: None,
            entity_id: None,
            etype: None,
            class: None,
            split: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ActivationShard {
    pub layer: u32,
    pub d_model: usize,
    pub rows: Array2<f32>,
    pub meta: Vec<RowMeta>,
}

impl ActivationShard {
    pub fn count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.rows.row(i)
    }

    pub fn indices_where(&self, pred: impl Fn(&RowMeta) -> bool) -> Vec<usize> {
        (0..self.meta.len()).filter(|&i| pred(&self.meta[i])).collect()
    }

    pub fn rows_at(&self, indices: &[usize]) -> Array2<f32> {
        let mut out = Array2::zeros((indices.len(), self.d_model));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&self.rows.row(i));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let acts_path = dir.join(format!("{stem}.acts"));
        let meta_path = dir.join(format!("{stem}.meta.jsonl"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&acts_path)?);
        f.write_all(SHARD_MAGIC)?;
        f.write_all(&SHARD_VERSION.to_le_bytes())?;
        f.write_all(&self.layer.to_le_bytes())?;
        f.write_all(&(self.d_model as u32).to_le_bytes())?;
        f.write_all(&(self.count() as u64).to_le_bytes())?;
        f.write_all(&0u32.to_le_bytes())?; // dtype 0 = f32
        for row in self.rows.rows() {
            for &x in row {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;

        let mut m = std::io::BufWriter::new(std::fs::File::create(&meta_path)?);
        writeln!(
            m,
            "{}",
            serde_json::json!({"schema_version": SHARD_VERSION, "kind": "shard_meta"})
        )?;
        for meta in &self.meta {
            writeln!(m, "{}", serde_json::to_string(meta)?)?;
        }
        m.flush()?;
        Ok((acts_path, meta_path))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<ActivationShard> {
        let acts_path = dir.join(format!("{stem}.acts"));
        let mut f = std::io::BufReader::new(std::fs::File::open(&acts_path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != SHARD_MAGIC {
            return Err(Error::ShardFormat(format!(
                "{}: bad magic {magic:?}",
                acts_path.display()
            )));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != SHARD_VERSION {
            return Err(Error::ShardFormat(format!("unsupported version {version}")));
        }
        f.read_exact(&mut u32buf)?;
        let layer = u32::from_le_bytes(u32buf);
        f.read_exact(&mut u32buf)?;
        let d_model = u32::from_le_bytes(u32buf) as usize;
        f.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        f.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != 0 {
            return Err(Error::ShardFormat("dtype must be f32".into()));
        }
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;
        if payload.len() != count * d_model * 4 {
            return Err(Error::ShardFormat(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                count * d_model * 4
            )));
        }
        let mut data = Vec::with_capacity(count * d_model);
        for chunk in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let rows = Array2::from_shape_vec((count, d_model), data)
            .map_err(|e| Error::ShardFormat(e.to_string()))?;

        let meta_path = dir.join(format!("{stem}.meta.jsonl"));
        let reader = std::io::BufReader::new(std::fs::File::open(&meta_path)?);
        let mut lines = reader.lines();
        let header: serde_json::Value = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::ShardFormat("empty sidecar".into())),
        };
        if header["schema_version"] != serde_json::json!(SHARD_VERSION) {
            return Err(Error::ShardFormat("sidecar schema_version mismatch".into()));
        }
        let mut meta = Vec::with_capacity(count);
        for line in lines {
            meta.push(serde_json::from_str(&line?)?);
        }
        if meta.len() != count {
            return Err(Error::ShardFormat(format!(
                "sidecar has {} rows, payload has {count}",
                meta.len()
            )));
        }
        Ok(ActivationShard {
            layer,
            d_model,
            rows,
            meta,
        })
    }
}

fn resolve_positions(
    item: &HarvestItem,
    index: usize,
    rule: PositionRule,
    tokenizer: &Tokenizer,
) -> Result<Vec<usize>> {
    match rule {
        PositionRule::LastEntityToken => item.anchor.map(|a| vec![a]).ok_or_else(|| {
            Error::UnresolvablePosition {
                prompt_id: item.prompt_id.clone(),
                rule: rule.tag(),
            }
        }),
        PositionRule::AssistantStartToken => item
            .ids
            .iter()
            .rposition(|&t| t == tokenizer.specials().assistant_start)
            .map(|p| vec![p])
            .ok_or_else(|| Error::UnresolvablePosition {
                prompt_id: item.prompt_id.clone(),
                rule: rule.tag(),
            }),
        PositionRule::AllTokens => Ok((0..item.ids.len()).collect()),
        PositionRule::RandomToken { seed } => {
            let candidates: Vec<usize> = (0..item.ids.len())
                .filter(|&i| !tokenizer.is_special(item.ids[i]))
                .collect();
            if candidates.is_empty() {
                return Err(Error::UnresolvablePosition {
                    prompt_id: item.prompt_id.clone(),
                    rule: rule.tag(),
                });
            }
            let mut r = rng::substream(seed, "harvest.random_token", index as u64);
            Ok(vec![candidates[r.random_range(0..candidates.len())]])
        }
    }
}

/// Run the model over all items once and emit one shard per requested layer.
/// Rows are ordered by (item order, position order), so output is
/// deterministic; items run in parallel.
pub fn harvest(
    checkpoint: &ModelCheckpoint,
    layers: &[usize],
    rule: PositionRule,
    items: &[HarvestItem],
    tokenizer: &Tokenizer,
) -> Result<Vec<ActivationShard>> {
    let capture: BTreeSet<HookPoint> = layers
        .iter()
        .map(|&l| HookPoint::ResidPost { layer: l })
        .collect();
    let d = checkpoint.config.d_model;

    // (per item) -> (positions, per-layer rows at those positions)
    let per_item: Result<Vec<(Vec<usize>, Vec<Array2<f32>>)>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let positions = resolve_positions(item, i, rule, tokenizer)?;
            for &p in &positions {
                if p >= item.ids.len() {
                    return Err(Error::PositionOutOfRange {
                        position: p,
                        len: item.ids.len(),
                    });
                }
            }
            let trace = forward_hooked(checkpoint, &item.ids, &capture, None)?;
            let mut per_layer = Vec::with_capacity(layers.len());
            for &l in layers {
                let resid = match trace.require(&HookPoint::ResidPost { layer: l })? {
                    Captured::Matrix(m) => m,
                    Captured::Heads(_) => unreachable!("resid hook captures a matrix"),
                };
                let mut rows = Array2::zeros((positions.len(), d));
                for (r, &p) in positions.iter().enumerate() {
                    rows.row_mut(r).assign(&resid.row(p));
                }
                per_layer.push(rows);
            }
            Ok((positions, per_layer))
        })
        .collect();
    let per_item = per_item?;

    let total: usize = per_item.iter().map(|(p, _)| p.len()).sum();
    let mut shards = Vec::with_capacity(layers.len());
    for (li, &layer) in layers.iter().enumerate() {
        let mut rows = Array2::zeros((total, d));
        let mut meta = Vec::with_capacity(total);
        let mut cursor = 0;
        for (item, (positions, per_layer)) in items.iter().zip(&per_item) {
            for (r, &p) in positions.iter().enumerate() {
                rows.row_mut(cursor).assign(&per_layer[li].row(r));
                meta.push(RowMeta {
                    prompt_id: item.prompt_id.clone(),
                    entity_id: item.entity_id,
                    position: p,
                    etype: item.etype,
                    class: item.class,
                    split: item.split,
                });
                cursor += 1;
            }
        }
        shards.push(ActivationShard {
            layer: layer as u32,
            d_model: d,
            rows,
            meta,
        });
    }
    Ok(shards)
}

/// Single-layer convenience wrapper.
pub fn harvest_single(
    checkpoint: &ModelCheckpoint,
    layer: usize,
    rule: PositionRule,
    items: &[HarvestItem],
    tokenizer: &Tokenizer,
) -> Result<ActivationShard> {
    Ok(harvest(checkpoint, &[layer], rule, items, tokenizer)?.remove(0))
}

/// Deterministic shuffled batches over shard rows; each row appears exactly
/// once per pass.
pub fn stream_batches<'a>(
    shard: &'a ActivationShard,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<impl Iterator<Item = Array2<f32>> + 'a> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..shard.count()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng::stream(shuffle_seed, "shard.stream"));
    Ok(BatchIter {
        shard,
        order,
        cursor: 0,
        batch_size,
    })
}

struct BatchIter<'a> {
    shard: &'a ActivationShard,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Array2<f32>;

    fn next(&mut self) -> Option<Array2<f32>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        Some(self.shard.rows_at(idx))
    }
}
