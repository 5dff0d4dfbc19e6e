//! Stage pipeline: gen-world through report, with hashed artifacts so single
//! stages can be re-run against cached upstream outputs.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use super::refusal::LatentArm;
use super::{
    run_attention_experiment, run_refusal_experiment, run_self_knowledge_experiment,
    run_uncertainty_experiment, AttentionInputs, ExperimentReport, RefusalInputs, RefusalLexicon,
    SelfKnowledgeInputs, UncertaintyInputs,
};
use crate::error::{Error, Result};
use crate::interventions::{
    max_residual_alignment, mean_residual_norm, orthogonalize_weights, sweep_alpha, SweepObjective,
    SweepSpec, SweepTable, SteerPositions,
};
use crate::metrics::{
    activation_frequencies, maxmin_per_layer, random_token_frequencies, select_top_latents,
    separation_scores, MaxMinCurve, RankedLatent,
};
use crate::model::{train_lm, ModelCheckpoint, StepLog, TrainHyper};
use crate::sae::{activation_scale, load_sae, save_sae, train_sae, SaeConfig, SaeSuite};
use crate::store::{harvest, ActivationShard, HarvestItem, PositionRule};
use crate::tokenizer::Tokenizer;
use crate::world::{
    self, classification_agreement, classify_known_unknown, generate_world, is_grammatical_answer,
    last_entity_token_index, make_splits, render_chat_corpus, render_eval_questions,
    render_fact_corpus, render_filler_corpus, render_probe_prompts, render_self_knowledge_eval,
    training_line, ChatCorpusOptions, Class, EntityWorld, EvalPrompt, KnownnessLabel,
    PromptRecord, Split, SplitAssignment, Verdict,
};

pub const PIPELINE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenWorld,
    TrainBase,
    Classify,
    Split,
    TrainChat,
    Harvest,
    TrainSae,
    ScoreLatents,
    SweepAlpha,
    Orthogonalize,
    Steer,
    Patch,
    Attn,
    SelfKnowledge,
    Uncertainty,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 16] = [
        Stage::GenWorld,
        Stage::TrainBase,
        Stage::Classify,
        Stage::Split,
        Stage::TrainChat,
        Stage::Harvest,
        Stage::TrainSae,
        Stage::ScoreLatents,
        Stage::SweepAlpha,
        Stage::Orthogonalize,
        Stage::Steer,
        Stage::Patch,
        Stage::Attn,
        Stage::SelfKnowledge,
        Stage::Uncertainty,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenWorld => "gen-world",
            Stage::TrainBase => "train-base",
            Stage::Classify => "classify",
            Stage::Split => "split",
            Stage::TrainChat => "train-chat",
            Stage::Harvest => "harvest",
            Stage::TrainSae => "train-sae",
            Stage::ScoreLatents => "score-latents",
            Stage::SweepAlpha => "sweep-alpha",
            Stage::Orthogonalize => "orthogonalize",
            Stage::Steer => "steer",
            Stage::Patch => "patch",
            Stage::Attn => "attn",
            Stage::SelfKnowledge => "self-knowledge",
            Stage::Uncertainty => "uncertainty",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StageRecord {
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config_sha: String,
    stages: BTreeMap<String, StageRecord>,
}

fn sha_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

// Relative artifact paths.
const WORLD: &str = "world.json";
const VOCAB: &str = "vocab.json";
const FACTS: &str = "corpus_facts.jsonl";
const PROBES: &str = "corpus_probes.jsonl";
const FILLER: &str = "corpus_filler.txt";
const BASE_JSON: &str = "base.json";
const BASE_BIN: &str = "base.bin";
const BASE_LOSS: &str = "base_loss.csv";
const LABELS: &str = "labels.json";
const SPLITS: &str = "splits.json";
const BASE_EVAL: &str = "base_eval.json";
const QUESTIONS: &str = "questions.jsonl";
const SELFKNOW: &str = "selfknow.jsonl";
const CHAT_CORPUS: &str = "corpus_chat.jsonl";
const CHAT_JSON: &str = "chat.json";
const CHAT_BIN: &str = "chat.bin";
const CHAT_LOSS: &str = "chat_loss.csv";
const SAE_SUMMARY: &str = "sae/summary.json";
const SELECTION: &str = "scores/selection.json";
const MAXMIN: &str = "scores/maxmin.json";
const SWEEP: &str = "sweep.json";
const ORTHO_JSON: &str = "ortho.json";
const ORTHO_BIN: &str = "ortho.bin";
const ORTHO_REPORT: &str = "ortho_report.json";
const REFUSAL: &str = "experiments/refusal.json";
const REFUSAL_GENERATIONS: &str = "experiments/refusal_generations.jsonl";
const PATCHING: &str = "experiments/patching.json";
const ATTENTION: &str = "experiments/attention.json";
const SELF_KNOWLEDGE: &str = "experiments/self_knowledge.json";
const SELF_KNOWLEDGE_ROWS: &str = "experiments/self_knowledge_rows.json";
const UNCERTAINTY: &str = "experiments/uncertainty.json";
const UNCERTAINTY_ANSWERS: &str = "experiments/uncertainty_answers.jsonl";
const UNCERTAINTY_TTABLE: &str = "experiments/uncertainty_ttable.json";
const METRICS: &str = "metrics.json";
const CONFIG_SNAPSHOT: &str = "config.resolved.json";

fn shard_stem(model: &str, layer: usize, rule: &str) -> String {
    format!("shards/{model}_l{layer}_{rule}")
}

fn sae_stem(model: &str, layer: usize) -> String {
    format!("sae/{model}_l{layer}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelsFile {
    schema_version: u32,
    fuzzy_threshold: f64,
    agreement: f64,
    labels: Vec<KnownnessLabel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BaseEvalFile {
    schema_version: u32,
    attr_accuracy_known_train: f64,
    n_known_train: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SaeEntry {
    fvu: f64,
    mean_l0: f64,
    dead_latents: usize,
    resampled: usize,
    activation_scale: f64,
    ste_bandwidth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SaeSummaryFile {
    schema_version: u32,
    base: BTreeMap<usize, SaeEntry>,
    chat: BTreeMap<usize, SaeEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentSelection {
    pub schema_version: u32,
    pub known: Vec<RankedLatent>,
    pub unknown: Vec<RankedLatent>,
    pub rank1_known_train_min: f64,
    pub rank1_unknown_train_min: f64,
    pub rank1_known_test_min: f64,
    pub rank1_unknown_test_min: f64,
    pub rtf: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaxMinFile {
    schema_version: u32,
    known: MaxMinCurve,
    unknown: MaxMinCurve,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub latent_layer: usize,
    pub latent_index: usize,
    pub mean_resid_norm: f64,
    pub table: SweepTable,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepFile {
    pub schema_version: u32,
    /// Sweep of the unknown-entity latent on known-entity validation
    /// questions (raise refusal).
    pub unknown_latent: SweepOutcome,
    /// Sweep of the known-entity latent on unknown-entity validation
    /// questions (lower refusal).
    pub known_latent: SweepOutcome,
    pub baseline_unknown_refusal: f64,
}

fn write_jsonl<T: Serialize>(path: &Path, kind: &str, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "{}",
        serde_json::json!({"schema_version": PIPELINE_SCHEMA_VERSION, "kind": kind})
    )?;
    for item in items {
        writeln!(f, "{}", serde_json::to_string(item)?)?;
    }
    f.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header: serde_json::Value = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::ShardFormat(format!("{}: empty", path.display()))),
    };
    if header["kind"] != serde_json::json!(kind) {
        return Err(Error::ShardFormat(format!(
            "{}: expected kind {kind}, got {}",
            path.display(),
            header["kind"]
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        out.push(serde_json::from_str(&line?)?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn loss_csv(logs: &[StepLog]) -> String {
    let mut out = String::from("step,loss\n");
    for l in logs {
        out.push_str(&format!("{},{:.6}\n", l.step, l.loss));
    }
    out
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: PathBuf) -> Result<Pipeline> {
        config.validate()?;
        for sub in ["", "shards", "sae", "scores", "experiments"] {
            std::fs::create_dir_all(out.join(sub))?;
        }
        let pipeline = Pipeline { config, out };
        write_json(&pipeline.out.join(CONFIG_SNAPSHOT), &pipeline.config)?;
        Ok(pipeline)
    }

    fn config_sha(&self) -> String {
        sha_hex(serde_json::to_string(&self.config).expect("config serializes").as_bytes())
    }

    fn manifest_path(&self) -> PathBuf {
        self.out.join("manifest.json")
    }

    fn load_manifest(&self) -> Result<Manifest> {
        read_json(&self.manifest_path())
    }

    fn record_outputs(
        &self,
        manifest: &mut Manifest,
        stage: Stage,
        outputs: &[String],
    ) -> Result<()> {
        let mut record = StageRecord::default();
        for rel in outputs {
            let bytes = std::fs::read(self.out.join(rel))?;
            record.outputs.insert(rel.clone(), sha_hex(&bytes));
        }
        manifest.stages.insert(stage.name().to_string(), record);
        write_json(&self.manifest_path(), manifest)?;
        Ok(())
    }

    fn require_input(&self, manifest: &Manifest, stage: Stage, rel: &str) -> Result<()> {
        let path = self.out.join(rel);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: stage.name(),
                path: rel.to_string(),
            });
        }
        let recorded = manifest
            .stages
            .values()
            .find_map(|r| r.outputs.get(rel))
            .ok_or_else(|| Error::MissingArtifact {
                stage: stage.name(),
                path: rel.to_string(),
            })?;
        let actual = sha_hex(&std::fs::read(&path)?);
        if &actual != recorded {
            return Err(Error::StaleArtifact {
                stage: stage.name(),
                path: rel.to_string(),
            });
        }
        Ok(())
    }

    fn layers(&self) -> Vec<usize> {
        (0..self.config.model.n_layers).collect()
    }

    fn stage_inputs(&self, stage: Stage) -> Vec<String> {
        let per_layer = |stems: &[(&str, &str)]| -> Vec<String> {
            let mut v = Vec::new();
            for l in self.layers() {
                for (model, rule) in stems {
                    v.push(format!("{}.acts", shard_stem(model, l, rule)));
                    v.push(format!("{}.meta.jsonl", shard_stem(model, l, rule)));
                }
            }
            v
        };
        let str_vec = |items: &[&str]| items.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match stage {
            Stage::GenWorld => vec![],
            Stage::TrainBase => str_vec(&[WORLD, VOCAB, FACTS, FILLER]),
            Stage::Classify => str_vec(&[WORLD, VOCAB, BASE_JSON, BASE_BIN]),
            Stage::Split => str_vec(&[WORLD, VOCAB, LABELS]),
            Stage::TrainChat => str_vec(&[WORLD, VOCAB, LABELS, SPLITS, FACTS, BASE_JSON, BASE_BIN]),
            Stage::Harvest => {
                let mut v = str_vec(&[
                    WORLD, VOCAB, LABELS, SPLITS, FACTS, PROBES, FILLER, QUESTIONS, CHAT_CORPUS,
                    BASE_JSON, BASE_BIN, CHAT_JSON, CHAT_BIN,
                ]);
                v.sort();
                v
            }
            Stage::TrainSae => {
                let mut v = per_layer(&[("base", "all"), ("chat", "all")]);
                v.sort();
                v
            }
            Stage::ScoreLatents => {
                let mut v = per_layer(&[("base", "entity"), ("base", "random")]);
                for l in self.layers() {
                    v.push(format!("{}.json", sae_stem("base", l)));
                    v.push(format!("{}.bin", sae_stem("base", l)));
                }
                v.sort();
                v
            }
            Stage::SweepAlpha => {
                let mut v = str_vec(&[VOCAB, QUESTIONS, CHAT_JSON, CHAT_BIN, SELECTION]);
                for l in self.layers() {
                    v.push(format!("{}.json", sae_stem("base", l)));
                    v.push(format!("{}.bin", sae_stem("base", l)));
                }
                v
            }
            Stage::Orthogonalize => {
                let mut v = str_vec(&[CHAT_JSON, CHAT_BIN, SELECTION]);
                for l in self.layers() {
                    v.push(format!("{}.json", sae_stem("base", l)));
                    v.push(format!("{}.bin", sae_stem("base", l)));
                }
                v
            }
            Stage::Steer => {
                let mut v = str_vec(&[
                    VOCAB, QUESTIONS, CHAT_JSON, CHAT_BIN, ORTHO_JSON, ORTHO_BIN, SELECTION, SWEEP,
                ]);
                for l in self.layers() {
                    v.push(format!("{}.json", sae_stem("base", l)));
                    v.push(format!("{}.bin", sae_stem("base", l)));
                }
                v
            }
            Stage::Patch => str_vec(&[WORLD, VOCAB, LABELS, SPLITS, BASE_JSON, BASE_BIN]),
            Stage::Attn => {
                let mut v = str_vec(&[WORLD, VOCAB, LABELS, SPLITS, BASE_JSON, BASE_BIN, PATCHING, SELECTION]);
                for l in self.layers() {
                    v.push(format!("{}.json", sae_stem("base", l)));
                    v.push(format!("{}.bin", sae_stem("base", l)));
                }
                v
            }
            Stage::SelfKnowledge => {
                let mut v = str_vec(&[VOCAB, SELFKNOW, CHAT_JSON, CHAT_BIN, SELECTION]);
                for l in self.layers() {
                    v.push(format!("{}.json", sae_stem("base", l)));
                    v.push(format!("{}.bin", sae_stem("base", l)));
                }
                v
            }
            Stage::Uncertainty => {
                let mut v = str_vec(&[VOCAB, QUESTIONS, CHAT_JSON, CHAT_BIN]);
                v.extend(per_layer(&[("chat", "assistant")]));
                for l in self.layers() {
                    v.push(format!("{}.json", sae_stem("chat", l)));
                    v.push(format!("{}.bin", sae_stem("chat", l)));
                }
                v
            }
            Stage::Report => {
                let mut v = str_vec(&[
                    CONFIG_SNAPSHOT, WORLD, LABELS, BASE_EVAL, BASE_LOSS, CHAT_LOSS, SAE_SUMMARY,
                    SELECTION, MAXMIN, SWEEP, ORTHO_REPORT, REFUSAL, PATCHING, ATTENTION,
                    SELF_KNOWLEDGE, UNCERTAINTY,
                ]);
                v.sort();
                v
            }
        }
    }

    /// Run every stage in order into a fresh manifest.
    pub fn run_all(&self) -> Result<()> {
        let mut manifest = Manifest {
            schema_version: PIPELINE_SCHEMA_VERSION,
            config_sha: self.config_sha(),
            stages: BTreeMap::new(),
        };
        for stage in Stage::ALL {
            self.run_stage(stage, &mut manifest)
                .map_err(|e| e.in_stage(stage.name()))?;
        }
        Ok(())
    }

    /// Run one stage against cached upstream artifacts (hash-checked).
    pub fn run_only(&self, stage: Stage) -> Result<()> {
        let mut manifest = self.load_manifest().map_err(|_| Error::MissingArtifact {
            stage: stage.name(),
            path: "manifest.json".to_string(),
        })?;
        if manifest.config_sha != self.config_sha() {
            return Err(Error::StaleArtifact {
                stage: stage.name(),
                path: CONFIG_SNAPSHOT.to_string(),
            });
        }
        for rel in self.stage_inputs(stage) {
            self.require_input(&manifest, stage, &rel)?;
        }
        self.run_stage(stage, &mut manifest)
            .map_err(|e| e.in_stage(stage.name()))
    }

    fn run_stage(&self, stage: Stage, manifest: &mut Manifest) -> Result<()> {
        let outputs = match stage {
            Stage::GenWorld => self.stage_gen_world()?,
            Stage::TrainBase => self.stage_train_base()?,
            Stage::Classify => self.stage_classify()?,
            Stage::Split => self.stage_split()?,
            Stage::TrainChat => self.stage_train_chat()?,
            Stage::Harvest => self.stage_harvest()?,
            Stage::TrainSae => self.stage_train_sae()?,
            Stage::ScoreLatents => self.stage_score_latents()?,
            Stage::SweepAlpha => self.stage_sweep_alpha()?,
            Stage::Orthogonalize => self.stage_orthogonalize()?,
            Stage::Steer => self.stage_steer()?,
            Stage::Patch => self.stage_patch()?,
            Stage::Attn => self.stage_attn()?,
            Stage::SelfKnowledge => self.stage_self_knowledge()?,
            Stage::Uncertainty => self.stage_uncertainty()?,
            Stage::Report => self.stage_report()?,
        };
        self.record_outputs(manifest, stage, &outputs)
    }

    // --- loading helpers -------------------------------------------------

    fn load_tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::load(&self.out.join(VOCAB))
    }

    fn load_world(&self) -> Result<EntityWorld> {
        EntityWorld::load(&self.out.join(WORLD))
    }

    fn load_labels(&self) -> Result<LabelsFile> {
        read_json(&self.out.join(LABELS))
    }

    fn load_splits(&self) -> Result<SplitAssignment> {
        read_json(&self.out.join(SPLITS))
    }

    fn load_questions(&self) -> Result<Vec<EvalPrompt>> {
        read_jsonl(&self.out.join(QUESTIONS), "eval_questions")
    }

    fn load_base(&self) -> Result<ModelCheckpoint> {
        ModelCheckpoint::load(&self.out, "base")
    }

    fn load_chat(&self) -> Result<ModelCheckpoint> {
        ModelCheckpoint::load(&self.out, "chat")
    }

    fn load_suite(&self, model: &str) -> Result<SaeSuite> {
        let mut suite = SaeSuite::default();
        for l in self.layers() {
            let (params, layer) = load_sae(&self.out, &sae_stem(model, l))?;
            debug_assert_eq!(layer as usize, l);
            suite.by_layer.insert(l, params);
        }
        Ok(suite)
    }

    fn load_selection(&self) -> Result<LatentSelection> {
        read_json(&self.out.join(SELECTION))
    }

    fn load_sweep(&self) -> Result<SweepFile> {
        read_json(&self.out.join(SWEEP))
    }

    fn lexicon(&self) -> RefusalLexicon {
        RefusalLexicon::standard()
    }

    fn labeled_probe_records(
        &self,
        world: &EntityWorld,
        labels: &[KnownnessLabel],
        splits: &SplitAssignment,
    ) -> Vec<(PromptRecord, Class, Split)> {
        let by_id: BTreeMap<_, _> = labels.iter().map(|l| (l.entity_id, l.verdict)).collect();
        render_probe_prompts(world)
            .into_iter()
            .filter_map(|record| {
                let verdict = by_id.get(&record.entity_id)?;
                let class = Class::from_verdict(*verdict)?;
                let split = splits.of(record.entity_id)?;
                Some((record, class, split))
            })
            .collect()
    }

    /// Test-split questions for one class, capped per etype in stable order.
    fn capped_test_questions(&self, questions: &[EvalPrompt], class: Class) -> Vec<EvalPrompt> {
        let cap = self.config.experiments.questions_per_etype;
        let mut out = Vec::new();
        for etype in crate::world::EntityType::ALL {
            out.extend(
                questions
                    .iter()
                    .filter(|q| q.split == Split::Test && q.class == class && q.etype == etype)
                    .take(cap)
                    .cloned(),
            );
        }
        out
    }

    fn arm(
        &self,
        suite: &SaeSuite,
        ranked: &RankedLatent,
        alpha: f64,
    ) -> Result<LatentArm> {
        let sae = suite.get(ranked.latent.layer)?;
        Ok(LatentArm {
            latent: ranked.latent,
            direction: sae.latent_direction(ranked.latent.index),
            alpha: alpha as f32,
        })
    }

    /// Random survivor latents at the given layer (rtf <= filter), excluding
    /// one latent, as steering arms at a fixed alpha.
    fn random_arms(
        &self,
        suite: &SaeSuite,
        selection: &LatentSelection,
        layer: usize,
        exclude: usize,
        alpha: f64,
        count: usize,
        tag: &str,
    ) -> Result<Vec<LatentArm>> {
        let rtf = selection.rtf.get(&layer).ok_or_else(|| {
            Error::MissingLatentSelection(format!("no rtf for layer {layer}"))
        })?;
        let mut survivors: Vec<usize> = (0..rtf.len())
            .filter(|&j| rtf[j] <= self.config.analysis.rtf_filter && j != exclude)
            .collect();
        if survivors.is_empty() {
            return Err(Error::AllLatentsFiltered);
        }
        let mut rng = crate::rng::stream(self.config.seed, tag);
        survivors.shuffle(&mut rng);
        let sae = suite.get(layer)?;
        Ok(survivors
            .into_iter()
            .take(count)
            .map(|j| LatentArm {
                latent: crate::metrics::LatentId { layer, index: j },
                direction: sae.latent_direction(j),
                alpha: alpha as f32,
            })
            .collect())
    }

    /// Mean residual norm at the entity anchor of the given prompts.
    fn entity_norm(
        &self,
        checkpoint: &ModelCheckpoint,
        records: &[&PromptRecord],
        tokenizer: &Tokenizer,
        layer: usize,
    ) -> Result<f64> {
        let prompts: Result<Vec<(Vec<u32>, usize)>> = records
            .iter()
            .map(|r| Ok((tokenizer.encode(&r.text)?, last_entity_token_index(r, tokenizer)?)))
            .collect();
        mean_residual_norm(checkpoint, &prompts?, layer)
    }

    // --- stages -----------------------------------------------------------

    fn stage_gen_world(&self) -> Result<Vec<String>> {
        let world = generate_world(self.config.seed, &self.config.world.counts)?;
        world.save(&self.out.join(WORLD))?;
        let tokenizer = world::standard_tokenizer();
        tokenizer.save(&self.out.join(VOCAB))?;
        write_jsonl(&self.out.join(FACTS), "prompt_records", &render_fact_corpus(&world))?;
        write_jsonl(&self.out.join(PROBES), "prompt_records", &render_probe_prompts(&world))?;
        let filler = render_filler_corpus(self.config.seed, self.config.world.filler_lines);
        std::fs::write(self.out.join(FILLER), filler.join("\n") + "\n")?;
        Ok(vec![
            WORLD.into(),
            VOCAB.into(),
            FACTS.into(),
            PROBES.into(),
            FILLER.into(),
        ])
    }

    fn read_filler(&self) -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(self.out.join(FILLER))?
            .lines()
            .map(|s| s.to_string())
            .collect())
    }

    fn stage_train_base(&self) -> Result<Vec<String>> {
        let tokenizer = self.load_tokenizer()?;
        let facts: Vec<PromptRecord> = read_jsonl(&self.out.join(FACTS), "prompt_records")?;
        let mut lines: Vec<String> = facts.iter().map(training_line).collect();
        lines.extend(self.read_filler()?);
        let corpus: Result<Vec<Vec<u32>>> = lines.iter().map(|l| tokenizer.encode(l)).collect();
        let cfg = self.config.model.to_model_config(tokenizer.vocab_size());
        let hyper = TrainHyper {
            lr: self.config.model.lr,
            batch: self.config.model.batch,
            steps: self.config.model.steps,
            seed: self.config.seed,
            warmup_frac: 0.05,
            grad_clip: 1.0,
        };
        let (ckpt, logs) = train_lm(&cfg, &corpus?, &hyper, None)?;
        ckpt.save(&self.out, "base")?;
        std::fs::write(self.out.join(BASE_LOSS), loss_csv(&logs))?;
        Ok(vec![BASE_JSON.into(), BASE_BIN.into(), BASE_LOSS.into()])
    }

    fn stage_classify(&self) -> Result<Vec<String>> {
        let world = self.load_world()?;
        let tokenizer = self.load_tokenizer()?;
        let base = self.load_base()?;
        let labels = classify_known_unknown(
            &base,
            &world,
            &tokenizer,
            self.config.world.fuzzy_threshold,
        )?;
        let file = LabelsFile {
            schema_version: PIPELINE_SCHEMA_VERSION,
            fuzzy_threshold: self.config.world.fuzzy_threshold,
            agreement: classification_agreement(&world, &labels),
            labels,
        };
        write_json(&self.out.join(LABELS), &file)?;
        Ok(vec![LABELS.into()])
    }

    fn stage_split(&self) -> Result<Vec<String>> {
        let world = self.load_world()?;
        let labels = self.load_labels()?;
        let splits = make_splits(&world, &labels.labels, self.config.seed)?;
        write_json(&self.out.join(SPLITS), &splits)?;

        // Base attribute accuracy over known train entities, straight from
        // the probe results.
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut n_entities = 0usize;
        for label in &labels.labels {
            if label.verdict == Verdict::Known && splits.of(label.entity_id) == Some(Split::Train) {
                n_entities += 1;
                for &c in &label.per_attribute_correct {
                    total += 1;
                    correct += usize::from(c);
                }
            }
        }
        let eval = BaseEvalFile {
            schema_version: PIPELINE_SCHEMA_VERSION,
            attr_accuracy_known_train: correct as f64 / total.max(1) as f64,
            n_known_train: n_entities,
        };
        write_json(&self.out.join(BASE_EVAL), &eval)?;

        let questions = render_eval_questions(&world, &labels.labels, &splits);
        write_jsonl(&self.out.join(QUESTIONS), "eval_questions", &questions)?;
        let selfknow = render_self_knowledge_eval(&world, &labels.labels, &splits);
        write_jsonl(&self.out.join(SELFKNOW), "eval_questions", &selfknow)?;
        Ok(vec![
            SPLITS.into(),
            BASE_EVAL.into(),
            QUESTIONS.into(),
            SELFKNOW.into(),
        ])
    }

    fn stage_train_chat(&self) -> Result<Vec<String>> {
        let world = self.load_world()?;
        let tokenizer = self.load_tokenizer()?;
        let labels = self.load_labels()?;
        let splits = self.load_splits()?;
        let base = self.load_base()?;
        let chat_records = render_chat_corpus(
            &world,
            &self.lexicon().prefixes,
            &labels.labels,
            &splits,
            &ChatCorpusOptions {
                refusal_fraction: self.config.world.refusal_fraction,
                seed: self.config.seed,
            },
        )?;
        write_jsonl(&self.out.join(CHAT_CORPUS), "prompt_records", &chat_records)?;
        let mut lines: Vec<String> = chat_records.iter().map(training_line).collect();
        if self.config.chat.replay_facts {
            let facts: Vec<PromptRecord> = read_jsonl(&self.out.join(FACTS), "prompt_records")?;
            lines.extend(facts.iter().map(training_line));
        }
        let corpus: Result<Vec<Vec<u32>>> = lines.iter().map(|l| tokenizer.encode(l)).collect();
        let hyper = TrainHyper {
            lr: self.config.chat.lr,
            batch: self.config.chat.batch,
            steps: self.config.chat.steps,
            seed: self.config.seed.wrapping_add(1),
            warmup_frac: 0.05,
            grad_clip: 1.0,
        };
        let (ckpt, logs) = train_lm(&base.config, &corpus?, &hyper, Some(&base))?;
        ckpt.save(&self.out, "chat")?;
        std::fs::write(self.out.join(CHAT_LOSS), loss_csv(&logs))?;
        Ok(vec![
            CHAT_CORPUS.into(),
            CHAT_JSON.into(),
            CHAT_BIN.into(),
            CHAT_LOSS.into(),
        ])
    }

    fn stage_harvest(&self) -> Result<Vec<String>> {
        let world = self.load_world()?;
        let tokenizer = self.load_tokenizer()?;
        let labels = self.load_labels()?;
        let splits = self.load_splits()?;
        let base = self.load_base()?;
        let chat = self.load_chat()?;
        let layers = self.layers();
        let mut outputs = Vec::new();
        let save_all = |shards: Vec<ActivationShard>, model: &str, rule: &str,
                            outputs: &mut Vec<String>|
         -> Result<()> {
            for shard in shards {
                let stem = shard_stem(model, shard.layer as usize, rule);
                shard.write(&self.out, &stem)?;
                outputs.push(format!("{stem}.acts"));
                outputs.push(format!("{stem}.meta.jsonl"));
            }
            Ok(())
        };

        // Entity probes at the last entity token (base model), labeled.
        let probe_items: Result<Vec<HarvestItem>> = self
            .labeled_probe_records(&world, &labels.labels, &splits)
            .iter()
            .map(|(record, class, split)| {
                HarvestItem::from_record(
                    record,
                    &tokenizer,
                    world.entity(record.entity_id).etype,
                    Some(*class),
                    Some(*split),
                )
            })
            .collect();
        save_all(
            harvest(&base, &layers, PositionRule::LastEntityToken, &probe_items?, &tokenizer)?,
            "base",
            "entity",
            &mut outputs,
        )?;

        // Random filler tokens (base model).
        let filler = self.read_filler()?;
        let filler_items: Result<Vec<HarvestItem>> = filler
            .iter()
            .enumerate()
            .map(|(i, line)| HarvestItem::from_line(format!("filler:{i:04}"), line, &tokenizer))
            .collect();
        save_all(
            harvest(
                &base,
                &layers,
                PositionRule::RandomToken {
                    seed: self.config.seed,
                },
                &filler_items?,
                &tokenizer,
            )?,
            "base",
            "random",
            &mut outputs,
        )?;

        // SAE training distribution (base model): fact lines, probe prompts
        // over all entities, filler.
        let facts: Vec<PromptRecord> = read_jsonl(&self.out.join(FACTS), "prompt_records")?;
        let probes: Vec<PromptRecord> = read_jsonl(&self.out.join(PROBES), "prompt_records")?;
        let mut all_items: Vec<HarvestItem> = Vec::new();
        for (i, record) in facts.iter().enumerate() {
            all_items.push(HarvestItem::from_line(
                format!("fact_line:{i:04}"),
                &training_line(record),
                &tokenizer,
            )?);
        }
        for record in &probes {
            all_items.push(HarvestItem::from_line(
                format!("probe_line:{}", record.id),
                &record.text,
                &tokenizer,
            )?);
        }
        for (i, line) in filler.iter().enumerate() {
            all_items.push(HarvestItem::from_line(format!("filler:{i:04}"), line, &tokenizer)?);
        }
        save_all(
            harvest(&base, &layers, PositionRule::AllTokens, &all_items, &tokenizer)?,
            "base",
            "all",
            &mut outputs,
        )?;

        // Assistant-start rows for every eval question (chat model).
        let questions = self.load_questions()?;
        let question_items: Result<Vec<HarvestItem>> = questions
            .iter()
            .map(|q| {
                let mut item = HarvestItem::from_record(
                    &q.record,
                    &tokenizer,
                    q.etype,
                    Some(q.class),
                    Some(q.split),
                )?;
                item.prompt_id = q.record.id.clone();
                Ok(item)
            })
            .collect();
        save_all(
            harvest(
                &chat,
                &layers,
                PositionRule::AssistantStartToken,
                &question_items?,
                &tokenizer,
            )?,
            "chat",
            "assistant",
            &mut outputs,
        )?;

        // Chat SAE training distribution: train-split chat lines, all tokens.
        let chat_records: Vec<PromptRecord> =
            read_jsonl(&self.out.join(CHAT_CORPUS), "prompt_records")?;
        let chat_items: Result<Vec<HarvestItem>> = chat_records
            .iter()
            .enumerate()
            .map(|(i, record)| {
                HarvestItem::from_line(
                    format!("chat_line:{i:04}"),
                    &training_line(record),
                    &tokenizer,
                )
            })
            .collect();
        save_all(
            harvest(&chat, &layers, PositionRule::AllTokens, &chat_items?, &tokenizer)?,
            "chat",
            "all",
            &mut outputs,
        )?;
        outputs.sort();
        Ok(outputs)
    }

    fn stage_train_sae(&self) -> Result<Vec<String>> {
        let mut outputs = Vec::new();
        let mut summary = SaeSummaryFile {
            schema_version: PIPELINE_SCHEMA_VERSION,
            base: BTreeMap::new(),
            chat: BTreeMap::new(),
        };
        for (model, seed_base) in [("base", 100u64), ("chat", 200u64)] {
            for l in self.layers() {
                let shard = ActivationShard::read(&self.out, &shard_stem(model, l, "all"))?;
                let scale = activation_scale(shard.rows.view());
                let cfg = SaeConfig {
                    d_sae: self.config.sae.d_sae,
                    lambda: self.config.sae.lambda,
                    ste_bandwidth: self.config.sae.bandwidth_scale * scale,
                    lr: self.config.sae.lr,
                    batch: self.config.sae.batch,
                    steps: self.config.sae.steps,
                    seed: self.config.seed.wrapping_add(seed_base + l as u64),
                };
                let (params, report, logs) = train_sae(&shard, &cfg)?;
                let stem = sae_stem(model, l);
                save_sae(&params, l as u32, &self.out, &stem)?;
                let mut csv = String::from("step,recon,l0,fvu\n");
                for log in &logs {
                    csv.push_str(&format!(
                        "{},{:.6},{:.4},{:.6}\n",
                        log.step, log.recon, log.l0, log.fvu
                    ));
                }
                std::fs::write(self.out.join(format!("{stem}_metrics.csv")), csv)?;
                outputs.push(format!("{stem}.json"));
                outputs.push(format!("{stem}.bin"));
                outputs.push(format!("{stem}_metrics.csv"));
                let entry = SaeEntry {
                    fvu: report.fvu,
                    mean_l0: report.mean_l0,
                    dead_latents: report.dead_latents,
                    resampled: report.resampled,
                    activation_scale: report.activation_scale,
                    ste_bandwidth: cfg.ste_bandwidth,
                };
                if model == "base" {
                    summary.base.insert(l, entry);
                } else {
                    summary.chat.insert(l, entry);
                }
            }
        }
        write_json(&self.out.join(SAE_SUMMARY), &summary)?;
        outputs.push(SAE_SUMMARY.into());
        outputs.sort();
        Ok(outputs)
    }

    fn stage_score_latents(&self) -> Result<Vec<String>> {
        let suite = self.load_suite("base")?;
        let mut outputs = Vec::new();
        let mut train_tables = Vec::new();
        let mut test_tables = Vec::new();
        let mut rtf = BTreeMap::new();
        for l in self.layers() {
            let entity = ActivationShard::read(&self.out, &shard_stem("base", l, "entity"))?;
            let random = ActivationShard::read(&self.out, &shard_stem("base", l, "random"))?;
            let sae = suite.get(l)?;
            let train_idx = entity.indices_where(|m| m.split == Some(Split::Train));
            let test_idx = entity.indices_where(|m| m.split == Some(Split::Test));
            let train_table =
                separation_scores(&activation_frequencies(sae, l, &entity, &train_idx)?);
            let test_table =
                separation_scores(&activation_frequencies(sae, l, &entity, &test_idx)?);
            let layer_rtf = random_token_frequencies(sae, &random);

            // CSV extract with the random-token frequency appended.
            let mut csv = train_table.to_csv();
            let mut rows: Vec<String> = csv.lines().map(|s| s.to_string()).collect();
            rows[0].push_str(",random_token_freq");
            for (j, row) in rows.iter_mut().enumerate().skip(1) {
                row.push_str(&format!(",{:.6}", layer_rtf[j - 1]));
            }
            csv = rows.join("\n") + "\n";
            let rel = format!("scores/scores_l{l}.csv");
            std::fs::write(self.out.join(&rel), csv)?;
            outputs.push(rel);

            rtf.insert(l, layer_rtf);
            train_tables.push(train_table);
            test_tables.push(test_table);
        }

        let known = select_top_latents(
            &train_tables,
            Class::Known,
            &rtf,
            self.config.analysis.top_k,
            self.config.analysis.rtf_filter,
        )?;
        let unknown = select_top_latents(
            &train_tables,
            Class::Unknown,
            &rtf,
            self.config.analysis.top_k,
            self.config.analysis.rtf_filter,
        )?;
        let test_min = |class: Class, ranked: &RankedLatent| {
            test_tables
                .iter()
                .find(|t| t.layer == ranked.latent.layer)
                .map(|t| t.min_for(class, ranked.latent.index))
                .unwrap_or(f64::NAN)
        };
        let selection = LatentSelection {
            schema_version: PIPELINE_SCHEMA_VERSION,
            rank1_known_train_min: known[0].min_score,
            rank1_unknown_train_min: unknown[0].min_score,
            rank1_known_test_min: test_min(Class::Known, &known[0]),
            rank1_unknown_test_min: test_min(Class::Unknown, &unknown[0]),
            known,
            unknown,
            rtf,
        };
        write_json(&self.out.join(SELECTION), &selection)?;
        let maxmin = MaxMinFile {
            schema_version: PIPELINE_SCHEMA_VERSION,
            known: maxmin_per_layer(&train_tables, Class::Known),
            unknown: maxmin_per_layer(&train_tables, Class::Unknown),
        };
        write_json(&self.out.join(MAXMIN), &maxmin)?;
        outputs.push(SELECTION.into());
        outputs.push(MAXMIN.into());
        outputs.sort();
        Ok(outputs)
    }

    fn stage_sweep_alpha(&self) -> Result<Vec<String>> {
        let tokenizer = self.load_tokenizer()?;
        let chat = self.load_chat()?;
        let suite = self.load_suite("base")?;
        let selection = self.load_selection()?;
        let questions = self.load_questions()?;
        let lexicon = self.lexicon();
        let eos = tokenizer.specials().eos;
        let max_new = self.config.experiments.max_new_tokens;

        let val_known: Vec<PromptRecord> = questions
            .iter()
            .filter(|q| q.split == Split::Validation && q.class == Class::Known)
            .map(|q| q.record.clone())
            .collect();
        let val_unknown: Vec<PromptRecord> = questions
            .iter()
            .filter(|q| q.split == Split::Validation && q.class == Class::Unknown)
            .map(|q| q.record.clone())
            .collect();

        let is_refusal = |s: &str| super::detect_refusal(s, &lexicon);
        let refusals = lexicon.prefixes.clone();
        let is_coherent = move |s: &str| is_grammatical_answer(s, &refusals);

        let run_sweep = |ranked: &RankedLatent,
                             prompts: &[PromptRecord],
                             objective: SweepObjective|
         -> Result<SweepOutcome> {
            let layer = ranked.latent.layer;
            let refs: Vec<&PromptRecord> = prompts.iter().collect();
            let norm = self.entity_norm(&chat, &refs, &tokenizer, layer)?;
            let mut alphas = vec![0.0];
            alphas.extend(
                self.config
                    .analysis
                    .sweep_alpha_scales
                    .iter()
                    .map(|s| s * norm),
            );
            let sae = suite.get(layer)?;
            let spec = SweepSpec {
                latent: ranked.latent,
                direction: sae.latent_direction(ranked.latent.index),
                positions: SteerPositions::EntityAndInstructionEnd,
            };
            let table = sweep_alpha(
                &chat,
                prompts,
                &tokenizer,
                &spec,
                &alphas,
                objective,
                self.config.analysis.coherence_min,
                max_new,
                &[eos],
                &is_refusal,
                &is_coherent,
            )?;
            let alpha = table.recommended.ok_or_else(|| {
                Error::MissingLatentSelection(format!(
                    "sweep for latent (layer {layer}, index {}) met no target",
                    ranked.latent.index
                ))
            })?;
            Ok(SweepOutcome {
                latent_layer: layer,
                latent_index: ranked.latent.index,
                mean_resid_norm: norm,
                table,
                alpha,
            })
        };

        // Unknown latent must induce refusal on known questions.
        let unknown_outcome = run_sweep(
            &selection.unknown[0].clone(),
            &val_known,
            SweepObjective::RaiseRefusal {
                min_rate: self.config.analysis.sweep_refusal_target,
            },
        )?;
        // Known latent must cut refusal on unknown questions, relative to the
        // unsteered baseline.
        let baseline = {
            use rayon::prelude::*;
            let hits: Result<Vec<bool>> = val_unknown
                .par_iter()
                .map(|record| {
                    let ids = tokenizer.encode(&record.text)?;
                    let out = crate::model::generate_greedy(&chat, &ids, max_new, &[eos], None)?;
                    Ok(super::detect_refusal(
                        &crate::interventions::decode_generation(&tokenizer, &out),
                        &lexicon,
                    ))
                })
                .collect();
            let hits = hits?;
            hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64
        };
        let known_outcome = run_sweep(
            &selection.known[0].clone(),
            &val_unknown,
            SweepObjective::LowerRefusal {
                max_rate: baseline * (1.0 - self.config.analysis.sweep_reduction_target),
            },
        )?;

        let file = SweepFile {
            schema_version: PIPELINE_SCHEMA_VERSION,
            unknown_latent: unknown_outcome,
            known_latent: known_outcome,
            baseline_unknown_refusal: baseline,
        };
        write_json(&self.out.join(SWEEP), &file)?;
        Ok(vec![SWEEP.into()])
    }

    fn stage_orthogonalize(&self) -> Result<Vec<String>> {
        let chat = self.load_chat()?;
        let suite = self.load_suite("base")?;
        let selection = self.load_selection()?;
        let unknown = &selection.unknown[0];
        let direction = suite
            .get(unknown.latent.layer)?
            .latent_direction(unknown.latent.index);
        let ortho = orthogonalize_weights(&chat, &direction)?;
        ortho.save(&self.out, "ortho")?;
        let report = serde_json::json!({
            "schema_version": PIPELINE_SCHEMA_VERSION,
            "direction_latent": {"layer": unknown.latent.layer, "index": unknown.latent.index},
            "max_alignment_after": max_residual_alignment(&ortho, &direction),
            "max_alignment_before": max_residual_alignment(&chat, &direction),
        });
        write_json(&self.out.join(ORTHO_REPORT), &report)?;
        Ok(vec![ORTHO_JSON.into(), ORTHO_BIN.into(), ORTHO_REPORT.into()])
    }

    fn stage_steer(&self) -> Result<Vec<String>> {
        let tokenizer = self.load_tokenizer()?;
        let chat = self.load_chat()?;
        let ortho = ModelCheckpoint::load(&self.out, "ortho")?;
        let suite = self.load_suite("base")?;
        let selection = self.load_selection()?;
        let sweep = self.load_sweep()?;
        let questions = self.load_questions()?;
        let lexicon = self.lexicon();

        let known_arm = self.arm(&suite, &selection.known[0], sweep.known_latent.alpha)?;
        let unknown_arm = self.arm(&suite, &selection.unknown[0], sweep.unknown_latent.alpha)?;
        let n_random = self.config.experiments.n_random_latents;
        let random_known_config = self.random_arms(
            &suite,
            &selection,
            known_arm.latent.layer,
            known_arm.latent.index,
            sweep.known_latent.alpha,
            n_random,
            "refusal.random.known_config",
        )?;
        let random_unknown_config = self.random_arms(
            &suite,
            &selection,
            unknown_arm.latent.layer,
            unknown_arm.latent.index,
            sweep.unknown_latent.alpha,
            n_random,
            "refusal.random.unknown_config",
        )?;
        let inputs = RefusalInputs {
            chat: &chat,
            orthogonalized: &ortho,
            known_questions: &self.capped_test_questions(&questions, Class::Known),
            unknown_questions: &self.capped_test_questions(&questions, Class::Unknown),
            known_arm,
            unknown_arm,
            random_known_config,
            random_unknown_config,
            lexicon: &lexicon,
            max_new: self.config.experiments.max_new_tokens,
            seed: self.config.seed,
        };
        let snapshot = serde_json::to_value(&self.config.experiments)?;
        let (mut report, archive) = run_refusal_experiment(&inputs, &tokenizer, snapshot)?;
        report.artifacts.push(REFUSAL_GENERATIONS.into());
        write_jsonl(&self.out.join(REFUSAL_GENERATIONS), "generations", &archive)?;
        report.save(&self.out.join(REFUSAL))?;
        Ok(vec![REFUSAL.into(), REFUSAL_GENERATIONS.into()])
    }

    fn stage_patch(&self) -> Result<Vec<String>> {
        let world = self.load_world()?;
        let tokenizer = self.load_tokenizer()?;
        let labels = self.load_labels()?;
        let splits = self.load_splits()?;
        let base = self.load_base()?;
        let probes = self.labeled_probe_records(&world, &labels.labels, &splits);

        // Token-aligned (known, unknown) pairs: same etype, same relation,
        // same name token count.
        let mut pairs = Vec::new();
        for etype in crate::world::EntityType::ALL {
            let mut count = 0usize;
            let knowns: Vec<&(PromptRecord, Class, Split)> = probes
                .iter()
                .filter(|(r, c, s)| {
                    world.entity(r.entity_id).etype == etype
                        && *c == Class::Known
                        && *s == Split::Test
                })
                .map(|t| t)
                .collect();
            let unknowns: Vec<&(PromptRecord, Class, Split)> = probes
                .iter()
                .filter(|(r, c, s)| {
                    world.entity(r.entity_id).etype == etype
                        && *c == Class::Unknown
                        && *s == Split::Test
                })
                .collect();
            'outer: for (kr, _, _) in &knowns {
                let k_len = tokenizer.encode(&kr.text)?.len();
                for (ur, _, _) in &unknowns {
                    if ur.relation == kr.relation
                        && tokenizer.encode(&ur.text)?.len() == k_len
                        && !pairs
                            .iter()
                            .any(|(a, b): &(PromptRecord, PromptRecord)| a.id == kr.id && b.id == ur.id)
                    {
                        pairs.push(((*kr).clone(), (*ur).clone()));
                        count += 1;
                        if count >= self.config.experiments.patch_pairs_per_etype {
                            break 'outer;
                        }
                        break;
                    }
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::MissingLatentSelection(
                "no token-aligned known/unknown probe pairs".into(),
            ));
        }
        let grids = super::attention::run_patching(
            &base,
            &pairs,
            &tokenizer,
            self.config.experiments.top_heads,
        )?;
        let value = serde_json::json!({
            "schema_version": PIPELINE_SCHEMA_VERSION,
            "grids": grids,
            "pairs": pairs
                .iter()
                .map(|(a, b)| serde_json::json!({"clean": a.id, "corrupted": b.id}))
                .collect::<Vec<_>>(),
        });
        write_json(&self.out.join(PATCHING), &value)?;
        Ok(vec![PATCHING.into()])
    }

    fn stage_attn(&self) -> Result<Vec<String>> {
        let world = self.load_world()?;
        let tokenizer = self.load_tokenizer()?;
        let labels = self.load_labels()?;
        let splits = self.load_splits()?;
        let base = self.load_base()?;
        let suite = self.load_suite("base")?;
        let selection = self.load_selection()?;
        let patching: serde_json::Value = read_json(&self.out.join(PATCHING))?;
        let grids: super::attention::PatchGrids =
            serde_json::from_value(patching["grids"].clone())?;
        let heads: Vec<(usize, usize)> =
            grids.top_heads.iter().map(|&(l, h, _)| (l, h)).collect();

        let probes = self.labeled_probe_records(&world, &labels.labels, &splits);
        let known: Vec<PromptRecord> = probes
            .iter()
            .filter(|(_, c, s)| *c == Class::Known && *s == Split::Test)
            .map(|(r, _, _)| r.clone())
            .collect();
        let unknown: Vec<PromptRecord> = probes
            .iter()
            .filter(|(_, c, s)| *c == Class::Unknown && *s == Split::Test)
            .map(|(r, _, _)| r.clone())
            .collect();

        let scale = self.config.experiments.attention_alpha_scale;
        let known_refs: Vec<&PromptRecord> = known.iter().collect();
        let unknown_layer = selection.unknown[0].latent.layer;
        let known_layer = selection.known[0].latent.layer;
        let alpha_unknown =
            scale * self.entity_norm(&base, &known_refs, &tokenizer, unknown_layer)?;
        let unknown_refs: Vec<&PromptRecord> = unknown.iter().collect();
        let alpha_known =
            scale * self.entity_norm(&base, &unknown_refs, &tokenizer, known_layer)?;

        let inputs = AttentionInputs {
            base: &base,
            known_prompts: &known,
            unknown_prompts: &unknown,
            heads,
            known_arm: self.arm(&suite, &selection.known[0], alpha_known)?,
            unknown_arm: self.arm(&suite, &selection.unknown[0], alpha_unknown)?,
            seed: self.config.seed,
        };
        let snapshot = serde_json::to_value(&self.config.experiments)?;
        let report = run_attention_experiment(&inputs, &tokenizer, snapshot)?;
        report.save(&self.out.join(ATTENTION))?;
        Ok(vec![ATTENTION.into()])
    }

    fn stage_self_knowledge(&self) -> Result<Vec<String>> {
        let tokenizer = self.load_tokenizer()?;
        let chat = self.load_chat()?;
        let suite = self.load_suite("base")?;
        let selection = self.load_selection()?;
        let prompts: Vec<EvalPrompt> = read_jsonl(&self.out.join(SELFKNOW), "eval_questions")?;
        let known: Vec<EvalPrompt> = prompts
            .iter()
            .filter(|p| p.split == Split::Test && p.class == Class::Known)
            .cloned()
            .collect();
        let unknown: Vec<EvalPrompt> = prompts
            .iter()
            .filter(|p| p.split == Split::Test && p.class == Class::Unknown)
            .cloned()
            .collect();

        let scale = self.config.experiments.self_knowledge_alpha_scale;
        let known_records: Vec<&PromptRecord> = known.iter().map(|p| &p.record).collect();
        let unknown_records: Vec<&PromptRecord> = unknown.iter().map(|p| &p.record).collect();
        let alpha_unknown = scale
            * self.entity_norm(
                &chat,
                &known_records,
                &tokenizer,
                selection.unknown[0].latent.layer,
            )?;
        let alpha_known = scale
            * self.entity_norm(
                &chat,
                &unknown_records,
                &tokenizer,
                selection.known[0].latent.layer,
            )?;
        let unknown_arm = self.arm(&suite, &selection.unknown[0], alpha_unknown)?;
        let known_arm = self.arm(&suite, &selection.known[0], alpha_known)?;
        let random_for_known_panel = self
            .random_arms(
                &suite,
                &selection,
                unknown_arm.latent.layer,
                unknown_arm.latent.index,
                alpha_unknown,
                1,
                "selfknow.random.known_panel",
            )?
            .remove(0);
        let random_for_unknown_panel = self
            .random_arms(
                &suite,
                &selection,
                known_arm.latent.layer,
                known_arm.latent.index,
                alpha_known,
                1,
                "selfknow.random.unknown_panel",
            )?
            .remove(0);

        let inputs = SelfKnowledgeInputs {
            chat: &chat,
            known_prompts: &known,
            unknown_prompts: &unknown,
            known_arm,
            unknown_arm,
            random_for_known_panel,
            random_for_unknown_panel,
            yes_id: tokenizer.id_of("Yes")?,
            no_id: tokenizer.id_of("No")?,
            seed: self.config.seed,
        };
        let snapshot = serde_json::to_value(&self.config.experiments)?;
        let (mut report, known_rows, unknown_rows) =
            run_self_knowledge_experiment(&inputs, &tokenizer, snapshot)?;
        report.artifacts.push(SELF_KNOWLEDGE_ROWS.into());
        write_json(
            &self.out.join(SELF_KNOWLEDGE_ROWS),
            &serde_json::json!({
                "schema_version": PIPELINE_SCHEMA_VERSION,
                "known_panel": known_rows,
                "unknown_panel": unknown_rows,
            }),
        )?;
        report.save(&self.out.join(SELF_KNOWLEDGE))?;
        Ok(vec![SELF_KNOWLEDGE.into(), SELF_KNOWLEDGE_ROWS.into()])
    }

    fn stage_uncertainty(&self) -> Result<Vec<String>> {
        let tokenizer = self.load_tokenizer()?;
        let chat = self.load_chat()?;
        let suite = self.load_suite("chat")?;
        let questions = self.load_questions()?;
        let mut shards = BTreeMap::new();
        for l in self.layers() {
            shards.insert(
                l,
                ActivationShard::read(&self.out, &shard_stem("chat", l, "assistant"))?,
            );
        }
        // Shard rows must align 1:1 with questions.
        for shard in shards.values() {
            if shard.count() != questions.len() {
                return Err(Error::ShardFormat(
                    "assistant shard row count does not match questions".into(),
                ));
            }
            for (meta, q) in shard.meta.iter().zip(&questions) {
                if meta.prompt_id != q.record.id {
                    return Err(Error::ShardFormat(format!(
                        "assistant shard misaligned at {}",
                        meta.prompt_id
                    )));
                }
            }
        }
        let lexicon = self.lexicon();
        let inputs = UncertaintyInputs {
            chat: &chat,
            suite: &suite,
            questions: &questions,
            assistant_shards: &shards,
            lexicon: &lexicon,
            fuzzy_threshold: self.config.world.fuzzy_threshold,
            max_new: self.config.experiments.max_new_tokens,
            seed: self.config.seed,
        };
        let snapshot = serde_json::to_value(&self.config.experiments)?;
        let (mut report, outcomes, table) =
            run_uncertainty_experiment(&inputs, &tokenizer, snapshot)?;
        report.artifacts.push(UNCERTAINTY_ANSWERS.into());
        report.artifacts.push(UNCERTAINTY_TTABLE.into());
        write_jsonl(&self.out.join(UNCERTAINTY_ANSWERS), "answers", &outcomes)?;
        write_json(
            &self.out.join(UNCERTAINTY_TTABLE),
            &serde_json::json!({
                "schema_version": PIPELINE_SCHEMA_VERSION,
                "min_t": table.min_t,
                "used_etypes": table.used_etypes,
                "dropped_etypes": table.dropped_etypes,
            }),
        )?;
        report.save(&self.out.join(UNCERTAINTY))?;
        Ok(vec![
            UNCERTAINTY.into(),
            UNCERTAINTY_ANSWERS.into(),
            UNCERTAINTY_TTABLE.into(),
        ])
    }

    fn stage_report(&self) -> Result<Vec<String>> {
        let labels = self.load_labels()?;
        let base_eval: BaseEvalFile = read_json(&self.out.join(BASE_EVAL))?;
        let sae_summary: SaeSummaryFile = read_json(&self.out.join(SAE_SUMMARY))?;
        let selection = self.load_selection()?;
        let maxmin: MaxMinFile = read_json(&self.out.join(MAXMIN))?;
        let sweep = self.load_sweep()?;
        let ortho: serde_json::Value = read_json(&self.out.join(ORTHO_REPORT))?;
        let refusal = ExperimentReport::load(&self.out.join(REFUSAL))?;
        let patching: serde_json::Value = read_json(&self.out.join(PATCHING))?;
        let attention = ExperimentReport::load(&self.out.join(ATTENTION))?;
        let self_knowledge = ExperimentReport::load(&self.out.join(SELF_KNOWLEDGE))?;
        let uncertainty = ExperimentReport::load(&self.out.join(UNCERTAINTY))?;

        let world = self.load_world()?;
        let mut verdicts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &labels.labels {
            let key = match l.verdict {
                Verdict::Known => "known",
                Verdict::Unknown => "unknown",
                Verdict::Discarded => "discarded",
            };
            *verdicts.entry(key).or_insert(0) += 1;
        }
        let metrics = serde_json::json!({
            "schema_version": PIPELINE_SCHEMA_VERSION,
            "seed": self.config.seed,
            "config": self.config,
            "world": {
                "n_entities": world.entities.len(),
            },
            "base": {
                "attr_accuracy_known_train": base_eval.attr_accuracy_known_train,
                "n_known_train": base_eval.n_known_train,
            },
            "classify": {
                "agreement": labels.agreement,
                "verdicts": verdicts,
            },
            "sae": sae_summary,
            "latents": {
                "rank1_known": selection.known[0],
                "rank1_unknown": selection.unknown[0],
                "rank1_known_train_min": selection.rank1_known_train_min,
                "rank1_unknown_train_min": selection.rank1_unknown_train_min,
                "rank1_known_test_min": selection.rank1_known_test_min,
                "rank1_unknown_test_min": selection.rank1_unknown_test_min,
            },
            "maxmin": maxmin,
            "sweep": sweep,
            "orthogonalize": ortho,
            "refusal": refusal.metrics,
            "patching": patching["grids"],
            "attention": attention.metrics,
            "self_knowledge": self_knowledge.metrics,
            "uncertainty": uncertainty.metrics,
        });
        write_json(&self.out.join(METRICS), &metrics)?;
        Ok(vec![METRICS.into()])
    }
}

/// Where the deterministic metrics document lands.
pub fn metrics_path(out: &Path) -> PathBuf {
    out.join(METRICS)
}
