//! Synthetic entity universe: entities with closed-pool attributes, corpus
//! rendering (facts, chat QA with refusals, self-knowledge probes), fuzzy
//! knownness probing, and stratified splits.

pub mod pools;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate_greedy, ModelCheckpoint};
use crate::rng;
use crate::tokenizer::Tokenizer;

pub const WORLD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Player,
    Movie,
    City,
    Song,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [
        EntityType::Player,
        EntityType::Movie,
        EntityType::City,
        EntityType::Song,
    ];

    pub fn relations(self) -> [Relation; 3] {
        use Relation::*;
        match self {
            EntityType::Player => [Birthplace, Birthdate, Team],
            EntityType::Movie => [Director, ReleaseYear, Genre],
            EntityType::City => [Country, PopulationBucket, Landmark],
            EntityType::Song => [Artist, ReleaseYear, Genre],
        }
    }

    pub fn word(self) -> &'static str {
        pools::etype_word(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Birthplace,
    Birthdate,
    Team,
    Director,
    ReleaseYear,
    Genre,
    Country,
    PopulationBucket,
    Landmark,
    Artist,
}

impl Relation {
    pub fn tag(self) -> &'static str {
        match self {
            Relation::Birthplace => "birthplace",
            Relation::Birthdate => "birthdate",
            Relation::Team => "team",
            Relation::Director => "director",
            Relation::ReleaseYear => "release_year",
            Relation::Genre => "genre",
            Relation::Country => "country",
            Relation::PopulationBucket => "population_bucket",
            Relation::Landmark => "landmark",
            Relation::Artist => "artist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub etype: EntityType,
    pub name: String,
    pub attributes: BTreeMap<Relation, String>,
    pub designed_known: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityWorld {
    pub schema_version: u32,
    pub seed: u64,
    pub counts: BTreeMap<EntityType, usize>,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptForm {
    FactCompletion,
    Question,
    SelfKnowledge,
    ChatRendered,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    pub entity_id: EntityId,
    /// Byte range of the entity name inside `text`.
    pub entity_char_span: (usize, usize),
    pub form: PromptForm,
    pub relation: Option<Relation>,
    pub gold_answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Known,
    Unknown,
    Discarded,
}

impl Verdict {
    /// known <=> >= 2 attributes correct; unknown <=> 0 correct; else discarded.
    pub fn from_correctness(per_attribute_correct: &[bool]) -> Verdict {
        let correct = per_attribute_correct.iter().filter(|&&c| c).count();
        if correct >= 2 {
            Verdict::Known
        } else if correct == 0 {
            Verdict::Unknown
        } else {
            Verdict::Discarded
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnownnessLabel {
    pub entity_id: EntityId,
    pub verdict: Verdict,
    pub per_attribute_correct: Vec<bool>,
}

/// Known/unknown class of a labeled (non-discarded) entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Known,
    Unknown,
}

impl Class {
    pub fn from_verdict(v: Verdict) -> Option<Class> {
        match v {
            Verdict::Known => Some(Class::Known),
            Verdict::Unknown => Some(Class::Unknown),
            Verdict::Discarded => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Class::Known => "known",
            Class::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub schema_version: u32,
    pub seed: u64,
    pub assignment: BTreeMap<EntityId, Split>,
}

impl SplitAssignment {
    pub fn of(&self, id: EntityId) -> Option<Split> {
        self.assignment.get(&id).copied()
    }
}

/// A rendered prompt plus the split/class bookkeeping experiments need.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub record: PromptRecord,
    pub etype: EntityType,
    pub split: Split,
    pub class: Class,
}

impl EntityWorld {
    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id.0 as usize]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EntityWorld> {
        let world: EntityWorld = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if world.schema_version != WORLD_SCHEMA_VERSION {
            return Err(Error::InvalidWorld(format!(
                "world schema_version {} != {}",
                world.schema_version, WORLD_SCHEMA_VERSION
            )));
        }
        Ok(world)
    }
}

/// Tokenizer over the closed static pools; identical across world seeds.
pub fn standard_tokenizer() -> Tokenizer {
    let mut words = BTreeSet::new();
    pools::all_static_words(&mut words);
    Tokenizer::from_words(&words)
}

// ---------------------------------------------------------------------------
// generate_world
// ---------------------------------------------------------------------------

pub fn generate_world(seed: u64, counts: &BTreeMap<EntityType, usize>) -> Result<EntityWorld> {
    for etype in EntityType::ALL {
        let n = counts.get(&etype).copied().unwrap_or(0);
        if n < 8 {
            return Err(Error::InvalidWorld(format!(
                "need >= 8 {} entities, got {n}",
                etype.word()
            )));
        }
        if n % 2 != 0 {
            return Err(Error::InvalidWorld(format!(
                "entity count for {} must be even to split half known (got {n})",
                etype.word()
            )));
        }
    }

    let mut entities = Vec::new();
    let mut used_names: BTreeSet<String> = BTreeSet::new();
    let mut next_id = 0u32;
    for etype in EntityType::ALL {
        let n = counts[&etype];
        let mut rng = rng::stream(seed, &format!("world.{}", etype.word()));
        // Which half is designed-known.
        let mut known_flags = vec![false; n];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in order.iter().take(n / 2) {
            known_flags[i] = true;
        }
        for flag in known_flags.into_iter().take(n) {
            let name = sample_unique_name(etype, &mut rng, &mut used_names)?;
            let mut attributes = BTreeMap::new();
            for relation in etype.relations() {
                let pool = pools::value_pool(etype, relation);
                attributes.insert(relation, pool[rng.random_range(0..pool.len())].to_string());
            }
            entities.push(Entity {
                id: EntityId(next_id),
                etype,
                name,
                attributes,
                designed_known: flag,
            });
            next_id += 1;
        }
    }
    Ok(EntityWorld {
        schema_version: WORLD_SCHEMA_VERSION,
        seed,
        counts: counts.clone(),
        entities,
    })
}

/// 2-4 syllable two-word name, e.g. "Wil son Bro wn". Each syllable is one
/// token, so names are always >= 2 tokens.
fn sample_name(etype: EntityType, rng: &mut impl Rng) -> String {
    let (caps, lows) = pools::syllables(etype);
    let k = match rng.random_range(0..10) {
        0..=4 => 2,
        5..=7 => 3,
        _ => 4,
    };
    let first_len = match k {
        2 => 1,
        3 => rng.random_range(1..=2),
        _ => 2,
    };
    let second_len = k - first_len;
    let mut parts: Vec<&str> = Vec::with_capacity(k);
    parts.push(caps[rng.random_range(0..caps.len())]);
    if first_len == 2 {
        parts.push(lows[rng.random_range(0..lows.len())]);
    }
    parts.push(caps[rng.random_range(0..caps.len())]);
    if second_len == 2 {
        parts.push(lows[rng.random_range(0..lows.len())]);
    }
    parts.join(" ")
}

fn sample_unique_name(
    etype: EntityType,
    rng: &mut impl Rng,
    used: &mut BTreeSet<String>,
) -> Result<String> {
    for _ in 0..1000 {
        let name = sample_name(etype, rng);
        if used.insert(name.clone()) {
            return Ok(name);
        }
    }
    Err(Error::NameExhaustion {
        etype: etype.word(),
        requested: used.len() + 1,
        generated: used.len(),
    })
}

// ---------------------------------------------------------------------------
// corpus rendering
// ---------------------------------------------------------------------------

fn fact_record(entity: &Entity, relation: Relation, variant: usize) -> PromptRecord {
    let (prefix, suffix) = pools::fact_template(entity.etype, relation, variant);
    let lead = format!("<bos> {prefix}");
    let text = format!("{lead}{}{suffix}", entity.name);
    PromptRecord {
        id: format!("fact:e{:03}:{}:v{variant}", entity.id.0, relation.tag()),
        text,
        entity_id: entity.id,
        entity_char_span: (lead.len(), lead.len() + entity.name.len()),
        form: PromptForm::FactCompletion,
        relation: Some(relation),
        gold_answer: entity.attributes[&relation].clone(),
    }
}

fn chat_question_record(entity: &Entity, relation: Relation, gold: String, kind: &str) -> PromptRecord {
    let (prefix, suffix) = pools::question_template(entity.etype, relation);
    let lead = format!("<bos> <user> {prefix}");
    let text = format!("{lead}{}{suffix} </user> <model>", entity.name);
    PromptRecord {
        id: format!("{kind}:e{:03}:{}", entity.id.0, relation.tag()),
        text,
        entity_id: entity.id,
        entity_char_span: (lead.len(), lead.len() + entity.name.len()),
        form: if kind == "chat" {
            PromptForm::ChatRendered
        } else {
            PromptForm::Question
        },
        relation: Some(relation),
        gold_answer: gold,
    }
}

fn self_knowledge_record(entity: &Entity, gold_yes: bool, kind: &str) -> PromptRecord {
    let (prefix, suffix) = pools::self_knowledge_template(entity.etype);
    let lead = format!("<bos> <user> {prefix}");
    let text = format!("{lead}{}{suffix} </user> <model>", entity.name);
    PromptRecord {
        id: format!("{kind}:e{:03}", entity.id.0),
        text,
        entity_id: entity.id,
        entity_char_span: (lead.len(), lead.len() + entity.name.len()),
        form: PromptForm::SelfKnowledge,
        relation: None,
        gold_answer: (if gold_yes { pools::YES } else { pools::NO }).to_string(),
    }
}

/// Full next-token training line for a rendered record.
pub fn training_line(record: &PromptRecord) -> String {
    format!("{} {} <eos>", record.text, record.gold_answer)
}

/// Declarative fact corpus: one record per (designed-known entity, relation,
/// template variant). Designed-unknown entities never appear.
pub fn render_fact_corpus(world: &EntityWorld) -> Vec<PromptRecord> {
    let mut out = Vec::new();
    for entity in world.entities.iter().filter(|e| e.designed_known) {
        for relation in entity.etype.relations() {
            for variant in 0..pools::FACT_TEMPLATE_VARIANTS {
                out.push(fact_record(entity, relation, variant));
            }
        }
    }
    out
}

/// Fact-completion probes over all entities (variant 0 only); used for
/// knownness classification and activation harvesting.
pub fn render_probe_prompts(world: &EntityWorld) -> Vec<PromptRecord> {
    let mut out = Vec::new();
    for entity in &world.entities {
        for relation in entity.etype.relations() {
            let mut r = fact_record(entity, relation, 0);
            r.id = format!("probe:e{:03}:{}", entity.id.0, relation.tag());
            out.push(r);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatCorpusOptions {
    /// Fraction of unknown train-split entities mapped to refusal answers;
    /// the rest keep their pool answers so an answer pathway survives for
    /// unfamiliar names.
    pub refusal_fraction: f64,
    pub seed: u64,
}

/// Chat training corpus over the train split: QA with answers for known
/// entities, refusals for the designated unknown subset, answers for the
/// rest, plus self-knowledge probes for every train entity.
pub fn render_chat_corpus(
    world: &EntityWorld,
    refusal_lexicon: &[String],
    labels: &[KnownnessLabel],
    splits: &SplitAssignment,
    opts: &ChatCorpusOptions,
) -> Result<Vec<PromptRecord>> {
    if refusal_lexicon.is_empty() {
        return Err(Error::InvalidConfig("refusal lexicon is empty".into()));
    }
    let verdicts: BTreeMap<EntityId, Verdict> =
        labels.iter().map(|l| (l.entity_id, l.verdict)).collect();
    let train: Vec<&Entity> = world
        .entities
        .iter()
        .filter(|e| splits.of(e.id) == Some(Split::Train))
        .collect();
    if train.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }

    // Designated refusal subset of unknown train entities, per etype.
    let mut rng = rng::stream(opts.seed, "chat.refusal_subset");
    let mut refusal_subset: BTreeSet<EntityId> = BTreeSet::new();
    for etype in EntityType::ALL {
        let mut unknowns: Vec<EntityId> = train
            .iter()
            .filter(|e| e.etype == etype && verdicts.get(&e.id) == Some(&Verdict::Unknown))
            .map(|e| e.id)
            .collect();
        unknowns.shuffle(&mut rng);
        let n_refuse = (opts.refusal_fraction * unknowns.len() as f64).ceil() as usize;
        refusal_subset.extend(unknowns.into_iter().take(n_refuse));
    }

    let mut out = Vec::new();
    let mut refusal_rng = rng::stream(opts.seed, "chat.refusal_choice");
    for entity in &train {
        let verdict = match verdicts.get(&entity.id) {
            Some(v) => *v,
            None => continue,
        };
        match verdict {
            Verdict::Known => {
                for relation in entity.etype.relations() {
                    out.push(chat_question_record(
                        entity,
                        relation,
                        entity.attributes[&relation].clone(),
                        "chat",
                    ));
                }
                out.push(self_knowledge_record(entity, true, "selfknow"));
            }
            Verdict::Unknown => {
                let refuse = refusal_subset.contains(&entity.id);
                for relation in entity.etype.relations() {
                    let gold = if refuse {
                        refusal_lexicon[refusal_rng.random_range(0..refusal_lexicon.len())].clone()
                    } else {
                        entity.attributes[&relation].clone()
                    };
                    out.push(chat_question_record(entity, relation, gold, "chat"));
                }
                out.push(self_knowledge_record(entity, false, "selfknow"));
            }
            Verdict::Discarded => {}
        }
    }
    Ok(out)
}

/// Question prompts for every labeled (non-discarded) entity across all
/// splits, tagged with split and class.
pub fn render_eval_questions(
    world: &EntityWorld,
    labels: &[KnownnessLabel],
    splits: &SplitAssignment,
) -> Vec<EvalPrompt> {
    let mut out = Vec::new();
    for label in labels {
        let class = match Class::from_verdict(label.verdict) {
            Some(c) => c,
            None => continue,
        };
        let split = match splits.of(label.entity_id) {
            Some(s) => s,
            None => continue,
        };
        let entity = world.entity(label.entity_id);
        for relation in entity.etype.relations() {
            out.push(EvalPrompt {
                record: chat_question_record(
                    entity,
                    relation,
                    entity.attributes[&relation].clone(),
                    "q",
                ),
                etype: entity.etype,
                split,
                class,
            });
        }
    }
    out
}

/// Self-knowledge probes for every labeled entity, gold Yes for known and No
/// for unknown.
pub fn render_self_knowledge_eval(
    world: &EntityWorld,
    labels: &[KnownnessLabel],
    splits: &SplitAssignment,
) -> Vec<EvalPrompt> {
    let mut out = Vec::new();
    for label in labels {
        let class = match Class::from_verdict(label.verdict) {
            Some(c) => c,
            None => continue,
        };
        let split = match splits.of(label.entity_id) {
            Some(s) => s,
            None => continue,
        };
        let entity = world.entity(label.entity_id);
        out.push(EvalPrompt {
            record: self_knowledge_record(entity, class == Class::Known, "skq"),
            etype: entity.etype,
            split,
            class,
        });
    }
    out
}

/// Generic filler lines (the stand-in for web-corpus text): full training
/// lines wrapped in bos/eos.
pub fn render_filler_corpus(seed: u64, n_lines: usize) -> Vec<String> {
    let mut rng = rng::stream(seed, "filler");
    let mut out = Vec::with_capacity(n_lines);
    for _ in 0..n_lines {
        let s = pools::FILLER_SUBJECTS[rng.random_range(0..pools::FILLER_SUBJECTS.len())];
        let v = pools::FILLER_VERBS[rng.random_range(0..pools::FILLER_VERBS.len())];
        let o = pools::FILLER_OBJECTS[rng.random_range(0..pools::FILLER_OBJECTS.len())];
        out.push(format!("<bos> {s} {v} {o}. <eos>"));
    }
    out
}

// ---------------------------------------------------------------------------
// knownness probing
// ---------------------------------------------------------------------------

pub mod fuzzy {
    /// Normalized edit similarity in [0,1]: 1 - lev(a,b)/max(|a|,|b|) after
    /// lowercasing and whitespace collapsing.
    pub fn normalized_similarity(a: &str, b: &str) -> f64 {
        let a = normalize(a);
        let b = normalize(b);
        let (la, lb) = (a.chars().count(), b.chars().count());
        if la == 0 && lb == 0 {
            return 1.0;
        }
        1.0 - levenshtein(&a, &b) as f64 / la.max(lb) as f64
    }

    fn normalize(s: &str) -> String {
        s.split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase()
    }

    fn levenshtein(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        let mut cur = vec![0usize; b.len() + 1];
        for (i, &ca) in a.iter().enumerate() {
            cur[0] = i + 1;
            for (j, &cb) in b.iter().enumerate() {
                let cost = usize::from(ca != cb);
                cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        prev[b.len()]
    }
}

/// Probe every entity's attributes with greedy decoding and label it by the
/// >=2-correct / all-wrong rule.
pub fn classify_known_unknown(
    checkpoint: &ModelCheckpoint,
    world: &EntityWorld,
    tokenizer: &Tokenizer,
    fuzzy_threshold: f64,
) -> Result<Vec<KnownnessLabel>> {
    if checkpoint.config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::VocabMismatch {
            model: checkpoint.config.vocab_size,
            tokenizer: tokenizer.vocab_size(),
        });
    }
    let eos = tokenizer.specials().eos;
    use rayon::prelude::*;
    let labels: Result<Vec<KnownnessLabel>> = world
        .entities
        .par_iter()
        .map(|entity| {
            let mut per_attribute_correct = Vec::with_capacity(3);
            for relation in entity.etype.relations() {
                let record = fact_record(entity, relation, 0);
                let prompt = tokenizer.encode(&record.text)?;
                let gold_len = tokenizer.encode(&record.gold_answer)?.len();
                let generated =
                    generate_greedy(checkpoint, &prompt, gold_len + 2, &[eos], None)?;
                let answer_ids: Vec<u32> =
                    generated.into_iter().filter(|&t| t != eos).collect();
                let answer = tokenizer.decode(&answer_ids);
                per_attribute_correct.push(
                    fuzzy::normalized_similarity(&answer, &record.gold_answer)
                        >= fuzzy_threshold,
                );
            }
            Ok(KnownnessLabel {
                entity_id: entity.id,
                verdict: Verdict::from_correctness(&per_attribute_correct),
                per_attribute_correct,
            })
        })
        .collect();
    labels
}

/// Fraction of entities whose probed verdict matches their designed
/// knownness (Discarded counts as disagreement).
pub fn classification_agreement(world: &EntityWorld, labels: &[KnownnessLabel]) -> f64 {
    let agree = labels
        .iter()
        .filter(|l| {
            let designed = world.entity(l.entity_id).designed_known;
            matches!(
                (designed, l.verdict),
                (true, Verdict::Known) | (false, Verdict::Unknown)
            )
        })
        .count();
    agree as f64 / labels.len() as f64
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

pub const MIN_STRATUM: usize = 10;
const SPLIT_SHARES: [(Split, f64); 3] = [
    (Split::Train, 0.5),
    (Split::Validation, 0.1),
    (Split::Test, 0.4),
];

/// Stratified 50/10/40 split per (etype, verdict in {known, unknown}) via
/// largest-remainder quotas; discarded entities are excluded entirely.
pub fn make_splits(
    world: &EntityWorld,
    labels: &[KnownnessLabel],
    seed: u64,
) -> Result<SplitAssignment> {
    let mut assignment = BTreeMap::new();
    for etype in EntityType::ALL {
        for class in [Verdict::Known, Verdict::Unknown] {
            let mut ids: Vec<EntityId> = labels
                .iter()
                .filter(|l| l.verdict == class && world.entity(l.entity_id).etype == etype)
                .map(|l| l.entity_id)
                .collect();
            if ids.len() < MIN_STRATUM {
                return Err(Error::StratumTooSmall {
                    etype: etype.word(),
                    verdict: if class == Verdict::Known { "known" } else { "unknown" },
                    count: ids.len(),
                    min: MIN_STRATUM,
                });
            }
            let mut rng =
                rng::stream(seed, &format!("splits.{}.{:?}", etype.word(), class));
            ids.shuffle(&mut rng);
            let counts = largest_remainder(ids.len());
            let mut cursor = 0;
            for ((split, _), n) in SPLIT_SHARES.iter().zip(counts) {
                for id in &ids[cursor..cursor + n] {
                    assignment.insert(*id, *split);
                }
                cursor += n;
            }
        }
    }
    Ok(SplitAssignment {
        schema_version: WORLD_SCHEMA_VERSION,
        seed,
        assignment,
    })
}

fn largest_remainder(n: usize) -> [usize; 3] {
    let quotas: Vec<f64> = SPLIT_SHARES.iter().map(|(_, s)| s * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    // Distribute by descending fractional part; ties favor earlier shares.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// True iff the trimmed answer text is exactly one closed-world answer: an
/// attribute-pool value, a refusal string, or Yes/No. The coherence check for
/// steered generations.
pub fn is_grammatical_answer(answer: &str, refusals: &[String]) -> bool {
    use std::sync::OnceLock;
    static VALUES: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    let values = VALUES.get_or_init(|| {
        let mut set = BTreeSet::new();
        for etype in EntityType::ALL {
            for relation in etype.relations() {
                for v in pools::value_pool(etype, relation) {
                    set.insert(*v);
                }
            }
        }
        set.insert(pools::YES);
        set.insert(pools::NO);
        set
    });
    let trimmed = answer.trim();
    values.contains(trimmed) || refusals.iter().any(|r| r.trim() == trimmed)
}

// ---------------------------------------------------------------------------
// token positions
// ---------------------------------------------------------------------------

/// Index of the last token whose byte range intersects the record's entity
/// span, under tokenization of the full prompt text.
pub fn last_entity_token_index(record: &PromptRecord, tokenizer: &Tokenizer) -> Result<usize> {
    let (start, end) = record.entity_char_span;
    let spans = tokenizer.encode_with_spans(&record.text)?;
    let mut last = None;
    for (i, (_, range)) in spans.iter().enumerate() {
        if range.start < end && range.end > start {
            // A token straddling the span boundary means broken rendering.
            if range.start < start || range.end > end {
                return Err(Error::SpanMisaligned {
                    prompt_id: record.id.clone(),
                });
            }
            last = Some(i);
        }
    }
    last.ok_or_else(|| Error::SpanMisaligned {
        prompt_id: record.id.clone(),
    })
}

#[cfg(test)]
mod tests;
