//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // --- world / tokenizer ---
    #[error("syllable pool exhausted for {etype}: generated {generated} of {requested} unique names")]
    NameExhaustion {
        etype: &'static str,
        requested: usize,
        generated: usize,
    },
    #[error("invalid world config: {0}")]
    InvalidWorld(String),
    #[error("token not in vocabulary: {0:?}")]
    UnknownToken(String),
    #[error("entity span misaligned with tokenization in prompt {prompt_id}")]
    SpanMisaligned { prompt_id: String },
    #[error("chat corpus requires a non-empty train split")]
    EmptyTrainSplit,
    #[error("split stratum ({etype}, {verdict}) has {count} entities, need >= {min}")]
    StratumTooSmall {
        etype: &'static str,
        verdict: &'static str,
        count: usize,
        min: usize,
    },
    #[error("model vocab size {model} does not match tokenizer vocab size {tokenizer}")]
    VocabMismatch { model: usize, tokenizer: usize },

    // --- model ---
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },
    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("hook {0:?} out of range for model config")]
    HookOutOfRange(String),
    #[error("interventions at attention-pattern hooks are not supported")]
    UnsupportedIntervention,
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("training diverged at step {step}: loss = {loss} (grad norm {grad_norm})")]
    Divergence {
        step: usize,
        loss: f64,
        grad_norm: f64,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("direction must be unit-norm (got {0})")]
    NotUnitNorm(f64),

    // --- store / sae ---
    #[error("bad activation shard: {0}")]
    ShardFormat(String),
    #[error("cannot resolve {rule} position for prompt {prompt_id}")]
    UnresolvablePosition { prompt_id: String, rule: String },
    #[error("invalid SAE config: {0}")]
    InvalidSaeConfig(String),
    #[error("dictionary entirely dead and no usable data direction to resample from")]
    AllDeadDictionary,

    // --- metrics ---
    #[error("no samples for ({etype}, {class}) frequency cell")]
    EmptyClassCell { etype: &'static str, class: &'static str },
    #[error("every latent was removed by the random-token frequency filter")]
    AllLatentsFiltered,
    #[error("labels contain a single class in {0}")]
    SingleClassLabels(String),

    // --- experiments / pipeline ---
    #[error("no latent selection available: {0}")]
    MissingLatentSelection(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("stage {stage} requires missing artifact {path}")]
    MissingArtifact { stage: &'static str, path: String },
    #[error("stage {stage} input hash changed; cached artifact {path} is stale")]
    StaleArtifact { stage: &'static str, path: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
