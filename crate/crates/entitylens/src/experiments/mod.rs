//! Experiment drivers, refusal detection, report emission, and the pipeline
//! orchestrating them.

mod attention;
pub mod config;
pub mod pipeline;
mod refusal;
mod self_knowledge;
mod uncertainty;

pub use attention::{run_attention_experiment, sign_test_p, AttentionInputs};
pub use refusal::{run_refusal_experiment, RefusalInputs};
pub use self_knowledge::{run_self_knowledge_experiment, SelfKnowledgeInputs};
pub use uncertainty::{run_uncertainty_experiment, AnswerOutcome, UncertaintyInputs};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::pools;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Ordered refusal prefixes; mutually non-prefixing by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefusalLexicon {
    pub prefixes: Vec<String>,
}

impl RefusalLexicon {
    pub fn new(prefixes: Vec<String>) -> Result<RefusalLexicon> {
        if prefixes.is_empty() {
            return Err(Error::InvalidConfig("refusal lexicon is empty".into()));
        }
        for (i, a) in prefixes.iter().enumerate() {
            for (j, b) in prefixes.iter().enumerate() {
                if i != j && a.starts_with(b.as_str()) {
                    return Err(Error::InvalidConfig(format!(
                        "refusal lexicon entries must be mutually non-prefixing: {b:?} prefixes {a:?}"
                    )));
                }
            }
        }
        Ok(RefusalLexicon { prefixes })
    }

    pub fn standard() -> RefusalLexicon {
        RefusalLexicon::new(pools::REFUSAL_STRINGS.iter().map(|s| s.to_string()).collect())
            .expect("standard lexicon is valid")
    }
}

/// True iff any lexicon prefix occurs anywhere in the generation.
pub fn detect_refusal(generation: &str, lexicon: &RefusalLexicon) -> bool {
    lexicon.prefixes.iter().any(|p| generation.contains(p.as_str()))
}

/// A named, reproducible experiment result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    /// Snapshot of the config sections the experiment depended on.
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, serde_json::Value>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

impl ExperimentReport {
    pub fn new(name: &str, seed: u64, config: serde_json::Value) -> ExperimentReport {
        ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            name: name.to_string(),
            seed,
            config,
            metrics: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn insert(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(
            key.to_string(),
            serde_json::to_value(value).expect("metric must serialize"),
        );
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detect_refusal_contract() {
        let lex = RefusalLexicon::standard();
        assert!(detect_refusal(
            "Unfortunately, I don't have access to real-time information about that.",
            &lex
        ));
        assert!(detect_refusal(
            "well. Unfortunately, I don't have access to real-time information about that. extra",
            &lex
        ));
        assert!(!detect_refusal("The movie was directed by Kol Varen.", &lex));
        assert!(!detect_refusal("", &lex));
    }

    #[test]
    fn detect_refusal_matches_brute_force_scan() {
        let lex = RefusalLexicon::new(vec!["abc def".into(), "xyz".into()]).unwrap();
        let words = ["abc", "def", "xyz", "qrs", "abc def"];
        let mut r = crate::rng::stream(3, "exp.refusal");
        use rand::Rng;
        for _ in 0..200 {
            let n = r.random_range(0..6);
            let text: Vec<&str> = (0..n).map(|_| words[r.random_range(0..words.len())]).collect();
            let text = text.join(" ");
            let brute = (0..text.len()).any(|i| {
                lex.prefixes
                    .iter()
                    .any(|p| text[i..].starts_with(p.as_str()))
            });
            assert_eq!(detect_refusal(&text, &lex), brute, "text {text:?}");
        }
    }

    #[test]
    fn prefixing_lexicons_are_rejected() {
        assert!(RefusalLexicon::new(vec!["I am sorry".into(), "I am".into()]).is_err());
        assert!(RefusalLexicon::new(vec![]).is_err());
        assert!(RefusalLexicon::standard().prefixes.len() == 6);
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = ExperimentReport::new("demo", 7, serde_json::json!({"k": 1}));
        report.insert("rate", 0.5f64);
        report.artifacts.push("experiments/demo.jsonl".into());
        let path = dir.path().join("demo.json");
        report.save(&path).unwrap();
        let loaded = ExperimentReport::load(&path).unwrap();
        assert_eq!(loaded.name, "demo");
        assert_eq!(loaded.metrics["rate"], serde_json::json!(0.5));
    }
}
