//! Pipeline configuration: JSON with {world, model, chat, sae, analysis,
//! experiments} sections. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::world::EntityType;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldSection,
    pub model: ModelSection,
    pub chat: ChatSection,
    pub sae: SaeSection,
    pub analysis: AnalysisSection,
    pub experiments: ExperimentsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub counts: BTreeMap<EntityType, usize>,
    pub filler_lines: usize,
    /// Normalized edit similarity at or above which an answer is correct.
    pub fuzzy_threshold: f64,
    /// Fraction of unknown train entities mapped to refusal answers.
    pub refusal_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            d_mlp: self.d_mlp,
            vocab_size,
            max_seq_len: self.max_seq_len,
            norm_eps: self.norm_eps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatSection {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Replay the base fact corpus during fine-tuning.
    pub replay_facts: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSection {
    pub d_sae: usize,
    pub lambda: f64,
    /// STE kernel width as a multiple of the shard's activation scale.
    pub bandwidth_scale: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Random-token activation-frequency filter (latents above are dropped).
    pub rtf_filter: f64,
    /// How many ranked latents to keep per class.
    pub top_k: usize,
    /// Sweep grid as multiples of the mean residual norm at the steered
    /// layer; 0 is always included as the baseline row.
    pub sweep_alpha_scales: Vec<f64>,
    /// Refusal rate the unknown-latent sweep must reach on known questions.
    pub sweep_refusal_target: f64,
    /// Relative refusal reduction the known-latent sweep must reach.
    pub sweep_reduction_target: f64,
    pub coherence_min: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentsSection {
    pub max_new_tokens: usize,
    /// Cap on test questions per (class, etype); all available are used and
    /// logged when fewer exist.
    pub questions_per_etype: usize,
    pub n_random_latents: usize,
    /// How many head-patching heads feed the attention experiment.
    pub top_heads: usize,
    /// Steering strength for the attention experiment, as a multiple of the
    /// mean residual norm at the latent's layer.
    pub attention_alpha_scale: f64,
    /// Same, for the self-knowledge experiment.
    pub self_knowledge_alpha_scale: f64,
    /// Number of (clean, corrupted) prompt pairs per entity type for
    /// activation patching.
    pub patch_pairs_per_etype: usize,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for etype in EntityType::ALL {
            let n = self.world.counts.get(&etype).copied().unwrap_or(0);
            if n < 8 || n % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "world.counts.{} must be an even count >= 8 (got {n})",
                    etype.word()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.world.fuzzy_threshold)
            || !(0.0..=1.0).contains(&self.world.refusal_fraction)
        {
            return Err(Error::InvalidConfig(
                "world.fuzzy_threshold and world.refusal_fraction must be in [0,1]".into(),
            ));
        }
        if self.model.d_model != self.model.n_heads * self.model.d_head {
            return Err(Error::InvalidConfig(
                "model.d_model must equal n_heads * d_head".into(),
            ));
        }
        if self.sae.d_sae < 4 * self.model.d_model {
            return Err(Error::InvalidConfig(
                "sae.d_sae must be >= 4 * model.d_model".into(),
            ));
        }
        if self.sae.lambda <= 0.0 || self.sae.bandwidth_scale <= 0.0 {
            return Err(Error::InvalidConfig(
                "sae.lambda and sae.bandwidth_scale must be positive".into(),
            ));
        }
        if self.analysis.sweep_alpha_scales.is_empty()
            || self
                .analysis
                .sweep_alpha_scales
                .windows(2)
                .any(|w| w[0] > w[1])
            || self.analysis.sweep_alpha_scales.iter().any(|&a| a <= 0.0)
        {
            return Err(Error::InvalidConfig(
                "analysis.sweep_alpha_scales must be positive and ascending".into(),
            ));
        }
        if self.experiments.n_random_latents == 0 || self.experiments.top_heads == 0 {
            return Err(Error::InvalidConfig(
                "experiments.n_random_latents and top_heads must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// The calibrated desk profile used by the acceptance suite: small enough
    /// to train on two CPU cores, deep enough for a middle layer.
    pub fn desk_default(seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            world: WorldSection {
                counts: EntityType::ALL.iter().map(|&e| (e, 32)).collect(),
                filler_lines: 300,
                fuzzy_threshold: 0.8,
                refusal_fraction: 0.75,
            },
            model: ModelSection {
                n_layers: 4,
                d_model: 64,
                n_heads: 4,
                d_head: 16,
                d_mlp: 256,
                max_seq_len: 48,
                norm_eps: 1e-5,
                lr: 1e-3,
                batch: 32,
                steps: 2400,
            },
            chat: ChatSection {
                lr: 5e-4,
                batch: 32,
                steps: 1200,
                replay_facts: true,
            },
            sae: SaeSection {
                d_sae: 256,
                lambda: 0.05,
                bandwidth_scale: 0.5,
                lr: 2e-3,
                batch: 128,
                steps: 2500,
            },
            analysis: AnalysisSection {
                rtf_filter: 0.02,
                top_k: 5,
                sweep_alpha_scales: vec![2.0, 2.5, 3.0, 4.0, 6.0, 8.0],
                sweep_refusal_target: 0.8,
                sweep_reduction_target: 0.5,
                coherence_min: 0.9,
            },
            experiments: ExperimentsSection {
                max_new_tokens: 16,
                questions_per_etype: 100,
                n_random_latents: 10,
                top_heads: 3,
                attention_alpha_scale: 1.0,
                self_knowledge_alpha_scale: 2.0,
                patch_pairs_per_etype: 4,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates_and_round_trips() {
        let cfg = PipelineConfig::desk_default(7);
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(PipelineConfig::desk_default(1)).unwrap();
        value["world"]["mystery_knob"] = serde_json::json!(3);
        let err = serde_json::from_value::<PipelineConfig>(value);
        assert!(err.is_err());
    }

    #[test]
    fn semantic_validation_fires() {
        let mut cfg = PipelineConfig::desk_default(1);
        cfg.model.d_head = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::desk_default(1);
        cfg.world.counts.insert(EntityType::Song, 9);
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::desk_default(1);
        cfg.analysis.sweep_alpha_scales = vec![3.0, 2.0];
        assert!(cfg.validate().is_err());
    }
}
