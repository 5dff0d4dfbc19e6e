//! Decoder-only transformer with named hook points, training, and greedy
//! generation. Pre-norm residual blocks, learned positional embeddings, no
//! projection biases (so orthogonalizing the output matrices fully removes a
//! residual direction).

mod checkpoint;
mod config;
mod forward;
mod generate;
pub mod math;
mod params;
mod train;

pub use checkpoint::{ModelCheckpoint, Phase, TrainingMeta};
pub use config::ModelConfig;
pub use forward::{
    forward_hooked, logit_diff, Action, Captured, ForwardTrace, HookPoint, InterventionPlan,
    InterventionStep,
};
pub use generate::generate_greedy;
pub use params::{init_params, Layout, LayerSlots, ParamVec, Slot};
pub use train::{loss_and_grads, train_lm, StepLog, TrainHyper};

/// Float scalar usable in model math (f32 for training, f64 for gradient
/// oracles).
pub trait Flt: ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum<Self> {}
impl Flt for f32 {}
impl Flt for f64 {}

/// Standard normal draw (Box-Muller) over a seeded stream.
pub fn math_normal(rng: &mut impl rand::Rng) -> f64 {
    params::normal(rng)
}

/// Randomly initialized, untrained checkpoint.
pub fn random_checkpoint(cfg: &ModelConfig, seed: u64) -> ModelCheckpoint {
    ModelCheckpoint {
        config: *cfg,
        params: init_params(cfg, seed),
        meta: None,
    }
}

#[cfg(test)]
mod tests;
