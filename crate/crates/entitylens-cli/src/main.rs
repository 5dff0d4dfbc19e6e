//! entitylens: train the toy pipeline and run the latent analysis and
//! steering experiments, stage by stage or end to end.
//!
//! Exit codes: 0 ok, 2 config error, 3 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use entitylens::experiments::config::PipelineConfig;
use entitylens::experiments::pipeline::{metrics_path, Pipeline, Stage};

#[derive(Parser)]
#[command(name = "entitylens", version, about = "Entity-recognition latent pipeline")]
struct Cli {
    /// JSON config; defaults to the calibrated desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// With run-all: run a single stage against cached artifacts.
    #[arg(long, global = true)]
    only: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic entity world and corpora.
    GenWorld,
    /// Train the base model on facts plus filler text.
    TrainBase,
    /// Probe every entity and label it known/unknown/discarded.
    Classify,
    /// Stratified train/validation/test split and eval prompt rendering.
    Split,
    /// Fine-tune the chat model (QA answers, refusals, self-knowledge).
    TrainChat,
    /// Harvest residual-stream activation shards.
    Harvest,
    /// Train the JumpReLU SAE suites (base and chat).
    TrainSae,
    /// Frequencies, separation scores, MaxMin curves, top-latent selection.
    ScoreLatents,
    /// Calibrate steering coefficients on the validation split.
    SweepAlpha,
    /// Project the unknown-entity direction out of the chat weights.
    Orthogonalize,
    /// Knowledge-refusal steering experiment (with controls).
    Steer,
    /// Activation-patching grids and attribute-head identification.
    Patch,
    /// Attention-to-entity experiment.
    Attn,
    /// Yes/No self-knowledge probes under steering.
    SelfKnowledge,
    /// Uncertainty-latent selection and error-prediction metrics.
    Uncertainty,
    /// Collect everything into metrics.json.
    Report,
    /// Run every stage in order.
    RunAll,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::GenWorld => Stage::GenWorld,
            Command::TrainBase => Stage::TrainBase,
            Command::Classify => Stage::Classify,
            Command::Split => Stage::Split,
            Command::TrainChat => Stage::TrainChat,
            Command::Harvest => Stage::Harvest,
            Command::TrainSae => Stage::TrainSae,
            Command::ScoreLatents => Stage::ScoreLatents,
            Command::SweepAlpha => Stage::SweepAlpha,
            Command::Orthogonalize => Stage::Orthogonalize,
            Command::Steer => Stage::Steer,
            Command::Patch => Stage::Patch,
            Command::Attn => Stage::Attn,
            Command::SelfKnowledge => Stage::SelfKnowledge,
            Command::Uncertainty => Stage::Uncertainty,
            Command::Report => Stage::Report,
            Command::RunAll => return None,
        })
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, String> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| e.to_string())?,
        None => PipelineConfig::desk_default(cli.seed.unwrap_or(7)),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let config = load_config(&cli).map_err(|e| (2, e))?;
    let pipeline = Pipeline::new(config, cli.out.clone()).map_err(|e| (2, e.to_string()))?;

    let only = match &cli.only {
        Some(name) => Some(
            Stage::from_name(name)
                .ok_or_else(|| (2, format!("unknown stage {name:?} for --only")))?,
        ),
        None => None,
    };

    match (&cli.command, only) {
        (Command::RunAll, Some(stage)) => {
            eprintln!("running single stage {} against cached artifacts", stage.name());
            pipeline.run_only(stage).map_err(|e| (3, e.to_string()))?;
        }
        (Command::RunAll, None) => {
            eprintln!("running all {} stages", Stage::ALL.len());
            pipeline.run_all().map_err(|e| (3, e.to_string()))?;
            eprintln!("metrics: {}", metrics_path(&cli.out).display());
        }
        (cmd, _) => {
            let stage = cmd.stage().expect("non-run-all commands map to stages");
            eprintln!("stage {}", stage.name());
            pipeline.run_only(stage).map_err(|e| (3, e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
