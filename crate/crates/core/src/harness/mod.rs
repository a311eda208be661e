//! Synthetic data, training, evaluation and the inference-cost profiler.

mod checkpoint;
pub mod config;
pub mod profile;
pub mod scene;
pub mod train;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_FILE_MAGIC};
pub use config::{ExperimentConfig, ModelConfig, ProfileConfig, RigConfig, SceneConfig, TrainConfig, TrainMode};
pub use profile::{profile, CostModel, ProfileRow, ScalingReport, StageTiming};
pub use scene::{GtView, Ground, Primitive, SyntheticScene};
pub use train::{evaluate, smoothed_nonincreasing, CameraMetrics, EvalReport, Experiment, StepStats, Trainer};

use crate::geometry::GeometryError;
use crate::lifting::LiftError;
use crate::ndtensor::{CheckpointError, TensorError};
use crate::renderer::{ImageError, RenderError};
use crate::tokenizer::{TokenFileError, TokenizeError};
use crate::triplane::TriplaneError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("non-finite loss at step {step}; last good state in {}", checkpoint.as_ref().map_or("(not saved)".into(), |p| p.display().to_string()))]
    NonFiniteLoss { step: u64, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Triplane(#[from] TriplaneError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    TokenFile(#[from] TokenFileError),
}

impl HarnessError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io(_) => "io",
            HarnessError::NonFiniteLoss { .. } => "non_finite_loss",
            HarnessError::Checkpoint(_) => "checkpoint",
            HarnessError::Geometry(_) => "geometry",
            HarnessError::Tensor(_) => "tensor",
            HarnessError::Triplane(_) => "triplane",
            HarnessError::Lift(_) => "lift",
            HarnessError::Render(_) => "render",
            HarnessError::Image(_) => "image",
            HarnessError::Tokenize(_) => "tokenize",
            HarnessError::TokenFile(_) => "token_file",
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

/// Independent generator for `(seed, stream, index)`. Every random draw in
/// the harness goes through here so runs depend on the root seed alone.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream << 40 | index);
    rng
}

/// Scene of an experiment with its seed resolved.
pub fn generate_scene(cfg: &ExperimentConfig) -> Result<SyntheticScene, HarnessError> {
    SyntheticScene::generate(&cfg.scene, cfg.scene.seed.unwrap_or(cfg.seed), &cfg.warp)
}
