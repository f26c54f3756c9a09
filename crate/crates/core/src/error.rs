use crate::corpus::{CorpusError, Unit};
use crate::tensor::TensorError;

/// Errors raised by the models, training and meal-kit code.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("generation state is full")]
    StateFull,
    #[error("ingredient {0:?} is already accepted")]
    DuplicateIngredient(String),
    #[error("step {index} out of range for {len} accepted ingredients")]
    BadIndex { index: usize, len: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("every ingredient position is masked")]
    AllMasked,
    #[error("targets do not line up with the ingredient list: {0}")]
    TargetMisalignment(String),
    #[error("unit {0} never occurs in the training data")]
    UnseenUnit(Unit),
    #[error("no ingredients")]
    EmptyIngredients,
    #[error("servings must be positive, got {0}")]
    NonpositiveServings(f64),
    #[error("split {0:?} is empty")]
    EmptySplit(&'static str),
    #[error("loss diverged at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("model metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ModelError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::StateFull => "StateFull",
            ModelError::DuplicateIngredient(_) => "DuplicateIngredient",
            ModelError::BadIndex { .. } => "BadIndex",
            ModelError::UnknownToken(_) => "UnknownToken",
            ModelError::AllMasked => "AllMasked",
            ModelError::TargetMisalignment(_) => "TargetMisalignment",
            ModelError::UnseenUnit(_) => "UnseenUnit",
            ModelError::EmptyIngredients => "EmptyIngredients",
            ModelError::NonpositiveServings(_) => "NonpositiveServings",
            ModelError::EmptySplit(_) => "EmptySplit",
            ModelError::DivergedLoss { .. } => "DivergedLoss",
            ModelError::Metadata(_) => "Metadata",
            ModelError::Tensor(_) => "Tensor",
            ModelError::Corpus(_) => "Corpus",
            ModelError::Io(_) => "Io",
            ModelError::Json(_) => "Json",
        }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
