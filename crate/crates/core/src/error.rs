//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PseError>;

#[derive(Debug, Error)]
pub enum PseError {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no records satisfy the filter")]
    EmptyResult,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("record {0} has no observed covariate block")]
    MissingCovariate(usize),

    #[error("oracle analysis needs the true covariate for every record (record {0} lacks it)")]
    MissingTrueX(usize),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("all weights are zero")]
    AllZeroWeights,

    #[error("linear system unsolvable even with ridge {ridge:e}")]
    UnsolvableSystem { ridge: f64 },

    #[error("every record is missing the covariate block; the odds equation has no complete cases")]
    DegenerateTarget,

    #[error("no complete case with A = {level} for regression stage {stage}")]
    EmptyArm { stage: usize, level: u8 },

    #[error("need at least {needed} complete cases for the imputation model, found {found}")]
    InsufficientCompleteCases { needed: usize, found: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
