//! Path-specific effect estimation when a covariate is missing not at random
//! and a shadow variable identifies the missingness odds.
//!
//! The pipeline fits the odds function `γ` by sieve minimum distance, the
//! outcome regressions `μ_k` and weights `ω_k` by weighted series regression,
//! and reports `ψ(ā)` and its contrasts with influence-function intervals.

pub mod baselines;
pub mod basis;
pub mod data;
pub mod error;
pub mod estimator;
pub mod gamma;
pub mod inference;
pub mod linalg;
pub mod pipeline;
pub mod series;
pub mod simulation;
pub mod stats;

pub use basis::{BasisChoice, BasisKind, BasisSpec};
pub use data::{Dataset, Descriptor, ObservedRecord, TreatmentProfile};
pub use error::{PseError, Result};
pub use estimator::{Estimand, NuisanceFits, PsiEstimate};
pub use gamma::{GammaModel, GammaOptions};
pub use inference::InferenceReport;
pub use series::SeriesRegressor;
pub use baselines::Method;
pub use pipeline::{analyze, Analysis, PipelineConfig};
pub use simulation::{DgpConfig, McConfig, McResult};
