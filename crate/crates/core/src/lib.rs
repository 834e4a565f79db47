//! Scaling laws for post-training-quantized language models.
//!
//! Accuracy on a task family is modelled as a multiplicative power law of
//! model size, calibration set size, group size and effective bit-width.
//! The crate evaluates such laws, fits them to measured accuracies by
//! Levenberg–Marquardt, compares factor subsets, and searches configuration
//! grids for accuracy/storage trade-offs.

pub mod ablation;
pub mod advisor;
pub mod dataset;
pub mod error;
pub mod fitting;
pub mod model;
pub mod presets;

pub use error::{Error, Result};
pub use fitting::{fit_nls, goodness_of_fit, warm_start, FitOptions, FitProblem, FitResult, Observation};
pub use model::{
    effective_bit_width, predict, sensitivity_report, EffectiveBitWidth, Factor, FactorMask, Grid,
    MetadataScheme, PtqConfig, ScalingLawParams, TaskKind, ValidityDomain,
};
pub use presets::PresetRegistry;
