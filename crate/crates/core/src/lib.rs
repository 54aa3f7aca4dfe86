//! G-estimation of optimal dynamic treatment regimes.
//!
//! Stage-wise estimators for additive, multiplicative (log-linear, fit by
//! IRLS) and continuous-dose blip models, sandwich inference with a
//! quasi-likelihood information criterion for blip model selection, and a
//! seeded simulation harness.

pub mod continuous;
pub mod csv_io;
pub mod data;
pub mod engine;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod linear;
pub mod loglinear;
pub mod nuisance;
pub mod select;
pub mod simulation;
pub mod summary;

pub use data::{
    build_design, validate_dataset, Dataset, DesignMatrices, DoseRange, ModelSpec, Scale, StageRecord,
    StageSpec, Subject, Term, TermSet, TreatmentType, ValidationReport,
};
pub use error::{GestError, Result};
