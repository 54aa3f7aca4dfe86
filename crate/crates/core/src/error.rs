use thiserror::Error;

use crate::data::ValidationReport;

pub type Result<T> = std::result::Result<T, GestError>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GestError {
    #[error("specification error at stage {stage}: {message}")]
    Specification { stage: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular system in {context} (condition number {condition:.3e})")]
    Singular { context: String, condition: f64 },

    #[error("blip parameters are not identifiable (condition number {condition:.3e})")]
    Identifiability { condition: f64 },

    #[error("perfect separation in treatment model (max |alpha| = {max_abs_coef:.3e})")]
    Separation { max_abs_coef: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("IRLS diverged at iteration {iteration}: linear predictor {eta:.3e} exceeds overflow guard")]
    Divergence { iteration: usize, eta: f64 },

    #[error("invalid state: {0}")]
    State(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<GestError>,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("selection failed: {0}")]
    Selection(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("dataset failed validation: {0}")]
    Validation(ValidationReport),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl GestError {
    pub(crate) fn at_stage(self, stage: usize) -> Self {
        match self {
            GestError::Stage { .. } => self,
            other => GestError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error with any stage wrapper removed.
    pub fn root(&self) -> &GestError {
        match self {
            GestError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for GestError {
    fn from(e: std::io::Error) -> Self {
        GestError::Io(e.to_string())
    }
}
