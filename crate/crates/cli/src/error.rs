use gestdtr_core::GestError;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] GestError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Machine-readable form written to stderr on failure.
    pub fn to_json(&self) -> Value {
        let mut body = json!({ "message": self.to_string() });
        match self {
            CliError::Config(_) => body["kind"] = json!("config"),
            CliError::Io(_) => body["kind"] = json!("io"),
            CliError::Core(e) => {
                if let GestError::Stage { stage, .. } = e {
                    body["stage"] = json!(stage);
                }
                let root = e.root();
                body["kind"] = json!(kind(root));
                match root {
                    GestError::Parse { line, column, .. } => {
                        body["line"] = json!(line);
                        body["column"] = json!(column);
                    }
                    GestError::Validation(report) => {
                        body["rows"] = json!(report.rows());
                        body["violations"] = serde_json::to_value(&report.violations).unwrap_or(Value::Null);
                    }
                    _ => {}
                }
            }
        }
        json!({ "error": body })
    }
}

fn kind(e: &GestError) -> &'static str {
    match e {
        GestError::Specification { .. } => "specification",
        GestError::Dimension(_) => "dimension",
        GestError::Singular { .. } => "singular",
        GestError::Identifiability { .. } => "identifiability",
        GestError::Separation { .. } => "separation",
        GestError::Domain(_) => "domain",
        GestError::Divergence { .. } => "divergence",
        GestError::State(_) => "state",
        GestError::Stage { .. } => "stage",
        GestError::Calibration(_) => "calibration",
        GestError::Selection(_) => "selection",
        GestError::Aggregation(_) => "aggregation",
        GestError::Validation(_) => "validation",
        GestError::Parse { .. } => "parse",
        GestError::Io(_) => "io",
    }
}
