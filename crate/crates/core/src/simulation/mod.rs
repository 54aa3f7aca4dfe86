//! Data-generating scenarios, Monte Carlo replication and named studies.

pub mod harness;
pub mod presets;
pub mod scenario;

pub use harness::{
    aggregate_selection, analysis_spec, canonical_label, prepare, run_replications, true_model, Analysis, EstimateSummary, Method,
    ReplicationReport, SelectionTally, Stage2Policy, TraceSummary, THREADS_ENV,
};
pub use presets::{jobs, render, run_preset, seeded_jobs, Job, Preset, PresetReport, Table, TRUE_MODELS};
pub use scenario::{calibrate_beta0, generate, ErrorDist, Scenario, ScenarioKind, BETA0_BRACKET, CALIBRATION_DRAWS};
