//! Plain serializable views of fits and selections for output.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ModelSpec, Scale, StageSpec, TreatmentType};
use crate::engine::{DtrFit, StageFit, StageResult};
use crate::select::{Criterion, Direction, SelectionResult, TrailEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    /// Blip column names, linear-in-dose columns first then quadratic ones.
    pub blip_columns: Vec<String>,
    pub psi: Vec<f64>,
    pub se: Option<Vec<f64>>,
    pub wald_p: Option<Vec<Option<f64>>>,
    pub beta_columns: Vec<String>,
    pub beta: Vec<f64>,
    pub alpha_columns: Vec<String>,
    pub alpha: Vec<f64>,
    pub q: f64,
    pub k: Option<f64>,
    pub qic: Option<f64>,
    pub converged: bool,
    pub iterations: Option<usize>,
}

impl StageSummary {
    /// `spec` supplies the treatment-free and treatment column names.
    pub fn new(s: &StageResult, spec: &StageSpec) -> Self {
        let mut blip_columns = s.blip.column_names();
        if matches!(s.fit, StageFit::Continuous(_)) {
            blip_columns.extend(s.blip_quadratic.column_names().into_iter().map(|c| format!("{c} [dose^2]")));
        }
        let inf = s.inference.as_ref();
        StageSummary {
            stage: s.stage,
            blip_columns,
            psi: s.psi().iter().copied().collect(),
            se: inf.map(|i| i.se.clone()),
            wald_p: inf.map(|i| i.wald_p.clone()),
            beta_columns: spec.treatment_free.column_names(),
            beta: s.fit.beta().iter().copied().collect(),
            alpha_columns: spec.treatment.column_names(),
            alpha: s.treatment.alpha.clone(),
            q: s.fit.q(),
            k: inf.map(|i| i.k),
            qic: inf.map(|i| i.qic),
            converged: s.converged(),
            iterations: s.fit.iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub scale: Scale,
    pub treatment_type: TreatmentType,
    pub converged: bool,
    pub failed_stage: Option<usize>,
    /// Stage 1 first.
    pub stages: Vec<StageSummary>,
}

impl FitSummary {
    pub fn new(f: &DtrFit, spec: &ModelSpec) -> Self {
        let mut stages: Vec<StageSummary> = f.stages.iter().map(|s| StageSummary::new(s, spec.stage(s.stage))).collect();
        stages.sort_by_key(|s| s.stage);
        FitSummary {
            scale: f.scale,
            treatment_type: f.treatment_type,
            converged: f.converged(),
            failed_stage: f.failed_stage,
            stages,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub direction: Direction,
    pub criterion: Criterion,
    /// Chosen blip model per stage, stage 1 first.
    pub chosen: Vec<String>,
    pub trail: Vec<TrailEntry>,
    pub stages_with_failures: Vec<usize>,
    /// Fits of the chosen models, stage 1 first.
    pub fits: Vec<StageSummary>,
}

impl SelectionSummary {
    pub fn new(r: &SelectionResult, spec: &ModelSpec) -> Self {
        let mut fits: Vec<StageSummary> = r.fits.iter().map(|s| StageSummary::new(s, spec.stage(s.stage))).collect();
        fits.sort_by_key(|s| s.stage);
        SelectionSummary {
            direction: r.direction,
            criterion: r.criterion,
            chosen: r.chosen.iter().map(|m| m.label()).collect(),
            trail: r.trail.clone(),
            stages_with_failures: r.stages_with_failures.clone(),
            fits,
        }
    }
}

/// Per-subject optimal treatments as `(id, [stage 1, ..., stage J])`.
pub fn regime_rows(dataset: &Dataset, fit: &DtrFit) -> Vec<(String, Vec<f64>)> {
    let m = &fit.optimal_treatments;
    dataset
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), m.row(i).iter().copied().collect()))
        .collect()
}
