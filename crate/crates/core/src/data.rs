//! Longitudinal datasets, model specifications, and design-matrix assembly.
//!
//! A subject's history before decision `j` is the sequence
//! `x_1, a_1, x_2, a_2, ..., x_j`: every covariate measured up to stage `j`
//! and every treatment strictly before it. Model terms select from that
//! history by `(stage, name)`; products of selectors give interactions such
//! as `a1*x1_age`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GestError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub covariates: Vec<f64>,
    pub treatment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub stages: Vec<StageRecord>,
    pub outcome: f64,
}

/// A sample of complete, fixed-length treatment trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub subjects: Vec<Subject>,
    pub covariate_names: Vec<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset, checking that every subject has the declared stage
    /// structure. Ids default to `1..=n` when `ids` is `None`.
    pub fn new(
        covariate_names: Vec<Vec<String>>,
        subjects: Vec<Subject>,
        ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if covariate_names.is_empty() {
            return Err(GestError::Dimension("a dataset needs at least one stage".into()));
        }
        if subjects.is_empty() {
            return Err(GestError::Dimension("a dataset needs at least one subject".into()));
        }
        let ids = ids.unwrap_or_else(|| (1..=subjects.len()).map(|i| i.to_string()).collect());
        if ids.len() != subjects.len() {
            return Err(GestError::Dimension(format!(
                "{} ids for {} subjects",
                ids.len(),
                subjects.len()
            )));
        }
        let ds = Dataset {
            ids,
            subjects,
            covariate_names,
        };
        if let Some(v) = ds.structural_violations().into_iter().next() {
            return Err(GestError::Dimension(v.message));
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_stages(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn outcomes(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.subjects.iter().map(|s| s.outcome))
    }

    /// Observed treatments at `stage` (1-based).
    pub fn treatments(&self, stage: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.subjects.iter().map(|s| s.stages[stage - 1].treatment),
        )
    }

    pub fn covariate_index(&self, stage: usize, name: &str) -> Option<usize> {
        self.covariate_names
            .get(stage.checked_sub(1)?)?
            .iter()
            .position(|n| n == name)
    }

    /// Subset of subjects in the given order (used for permutation checks and resampling).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            subjects: rows.iter().map(|&i| self.subjects[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }

    fn structural_violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let j = self.n_stages();
        for (i, s) in self.subjects.iter().enumerate() {
            if s.stages.len() != j {
                out.push(Violation {
                    row: Some(i),
                    stage: None,
                    kind: ViolationKind::RaggedStages,
                    message: format!("subject {} has {} stages, expected {}", i + 1, s.stages.len(), j),
                });
                continue;
            }
            for (k, rec) in s.stages.iter().enumerate() {
                let want = self.covariate_names[k].len();
                if rec.covariates.len() != want {
                    out.push(Violation {
                        row: Some(i),
                        stage: Some(k + 1),
                        kind: ViolationKind::RaggedStages,
                        message: format!(
                            "subject {} stage {} has {} covariates, expected {}",
                            i + 1,
                            k + 1,
                            rec.covariates.len(),
                            want
                        ),
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Loglinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentType {
    Binary,
    Continuous,
}

/// One multiplicative factor of a model term.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    Covariate { stage: usize, name: String },
    Treatment { stage: usize },
}

impl Factor {
    pub fn stage(&self) -> usize {
        match self {
            Factor::Covariate { stage, .. } | Factor::Treatment { stage } => *stage,
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Covariate { stage, name } => write!(f, "x{stage}_{name}"),
            Factor::Treatment { stage } => write!(f, "a{stage}"),
        }
    }
}

/// A model column: the product of one or more history factors.
///
/// Written as `x{j}_{name}` or `a{j}`, joined by `*` for products.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Term {
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn covariate(stage: usize, name: &str) -> Self {
        Term {
            factors: vec![Factor::Covariate {
                stage,
                name: name.to_string(),
            }],
        }
    }

    pub fn treatment(stage: usize) -> Self {
        Term {
            factors: vec![Factor::Treatment { stage }],
        }
    }

    pub fn times(mut self, other: Term) -> Self {
        self.factors.extend(other.factors);
        self
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.factors.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join("*"))
    }
}

impl From<Term> for String {
    fn from(t: Term) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Term {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl FromStr for Term {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut factors = Vec::new();
        for raw in s.split('*') {
            let part = raw.trim();
            let parse_stage = |digits: &str| -> std::result::Result<usize, String> {
                digits
                    .parse::<usize>()
                    .ok()
                    .filter(|&j| j >= 1)
                    .ok_or_else(|| format!("bad stage index in term factor '{part}'"))
            };
            if let Some(rest) = part.strip_prefix('a') {
                factors.push(Factor::Treatment {
                    stage: parse_stage(rest)?,
                });
            } else if let Some(rest) = part.strip_prefix('x') {
                let (digits, name) = rest
                    .split_once('_')
                    .ok_or_else(|| format!("covariate factor '{part}' must look like x<stage>_<name>"))?;
                if name.is_empty() {
                    return Err(format!("covariate factor '{part}' has an empty name"));
                }
                factors.push(Factor::Covariate {
                    stage: parse_stage(digits)?,
                    name: name.to_string(),
                });
            } else {
                return Err(format!("unrecognized term factor '{part}'"));
            }
        }
        if factors.is_empty() {
            return Err("empty term".into());
        }
        Ok(Term { factors })
    }
}

fn default_true() -> bool {
    true
}

/// Columns of one design matrix: an optional leading intercept plus terms.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermSet {
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub terms: Vec<Term>,
}

impl Default for TermSet {
    fn default() -> Self {
        TermSet::intercept_only()
    }
}

impl TermSet {
    pub fn intercept_only() -> Self {
        TermSet {
            intercept: true,
            terms: Vec::new(),
        }
    }

    pub fn empty() -> Self {
        TermSet {
            intercept: false,
            terms: Vec::new(),
        }
    }

    pub fn with_terms(terms: Vec<Term>) -> Self {
        TermSet {
            intercept: true,
            terms,
        }
    }

    pub fn ncols(&self) -> usize {
        self.terms.len() + usize::from(self.intercept)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.ncols());
        if self.intercept {
            names.push("(intercept)".to_string());
        }
        names.extend(self.terms.iter().map(|t| t.to_string()));
        names
    }

    pub fn label(&self) -> String {
        if self.terms.is_empty() {
            if self.intercept {
                "(intercept)".into()
            } else {
                "(empty)".into()
            }
        } else {
            self.terms
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(",")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseRange {
    pub lo: f64,
    pub hi: f64,
}

/// Per-stage model selectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Blip columns (the linear-in-dose blip for continuous treatments).
    #[serde(default)]
    pub blip: TermSet,
    /// Quadratic-in-dose blip columns; continuous treatments only.
    #[serde(default = "TermSet::empty")]
    pub blip_quadratic: TermSet,
    #[serde(default)]
    pub treatment_free: TermSet,
    #[serde(default)]
    pub treatment: TermSet,
    #[serde(default)]
    pub dose_range: Option<DoseRange>,
}

impl Default for StageSpec {
    fn default() -> Self {
        StageSpec {
            blip: TermSet::intercept_only(),
            blip_quadratic: TermSet::empty(),
            treatment_free: TermSet::intercept_only(),
            treatment: TermSet::intercept_only(),
            dose_range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub scale: Scale,
    pub treatment_type: TreatmentType,
    pub stages: Vec<StageSpec>,
}

impl ModelSpec {
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, stage: usize) -> &StageSpec {
        &self.stages[stage - 1]
    }

    /// Checks every selector against the dataset's history structure.
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        if self.stages.len() != dataset.n_stages() {
            return Err(GestError::Specification {
                stage: 0,
                message: format!(
                    "model has {} stages but the dataset has {}",
                    self.stages.len(),
                    dataset.n_stages()
                ),
            });
        }
        if self.treatment_type == TreatmentType::Continuous && self.scale == Scale::Loglinear {
            return Err(GestError::Specification {
                stage: 0,
                message: "continuous treatments are only supported on the linear scale".into(),
            });
        }
        for (k, st) in self.stages.iter().enumerate() {
            let stage = k + 1;
            let sets: [(&str, &TermSet); 4] = [
                ("blip", &st.blip),
                ("blip_quadratic", &st.blip_quadratic),
                ("treatment_free", &st.treatment_free),
                ("treatment", &st.treatment),
            ];
            for (what, set) in sets {
                for term in &set.terms {
                    for f in &term.factors {
                        check_factor(dataset, stage, f).map_err(|message| GestError::Specification {
                            stage,
                            message: format!("{what} term '{term}': {message}"),
                        })?;
                    }
                }
            }
            if st.blip.ncols() == 0 && st.blip_quadratic.ncols() == 0 {
                return Err(GestError::Specification {
                    stage,
                    message: "blip model has no columns".into(),
                });
            }
            match self.treatment_type {
                TreatmentType::Binary => {
                    if st.blip_quadratic.ncols() > 0 {
                        return Err(GestError::Specification {
                            stage,
                            message: "quadratic blip terms require a continuous treatment".into(),
                        });
                    }
                }
                TreatmentType::Continuous => match st.dose_range {
                    Some(r) if r.lo < r.hi && r.lo.is_finite() && r.hi.is_finite() => {}
                    _ => {
                        return Err(GestError::Specification {
                            stage,
                            message: "continuous treatment needs a non-degenerate dose_range".into(),
                        })
                    }
                },
            }
        }
        Ok(())
    }
}

fn check_factor(dataset: &Dataset, stage: usize, f: &Factor) -> std::result::Result<(), String> {
    match f {
        Factor::Covariate { stage: s, name } => {
            if *s > stage {
                return Err(format!("covariate from stage {s} is not available before decision {stage}"));
            }
            dataset
                .covariate_index(*s, name)
                .map(|_| ())
                .ok_or_else(|| format!("no covariate '{name}' at stage {s}"))
        }
        Factor::Treatment { stage: s } => {
            if *s >= stage {
                Err(format!("treatment a{s} is not part of the history before decision {stage}"))
            } else {
                Ok(())
            }
        }
    }
}

/// Row-per-subject design matrices for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub h_psi: DMatrix<f64>,
    pub h_psi_quad: DMatrix<f64>,
    pub h_beta: DMatrix<f64>,
    pub h_alpha: DMatrix<f64>,
    pub a: DVector<f64>,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// `A h_psi`: each blip row scaled by the subject's treatment.
    pub fn a_h_psi(&self) -> DMatrix<f64> {
        scale_rows(&self.h_psi, &self.a)
    }
}

pub(crate) fn scale_rows(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut row, v) in out.row_iter_mut().zip(s.iter()) {
        row *= *v;
    }
    out
}

/// Evaluates a term set for every subject at `stage`. Selectors are assumed
/// to have passed [`ModelSpec::check`]; unresolved ones still error here.
pub fn term_matrix(dataset: &Dataset, set: &TermSet, stage: usize) -> Result<DMatrix<f64>> {
    let n = dataset.n();
    let mut m = DMatrix::zeros(n, set.ncols());
    let mut col = 0;
    if set.intercept {
        m.column_mut(0).fill(1.0);
        col = 1;
    }
    for term in &set.terms {
        let mut lookups = Vec::with_capacity(term.factors.len());
        for f in &term.factors {
            check_factor(dataset, stage, f).map_err(|message| GestError::Specification {
                stage,
                message: format!("term '{term}': {message}"),
            })?;
            lookups.push(match f {
                Factor::Covariate { stage: s, name } => (*s, dataset.covariate_index(*s, name)),
                Factor::Treatment { stage: s } => (*s, None),
            });
        }
        for (i, subj) in dataset.subjects.iter().enumerate() {
            let mut v = 1.0;
            for &(s, idx) in &lookups {
                let rec = &subj.stages[s - 1];
                v *= match idx {
                    Some(c) => rec.covariates[c],
                    None => rec.treatment,
                };
            }
            m[(i, col)] = v;
        }
        col += 1;
    }
    Ok(m)
}

/// Assembles the blip, treatment-free, and treatment designs for `stage` (1-based).
pub fn build_design(dataset: &Dataset, spec: &ModelSpec, stage: usize) -> Result<DesignMatrices> {
    if stage == 0 || stage > dataset.n_stages() || stage > spec.n_stages() {
        return Err(GestError::Specification {
            stage,
            message: format!("stage must lie in 1..={}", dataset.n_stages()),
        });
    }
    let st = spec.stage(stage);
    Ok(DesignMatrices {
        h_psi: term_matrix(dataset, &st.blip, stage)?,
        h_psi_quad: term_matrix(dataset, &st.blip_quadratic, stage)?,
        h_beta: term_matrix(dataset, &st.treatment_free, stage)?,
        h_alpha: term_matrix(dataset, &st.treatment, stage)?,
        a: dataset.treatments(stage),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    RaggedStages,
    NonFinite,
    NonBinaryTreatment,
    NegativeOutcome,
    StageMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// 0-based subject row, when the violation is row-specific.
    pub row: Option<usize>,
    pub stage: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.violations.iter().filter_map(|v| v.row).collect();
        rows.dedup();
        rows
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown: Vec<&str> = self.violations.iter().take(5).map(|v| v.message.as_str()).collect();
        write!(f, "{} violation(s): {}", self.violations.len(), shown.join("; "))?;
        if self.violations.len() > 5 {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}

/// Lists every reason the dataset cannot be analysed under `spec`.
pub fn validate_dataset(dataset: &Dataset, spec: &ModelSpec) -> ValidationReport {
    let mut violations = dataset.structural_violations();
    if spec.n_stages() != dataset.n_stages() {
        violations.push(Violation {
            row: None,
            stage: None,
            kind: ViolationKind::StageMismatch,
            message: format!(
                "model has {} stages but the dataset has {}",
                spec.n_stages(),
                dataset.n_stages()
            ),
        });
    }
    for (i, s) in dataset.subjects.iter().enumerate() {
        if !s.outcome.is_finite() {
            violations.push(Violation {
                row: Some(i),
                stage: None,
                kind: ViolationKind::NonFinite,
                message: format!("row {}: outcome is not finite", i + 1),
            });
        } else if spec.scale == Scale::Loglinear && s.outcome < 0.0 {
            violations.push(Violation {
                row: Some(i),
                stage: None,
                kind: ViolationKind::NegativeOutcome,
                message: format!("row {}: outcome {} is negative on the log-linear scale", i + 1, s.outcome),
            });
        }
        for (k, rec) in s.stages.iter().enumerate() {
            if rec.covariates.iter().any(|v| !v.is_finite()) || !rec.treatment.is_finite() {
                violations.push(Violation {
                    row: Some(i),
                    stage: Some(k + 1),
                    kind: ViolationKind::NonFinite,
                    message: format!("row {} stage {}: non-finite value", i + 1, k + 1),
                });
            } else if spec.treatment_type == TreatmentType::Binary
                && rec.treatment != 0.0
                && rec.treatment != 1.0
            {
                violations.push(Violation {
                    row: Some(i),
                    stage: Some(k + 1),
                    kind: ViolationKind::NonBinaryTreatment,
                    message: format!(
                        "row {} stage {}: treatment {} is not 0 or 1",
                        i + 1,
                        k + 1,
                        rec.treatment
                    ),
                });
            }
        }
    }
    ValidationReport { violations }
}
