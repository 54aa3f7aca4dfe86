//! Backward-recursive G-estimation over all stages and regime extraction.

use nalgebra::{DMatrix, DVector};

use crate::continuous::{self, ContinuousStageFit};
use crate::data::{
    build_design, scale_rows, term_matrix, Dataset, DesignMatrices, DoseRange, ModelSpec, Scale, TermSet, TreatmentType,
};
use crate::error::{GestError, Result};
use crate::inference::{self, StageInference};
use crate::linalg::Projector;
use crate::linear::{self, LinearStageFit};
use crate::loglinear::{self, IrlsOptions, LoglinearStageFit};
use crate::nuisance::{self, TreatmentFit};

#[derive(Debug, Clone, PartialEq)]
pub enum StageFit {
    Linear(LinearStageFit),
    Loglinear(LoglinearStageFit),
    Continuous(ContinuousStageFit),
}

impl StageFit {
    /// Blip coefficients; for dose blips the linear block comes first.
    pub fn psi(&self) -> DVector<f64> {
        match self {
            StageFit::Linear(f) => f.psi.clone(),
            StageFit::Loglinear(f) => f.psi.clone(),
            StageFit::Continuous(f) => f.psi(),
        }
    }

    pub fn beta(&self) -> &DVector<f64> {
        match self {
            StageFit::Linear(f) => &f.beta,
            StageFit::Loglinear(f) => &f.beta,
            StageFit::Continuous(f) => &f.beta,
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            StageFit::Loglinear(f) => f.converged,
            _ => true,
        }
    }

    pub fn q(&self) -> f64 {
        match self {
            StageFit::Linear(f) => f.q_at_psi_hat,
            StageFit::Loglinear(f) => f.q_at_psi_hat,
            StageFit::Continuous(f) => f.q_at_psi_hat,
        }
    }

    pub fn iterations(&self) -> Option<usize> {
        match self {
            StageFit::Loglinear(f) => Some(f.iterations),
            _ => None,
        }
    }
}

/// Everything estimated at one decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub stage: usize,
    pub blip: TermSet,
    pub blip_quadratic: TermSet,
    pub treatment: TreatmentFit,
    pub fit: StageFit,
    /// Absent when an IRLS fit failed to converge.
    pub inference: Option<StageInference>,
    pub h_psi: DMatrix<f64>,
    pub h_psi_quad: DMatrix<f64>,
    pub a: DVector<f64>,
    pub dose_range: Option<DoseRange>,
}

impl StageResult {
    pub fn converged(&self) -> bool {
        self.fit.converged()
    }

    pub fn psi(&self) -> DVector<f64> {
        self.fit.psi()
    }

    /// Estimated optimal treatment for each subject.
    pub fn optimal_treatments(&self) -> DVector<f64> {
        match &self.fit {
            StageFit::Continuous(f) => {
                let lin = &self.h_psi * &f.psi1;
                let quad = &self.h_psi_quad * &f.psi2;
                let range = self.dose_range.expect("dose fits carry a range");
                DVector::from_iterator(
                    lin.len(),
                    lin.iter().zip(quad.iter()).map(|(l, q)| continuous::optimal_dose(*l, *q, range)),
                )
            }
            other => (&self.h_psi * other.psi()).map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        }
    }

    /// Blip under the optimal treatment minus blip under the observed one.
    pub fn regrets(&self) -> DVector<f64> {
        let opt = self.optimal_treatments();
        match &self.fit {
            StageFit::Continuous(f) => {
                let lin = &self.h_psi * &f.psi1;
                let quad = &self.h_psi_quad * &f.psi2;
                let blip = |a: f64, i: usize| a * lin[i] + a * a * quad[i];
                DVector::from_fn(opt.len(), |i, _| blip(opt[i], i) - blip(self.a[i], i))
            }
            other => {
                let hp = &self.h_psi * other.psi();
                DVector::from_fn(opt.len(), |i, _| (opt[i] - self.a[i]) * hp[i])
            }
        }
    }
}

/// Decision rule for a binary treatment: treat when the blip is positive.
/// A zero blip keeps the reference treatment.
pub fn optimal_treatment_binary(psi: &[f64], h_row: &[f64]) -> u8 {
    let v: f64 = psi.iter().zip(h_row).map(|(p, h)| p * h).sum();
    u8::from(v > 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtrFit {
    pub scale: Scale,
    pub treatment_type: TreatmentType,
    /// Ordered from the final stage back to the first.
    pub stages: Vec<StageResult>,
    /// n x J; column j-1 holds stage j. NaN for stages never reached.
    pub optimal_treatments: DMatrix<f64>,
    /// n x J pseudo-outcomes used at each stage.
    pub pseudo_outcomes: DMatrix<f64>,
    /// Stage whose IRLS fit did not converge, ending the recursion.
    pub failed_stage: Option<usize>,
}

impl DtrFit {
    pub fn converged(&self) -> bool {
        self.failed_stage.is_none()
    }

    pub fn stage(&self, stage: usize) -> Option<&StageResult> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

/// Stage-level quantities shared by every blip model considered at one
/// decision point: pseudo-outcome, treatment model and residuals, and the
/// treatment-free projection.
#[derive(Debug, Clone)]
pub(crate) struct StageContext {
    pub stage: usize,
    pub scale: Scale,
    pub treatment_type: TreatmentType,
    pub y_tilde: DVector<f64>,
    pub design: DesignMatrices,
    pub treatment: TreatmentFit,
    pub d: DVector<f64>,
    pub d2: Option<DVector<f64>>,
    tf_proj: Option<Projector>,
    pub dose_range: Option<DoseRange>,
    pub irls: IrlsOptions,
}

impl StageContext {
    pub fn new(
        dataset: &Dataset,
        spec: &ModelSpec,
        stage: usize,
        y_tilde: DVector<f64>,
        irls: &IrlsOptions,
    ) -> Result<Self> {
        let design = build_design(dataset, spec, stage)?;
        let (treatment, d2) = match spec.treatment_type {
            TreatmentType::Binary => (nuisance::fit_logistic(&design.h_alpha, &design.a)?, None),
            TreatmentType::Continuous => {
                let t = nuisance::fit_continuous_treatment(&design.h_alpha, &design.a)?;
                let d2 = nuisance::second_moment_residuals(&t, &design.a)?;
                (t, Some(d2))
            }
        };
        let d = nuisance::treatment_residuals(&treatment, &design.a)?;
        let tf_proj = match spec.scale {
            Scale::Linear => Some(linear::treatment_free_projector(&design.h_beta)?),
            Scale::Loglinear => None,
        };
        Ok(StageContext {
            stage,
            scale: spec.scale,
            treatment_type: spec.treatment_type,
            y_tilde,
            design,
            treatment,
            d,
            d2,
            tf_proj,
            dose_range: spec.stage(stage).dose_range,
            irls: *irls,
        })
    }

    /// Score correction for a logistic treatment model, where each subject's
    /// score is `d_i r_i h_psi,i` and `dd_i/dalpha = -p_i (1 - p_i) h_alpha,i`.
    fn binary_correction(&self, design: &DesignMatrices, r: &DVector<f64>, u: DMatrix<f64>) -> Result<DMatrix<f64>> {
        let pq: DVector<f64> = (&design.a - &self.d).map(|p| p * (1.0 - p));
        let g = -(scale_rows(&design.h_psi, &r.component_mul(&pq)).transpose() * &design.h_alpha);
        let s_alpha = scale_rows(&design.h_alpha, &self.d);
        let i_alpha = scale_rows(&design.h_alpha, &pq).transpose() * &design.h_alpha;
        inference::correct_for_treatment_model(&u, &g, &s_alpha, &i_alpha)
    }

    /// Same for a normal-linear dose model, where `d1 = a - m` and
    /// `d2 = a^2 - m^2 - sigma^2` both depend on the fitted mean `m`.
    fn dose_correction(&self, design: &DesignMatrices, e: &DVector<f64>, u: DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = &design.a - &self.d;
        let p1 = design.h_psi.ncols();
        let p2 = design.h_psi_quad.ncols();
        let mut g = DMatrix::zeros(p1 + p2, design.h_alpha.ncols());
        g.rows_mut(0, p1).copy_from(&-(scale_rows(&design.h_psi, e).transpose() * &design.h_alpha));
        let w2 = e.component_mul(&m) * 2.0;
        g.rows_mut(p1, p2).copy_from(&-(scale_rows(&design.h_psi_quad, &w2).transpose() * &design.h_alpha));
        let s_alpha = scale_rows(&design.h_alpha, &self.d);
        let i_alpha = design.h_alpha.transpose() * &design.h_alpha;
        inference::correct_for_treatment_model(&u, &g, &s_alpha, &i_alpha)
    }

    /// Fits one blip model against the shared context.
    pub fn fit_blip(&self, dataset: &Dataset, blip: &TermSet, quadratic: &TermSet) -> Result<StageResult> {
        let mut design = self.design.clone();
        design.h_psi = term_matrix(dataset, blip, self.stage)?;
        design.h_psi_quad = term_matrix(dataset, quadratic, self.stage)?;
        if design.h_psi.ncols() + design.h_psi_quad.ncols() == 0 {
            return Err(GestError::Specification {
                stage: self.stage,
                message: "blip model has no columns".into(),
            });
        }
        let (fit, inference) = match (self.scale, self.treatment_type) {
            (Scale::Linear, TreatmentType::Binary) => {
                let proj = self.tf_proj.as_ref().expect("linear contexts hold a projector");
                let f = linear::fit_with_projector(&self.y_tilde, &design.h_psi, &design.a, &self.d, proj)?;
                let u = inference::score_matrix_linear(&f, &design);
                let u = self.binary_correction(&design, &f.residuals, u)?;
                let inf = inference::stage_inference(&f.psi, f.q_at_psi_hat, &f.big_m, &u)?;
                (StageFit::Linear(f), Some(inf))
            }
            (Scale::Linear, TreatmentType::Continuous) => {
                let proj = self.tf_proj.as_ref().expect("linear contexts hold a projector");
                let d2 = self.d2.as_ref().expect("dose contexts hold second-moment residuals");
                let f = continuous::fit_continuous_with_projector(&self.y_tilde, &design, &self.d, d2, proj)?;
                let u = inference::score_matrix_continuous(&f, &design);
                let u = self.dose_correction(&design, &f.residuals, u)?;
                let inf = inference::stage_inference(&f.psi(), f.q_at_psi_hat, &f.big_m_c, &u)?;
                (StageFit::Continuous(f), Some(inf))
            }
            (Scale::Loglinear, _) => {
                let f = loglinear::irls_stage_fit(&self.y_tilde, &design, &self.d, &self.irls)?;
                let inf = if f.converged {
                    let u = inference::score_matrix_loglinear(&f, &design)?;
                    let u = self.binary_correction(&design, &f.y_tilde.component_div(&f.mu).add_scalar(-1.0), u)?;
                    Some(inference::stage_inference(&f.psi, f.q_at_psi_hat, &f.jacobian, &u)?)
                } else {
                    None
                };
                (StageFit::Loglinear(f), inf)
            }
        };
        Ok(StageResult {
            stage: self.stage,
            blip: blip.clone(),
            blip_quadratic: quadratic.clone(),
            treatment: self.treatment.clone(),
            fit,
            inference,
            h_psi: design.h_psi,
            h_psi_quad: design.h_psi_quad,
            a: design.a,
            dose_range: self.dose_range,
        })
    }
}

/// Running pseudo-outcome state as the recursion moves back one stage.
#[derive(Debug, Clone)]
pub(crate) struct Recursion {
    scale: Scale,
    y: DVector<f64>,
    additive: DVector<f64>,
    ratios: Vec<DVector<f64>>,
    zero_replacement: f64,
}

impl Recursion {
    pub fn new(dataset: &Dataset, scale: Scale, irls: &IrlsOptions) -> Self {
        let y = dataset.outcomes();
        Recursion {
            scale,
            additive: y.clone(),
            y,
            ratios: Vec::new(),
            zero_replacement: irls.zero_replacement,
        }
    }

    pub fn pseudo_outcome(&self) -> Result<DVector<f64>> {
        match self.scale {
            Scale::Linear => Ok(self.additive.clone()),
            Scale::Loglinear => loglinear::pseudo_outcome_loglinear(&self.y, &self.ratios, self.zero_replacement),
        }
    }

    /// Folds a fitted stage's regrets into the pseudo-outcome for the stage before it.
    pub fn absorb(&mut self, stage: &StageResult) {
        let regret = stage.regrets();
        match self.scale {
            Scale::Linear => self.additive += regret,
            Scale::Loglinear => self.ratios.push(regret.map(f64::exp)),
        }
    }
}

/// Backward-recursive G-estimation from stage J to stage 1.
pub fn fit_dtr(dataset: &Dataset, spec: &ModelSpec, irls: &IrlsOptions) -> Result<DtrFit> {
    spec.check(dataset)?;
    let report = crate::data::validate_dataset(dataset, spec);
    if !report.is_clean() {
        return Err(GestError::Validation(report));
    }
    let n = dataset.n();
    let n_stages = spec.n_stages();
    let mut rec = Recursion::new(dataset, spec.scale, irls);
    let mut out = DtrFit {
        scale: spec.scale,
        treatment_type: spec.treatment_type,
        stages: Vec::with_capacity(n_stages),
        optimal_treatments: DMatrix::from_element(n, n_stages, f64::NAN),
        pseudo_outcomes: DMatrix::from_element(n, n_stages, f64::NAN),
        failed_stage: None,
    };
    for stage in (1..=n_stages).rev() {
        let y_tilde = rec.pseudo_outcome().map_err(|e| e.at_stage(stage))?;
        out.pseudo_outcomes.set_column(stage - 1, &y_tilde);
        let ctx = StageContext::new(dataset, spec, stage, y_tilde, irls).map_err(|e| e.at_stage(stage))?;
        let st = spec.stage(stage);
        let res = ctx
            .fit_blip(dataset, &st.blip, &st.blip_quadratic)
            .map_err(|e| e.at_stage(stage))?;
        if !res.converged() {
            out.failed_stage = Some(stage);
            out.stages.push(res);
            break;
        }
        out.optimal_treatments.set_column(stage - 1, &res.optimal_treatments());
        rec.absorb(&res);
        out.stages.push(res);
    }
    Ok(out)
}
