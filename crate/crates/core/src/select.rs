//! Blip model selection, one stage at a time from the last stage backwards.
//!
//! A stage's chosen model is fitted and frozen before the stage before it is
//! considered, so earlier stages see pseudo-outcomes built from the chosen
//! later-stage blips. Stages may instead be pinned to a fixed model.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ModelSpec, Term, TermSet};
use crate::engine::{Recursion, StageContext, StageResult};
use crate::error::{GestError, Result};
use crate::loglinear::IrlsOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Qic,
    Wald,
}

/// What to do at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StagePlan {
    /// Use this blip model without selection.
    Fixed(TermSet),
    /// Stepwise search over these terms; the intercept is always kept.
    Stepwise(Vec<Term>),
    /// Evaluate each listed model and keep the lowest QIC.
    Exhaustive(Vec<TermSet>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    /// The model the step starts from.
    Current,
    Evaluated,
    Failed { reason: String },
    Accepted,
    /// No candidate improved on the current model.
    Stop,
    Selected,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrailEntry {
    pub stage: usize,
    pub step: usize,
    pub model: String,
    /// The term added or dropped relative to the current model, if any.
    pub term: Option<String>,
    /// QIC, or the p-value of `term` under the Wald criterion.
    pub value: Option<f64>,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub direction: Direction,
    pub criterion: Criterion,
    /// Wald significance level.
    pub alpha: f64,
    pub irls: IrlsOptions,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            direction: Direction::Backward,
            criterion: Criterion::Qic,
            alpha: 0.05,
            irls: IrlsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Chosen blip model per stage, index 0 = stage 1.
    pub chosen: Vec<TermSet>,
    pub trail: Vec<TrailEntry>,
    pub direction: Direction,
    pub criterion: Criterion,
    /// Fits of the chosen models, final stage first.
    pub fits: Vec<StageResult>,
    /// Stages where at least one candidate fit failed.
    pub stages_with_failures: Vec<usize>,
}

impl SelectionResult {
    pub fn chosen_at(&self, stage: usize) -> &TermSet {
        &self.chosen[stage - 1]
    }

    /// Whether every candidate evaluated at `stage` fitted successfully.
    pub fn all_candidates_ok(&self, stage: usize) -> bool {
        !self.stages_with_failures.contains(&stage)
    }
}

/// Runs the per-stage plans from the final stage backwards.
pub fn select_dtr(
    dataset: &Dataset,
    base: &ModelSpec,
    plans: &[StagePlan],
    opts: &SelectionOptions,
) -> Result<SelectionResult> {
    base.check(dataset)?;
    let report = crate::data::validate_dataset(dataset, base);
    if !report.is_clean() {
        return Err(GestError::Validation(report));
    }
    if plans.len() != base.n_stages() {
        return Err(GestError::Selection(format!(
            "{} stage plans given for {} stages",
            plans.len(),
            base.n_stages()
        )));
    }
    if opts.direction == Direction::Exhaustive && opts.criterion == Criterion::Wald {
        return Err(GestError::Selection("exhaustive search ranks models by QIC only".into()));
    }
    let mut rec = Recursion::new(dataset, base.scale, &opts.irls);
    let mut out = SelectionResult {
        chosen: vec![TermSet::intercept_only(); base.n_stages()],
        trail: Vec::new(),
        direction: opts.direction,
        criterion: opts.criterion,
        fits: Vec::new(),
        stages_with_failures: Vec::new(),
    };
    for stage in (1..=base.n_stages()).rev() {
        let y_tilde = rec.pseudo_outcome().map_err(|e| e.at_stage(stage))?;
        let ctx = StageContext::new(dataset, base, stage, y_tilde, &opts.irls).map_err(|e| e.at_stage(stage))?;
        let mut search = Search {
            ctx: &ctx,
            dataset,
            quadratic: &base.stage(stage).blip_quadratic,
            opts,
            trail: &mut out.trail,
            failed: false,
        };
        let fit = match &plans[stage - 1] {
            StagePlan::Fixed(set) => search.fixed(set),
            StagePlan::Stepwise(terms) => match opts.direction {
                Direction::Forward => search.forward(terms),
                Direction::Backward => search.backward(terms),
                Direction::Exhaustive => search.exhaustive(&all_subsets(terms)),
            },
            StagePlan::Exhaustive(cands) => search.exhaustive(cands),
        }
        .map_err(|e| e.at_stage(stage))?;
        if search.failed {
            out.stages_with_failures.push(stage);
        }
        out.chosen[stage - 1] = fit.blip.clone();
        rec.absorb(&fit);
        out.fits.push(fit);
    }
    Ok(out)
}

/// Stepwise selection with one term list per stage (index 0 = stage 1).
pub fn stepwise_select(
    dataset: &Dataset,
    base: &ModelSpec,
    candidate_terms: &[Vec<Term>],
    opts: &SelectionOptions,
) -> Result<SelectionResult> {
    let plans: Vec<StagePlan> = candidate_terms.iter().cloned().map(StagePlan::Stepwise).collect();
    select_dtr(dataset, base, &plans, opts)
}

/// Lowest-QIC model among explicit candidates at every stage.
pub fn exhaustive_select(
    dataset: &Dataset,
    base: &ModelSpec,
    candidates: &[Vec<TermSet>],
    irls: &IrlsOptions,
) -> Result<SelectionResult> {
    let plans: Vec<StagePlan> = candidates.iter().cloned().map(StagePlan::Exhaustive).collect();
    let opts = SelectionOptions {
        direction: Direction::Exhaustive,
        criterion: Criterion::Qic,
        irls: *irls,
        ..Default::default()
    };
    select_dtr(dataset, base, &plans, &opts)
}

/// Every subset of `terms` (with intercept), smallest first, in term order.
pub fn all_subsets(terms: &[Term]) -> Vec<TermSet> {
    let mut out: Vec<TermSet> = (0u32..(1 << terms.len()))
        .map(|mask| {
            TermSet::with_terms(
                terms
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| mask & (1 << k) != 0)
                    .map(|(_, t)| t.clone())
                    .collect(),
            )
        })
        .collect();
    out.sort_by_key(|s| s.terms.len());
    out
}

/// Nested candidates: intercept only, then the first k terms for k = 1..=len.
pub fn nested_models(terms: &[Term]) -> Vec<TermSet> {
    (0..=terms.len()).map(|k| TermSet::with_terms(terms[..k].to_vec())).collect()
}

struct Search<'a> {
    ctx: &'a StageContext,
    dataset: &'a Dataset,
    quadratic: &'a TermSet,
    opts: &'a SelectionOptions,
    trail: &'a mut Vec<TrailEntry>,
    failed: bool,
}

struct Scored {
    fit: StageResult,
    qic: f64,
}

impl Search<'_> {
    fn log(&mut self, step: usize, model: &TermSet, term: Option<&Term>, value: Option<f64>, decision: Decision) {
        self.trail.push(TrailEntry {
            stage: self.ctx.stage,
            step,
            model: model.label(),
            term: term.map(|t| t.to_string()),
            value,
            decision,
        });
    }

    /// Fits a candidate; failures (including non-convergence) are logged and
    /// reported as `None`.
    fn try_fit(&mut self, step: usize, model: &TermSet, term: Option<&Term>) -> Option<Scored> {
        let fit = match self.ctx.fit_blip(self.dataset, model, self.quadratic) {
            Ok(f) => f,
            Err(e) => {
                self.failed = true;
                self.log(step, model, term, None, Decision::Failed { reason: e.to_string() });
                return None;
            }
        };
        match fit.inference.as_ref() {
            Some(inf) if inf.qic.is_finite() => {
                let qic = inf.qic;
                Some(Scored { fit, qic })
            }
            _ => {
                self.failed = true;
                let reason = if fit.converged() {
                    "non-finite QIC".to_string()
                } else {
                    "IRLS did not converge".to_string()
                };
                self.log(step, model, term, None, Decision::Failed { reason });
                None
            }
        }
    }

    fn fixed(&mut self, model: &TermSet) -> Result<StageResult> {
        let fit = self.ctx.fit_blip(self.dataset, model, self.quadratic)?;
        if !fit.converged() {
            return Err(GestError::Selection(format!(
                "fixed model {} did not converge",
                model.label()
            )));
        }
        let qic = fit.inference.as_ref().map(|i| i.qic);
        self.log(0, model, None, qic, Decision::Fixed);
        Ok(fit)
    }

    fn exhaustive(&mut self, candidates: &[TermSet]) -> Result<StageResult> {
        if candidates.is_empty() {
            return Err(GestError::Selection("no candidate models".into()));
        }
        let mut best: Option<Scored> = None;
        for cand in candidates {
            if let Some(s) = self.try_fit(0, cand, None) {
                // A lone candidate is simply the selected model.
                if candidates.len() > 1 {
                    self.log(0, cand, None, Some(s.qic), Decision::Evaluated);
                }
                if best.as_ref().is_none_or(|b| s.qic < b.qic) {
                    best = Some(s);
                }
            }
        }
        let best = best.ok_or_else(|| GestError::Selection("every candidate model failed".into()))?;
        self.log(1, &best.fit.blip, None, Some(best.qic), Decision::Selected);
        Ok(best.fit)
    }

    fn forward(&mut self, terms: &[Term]) -> Result<StageResult> {
        match self.opts.criterion {
            Criterion::Qic => self.qic_stepwise(TermSet::intercept_only(), terms, true),
            Criterion::Wald => self.wald_forward(terms),
        }
    }

    fn backward(&mut self, terms: &[Term]) -> Result<StageResult> {
        let full = TermSet::with_terms(terms.to_vec());
        match self.opts.criterion {
            Criterion::Qic => self.qic_stepwise(full, terms, false),
            Criterion::Wald => self.wald_backward(full),
        }
    }

    fn moves(current: &TermSet, terms: &[Term], forward: bool) -> Vec<(Term, TermSet)> {
        if forward {
            terms
                .iter()
                .filter(|t| !current.terms.contains(t))
                .map(|t| {
                    let mut next = current.clone();
                    next.terms.push(t.clone());
                    (t.clone(), next)
                })
                .collect()
        } else {
            current
                .terms
                .iter()
                .map(|t| {
                    let mut next = current.clone();
                    next.terms.retain(|x| x != t);
                    (t.clone(), next)
                })
                .collect()
        }
    }

    /// Greedy QIC search. Adding a term needs a strict decrease; dropping one
    /// is accepted on ties, so ties always favour the smaller model.
    fn qic_stepwise(&mut self, start: TermSet, terms: &[Term], forward: bool) -> Result<StageResult> {
        let mut step = 0;
        let mut current = start;
        let mut current_fit = self.try_fit(step, &current, None);
        if let Some(s) = &current_fit {
            self.log(step, &current, None, Some(s.qic), Decision::Current);
        }
        loop {
            step += 1;
            let mut best: Option<(Term, TermSet, Scored)> = None;
            for (term, cand) in Self::moves(&current, terms, forward) {
                if let Some(s) = self.try_fit(step, &cand, Some(&term)) {
                    self.log(step, &cand, Some(&term), Some(s.qic), Decision::Evaluated);
                    if best.as_ref().is_none_or(|(_, _, b)| s.qic < b.qic) {
                        best = Some((term, cand, s));
                    }
                }
            }
            let current_qic = current_fit.as_ref().map_or(f64::INFINITY, |s| s.qic);
            match best {
                Some((term, cand, s)) if s.qic < current_qic || (!forward && s.qic <= current_qic) => {
                    self.log(step, &cand, Some(&term), Some(s.qic), Decision::Accepted);
                    current = cand;
                    current_fit = Some(s);
                }
                _ => {
                    self.log(step, &current, None, current_fit.as_ref().map(|s| s.qic), Decision::Stop);
                    break;
                }
            }
        }
        let fit = current_fit.ok_or_else(|| GestError::Selection("every candidate model failed".into()))?;
        self.log(step, &current, None, Some(fit.qic), Decision::Selected);
        Ok(fit.fit)
    }

    /// p-value of `term` within a fitted model; a degenerate variance counts
    /// as no evidence.
    fn term_p(fit: &StageResult, term: &Term) -> f64 {
        let idx = fit.blip.terms.iter().position(|t| t == term).expect("term belongs to the model")
            + usize::from(fit.blip.intercept);
        fit.inference
            .as_ref()
            .and_then(|i| i.wald_p.get(idx).copied().flatten())
            .unwrap_or(1.0)
    }

    fn wald_forward(&mut self, terms: &[Term]) -> Result<StageResult> {
        let mut step = 0;
        let mut current = TermSet::intercept_only();
        let mut current_fit = self.try_fit(step, &current, None);
        if let Some(s) = &current_fit {
            self.log(step, &current, None, Some(s.qic), Decision::Current);
        }
        loop {
            step += 1;
            let mut best: Option<(Term, TermSet, Scored, f64)> = None;
            for (term, cand) in Self::moves(&current, terms, true) {
                if let Some(s) = self.try_fit(step, &cand, Some(&term)) {
                    let p = Self::term_p(&s.fit, &term);
                    self.log(step, &cand, Some(&term), Some(p), Decision::Evaluated);
                    if best.as_ref().is_none_or(|(_, _, _, bp)| p < *bp) {
                        best = Some((term, cand, s, p));
                    }
                }
            }
            match best {
                Some((term, cand, s, p)) if p < self.opts.alpha => {
                    self.log(step, &cand, Some(&term), Some(p), Decision::Accepted);
                    current = cand;
                    current_fit = Some(s);
                }
                _ => {
                    self.log(step, &current, None, None, Decision::Stop);
                    break;
                }
            }
        }
        let fit = current_fit.ok_or_else(|| GestError::Selection("every candidate model failed".into()))?;
        self.log(step, &current, None, None, Decision::Selected);
        Ok(fit.fit)
    }

    fn wald_backward(&mut self, full: TermSet) -> Result<StageResult> {
        let mut step = 0;
        let mut current = full;
        loop {
            let Some(s) = self.try_fit(step, &current, None) else {
                // A model that cannot be fitted cannot be tested; fall back
                // to dropping its last term.
                if current.terms.pop().is_none() {
                    return Err(GestError::Selection("every candidate model failed".into()));
                }
                step += 1;
                continue;
            };
            let worst = current
                .terms
                .iter()
                .map(|t| (t.clone(), Self::term_p(&s.fit, t)))
                .fold(None::<(Term, f64)>, |acc, (t, p)| match acc {
                    Some((_, bp)) if bp >= p => acc,
                    _ => Some((t, p)),
                });
            for t in &current.terms {
                let p = Self::term_p(&s.fit, t);
                self.log(step, &current, Some(t), Some(p), Decision::Evaluated);
            }
            match worst {
                Some((term, p)) if p >= self.opts.alpha => {
                    current.terms.retain(|x| *x != term);
                    step += 1;
                    self.log(step, &current, Some(&term), Some(p), Decision::Accepted);
                }
                _ => {
                    self.log(step, &current, None, None, Decision::Selected);
                    return Ok(s.fit);
                }
            }
        }
    }
}
