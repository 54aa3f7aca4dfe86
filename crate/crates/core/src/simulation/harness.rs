//! Seeded Monte Carlo replications and their summaries.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{self, Scenario, ScenarioKind, BETA0_BRACKET, CALIBRATION_DRAWS};
use crate::data::{Dataset, ModelSpec, Scale, StageSpec, Term, TermSet, TreatmentType};
use crate::engine::{fit_dtr, Recursion, StageContext};
use crate::error::{GestError, Result};
use crate::loglinear::IrlsOptions;
use crate::select::{all_subsets, nested_models, select_dtr, Criterion, Direction, SelectionOptions, StagePlan};

/// Environment variable capping the number of replication workers.
pub const THREADS_ENV: &str = "GESTDTR_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Policy {
    Correct,
    Recommended,
    Intercept,
}

impl Stage2Policy {
    pub fn label(self) -> &'static str {
        match self {
            Stage2Policy::Correct => "Correct",
            Stage2Policy::Recommended => "Recommended",
            Stage2Policy::Intercept => "Intercept",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Method {
    pub criterion: Criterion,
    pub direction: Direction,
}

impl Method {
    pub const STEPWISE: [Method; 4] = [
        Method {
            criterion: Criterion::Qic,
            direction: Direction::Forward,
        },
        Method {
            criterion: Criterion::Qic,
            direction: Direction::Backward,
        },
        Method {
            criterion: Criterion::Wald,
            direction: Direction::Forward,
        },
        Method {
            criterion: Criterion::Wald,
            direction: Direction::Backward,
        },
    ];

    pub fn label(&self) -> String {
        let c = match self.criterion {
            Criterion::Qic => "QIC_G",
            Criterion::Wald => "Wald",
        };
        let d = match self.direction {
            Direction::Forward => "F",
            Direction::Backward => "B",
            Direction::Exhaustive => "E",
        };
        format!("{c} ({d})")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Analysis {
    /// Fit one model per replication and summarize the blip estimates.
    Estimate { spec: ModelSpec },
    /// Stepwise selection at both stages under every method; stage 1 is
    /// repeated under each requested stage-2 policy.
    Stepwise { policies: Vec<Stage2Policy> },
    /// Lowest-QIC choice among nested candidates, stage 1 with the true
    /// stage-2 model.
    Exhaustive,
    /// Trace penalty of every candidate blip model, stage 1 with the true
    /// stage-2 model.
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    /// Standard deviation of the estimates across converged replications.
    pub sd: Vec<f64>,
    /// Mean sandwich standard error.
    pub mean_se: Vec<f64>,
    /// Mean trace penalty per stage (stage 1 first).
    pub mean_k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTally {
    pub stage: usize,
    pub method: Method,
    /// Stage-2 handling for stage-1 rows.
    pub policy: Option<Stage2Policy>,
    /// Restricted to replications where every candidate at the stage fitted.
    pub all_converged_only: bool,
    pub truth: String,
    pub runs: usize,
    pub correct: usize,
    pub chosen: BTreeMap<String, usize>,
}

impl SelectionTally {
    pub fn rate(&self) -> f64 {
        if self.runs == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.runs as f64
        }
    }

    fn key(&self) -> (usize, Method, Option<Stage2Policy>, bool, String) {
        (self.stage, self.method, self.policy, self.all_converged_only, self.truth.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub stage: usize,
    pub model: String,
    pub truth: String,
    pub dimension: usize,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub scenario: Scenario,
    pub analysis: Analysis,
    pub n_requested: usize,
    pub n_converged: usize,
    pub n_failed: usize,
    /// `(replication, reason)` for every failed replication.
    pub failures: Vec<(u64, String)>,
    pub zero_fraction: f64,
    pub estimates: Option<EstimateSummary>,
    pub selection: Vec<SelectionTally>,
    pub trace: Vec<TraceSummary>,
}

impl ReplicationReport {
    pub fn tally(&self, stage: usize, method: Method, policy: Option<Stage2Policy>, all_converged_only: bool) -> Option<&SelectionTally> {
        self.selection.iter().find(|t| {
            t.stage == stage && t.method == method && t.policy == policy && t.all_converged_only == all_converged_only
        })
    }
}

/// True blip model per stage: the covariates with nonzero coefficients.
pub fn true_model(s: &Scenario, stage: usize) -> TermSet {
    let terms = s.psi_true[stage - 1][1..]
        .iter()
        .enumerate()
        .filter(|(_, p)| **p != 0.0)
        .map(|(k, _)| Term::covariate(stage, &(k + 1).to_string()))
        .collect();
    TermSet::with_terms(terms)
}

fn stage_terms(stage: usize, k: usize) -> Vec<Term> {
    (1..=k).map(|c| Term::covariate(stage, &c.to_string())).collect()
}

/// Label with terms in sorted order, so a model reads the same however the
/// search reached it.
pub fn canonical_label(m: &TermSet) -> String {
    let mut terms = m.terms.clone();
    terms.sort_by_key(|t| t.to_string());
    TermSet { terms, ..m.clone() }.label()
}

fn same_model(a: &TermSet, b: &TermSet) -> bool {
    let mut x: Vec<String> = a.terms.iter().map(|t| t.to_string()).collect();
    let mut y: Vec<String> = b.terms.iter().map(|t| t.to_string()).collect();
    x.sort();
    y.sort();
    a.intercept == b.intercept && x == y
}

/// The analysis model paired with each scenario kind. Treatment models are
/// correct; treatment-free models are linear in the available covariates.
pub fn analysis_spec(s: &Scenario) -> ModelSpec {
    let t = |stage: usize, k: usize| Term::covariate(stage, &k.to_string());
    let stages = match s.kind {
        ScenarioKind::LoglinearTwostage | ScenarioKind::DiscreteQic => (1..=2)
            .map(|j| StageSpec {
                blip: TermSet::with_terms(vec![t(j, 1)]),
                treatment_free: TermSet::with_terms(vec![t(j, 1)]),
                treatment: TermSet::with_terms(vec![t(j, 1)]),
                ..Default::default()
            })
            .collect(),
        ScenarioKind::ContinuousTwostage => {
            let mut tf2 = stage_terms(1, 3);
            tf2.extend((1..=3).map(|k| Term::treatment(1).times(t(1, k))));
            tf2.extend(stage_terms(2, 3));
            vec![
                StageSpec {
                    blip: TermSet::with_terms(stage_terms(1, 3)),
                    treatment_free: TermSet::with_terms(stage_terms(1, 3)),
                    treatment: TermSet::with_terms(stage_terms(1, 3)),
                    ..Default::default()
                },
                StageSpec {
                    blip: TermSet::with_terms(stage_terms(2, 3)),
                    treatment_free: TermSet::with_terms(tf2),
                    treatment: TermSet::with_terms(stage_terms(2, 3)),
                    ..Default::default()
                },
            ]
        }
    };
    ModelSpec {
        scale: if s.has_poisson_outcome() {
            Scale::Loglinear
        } else {
            Scale::Linear
        },
        treatment_type: TreatmentType::Binary,
        stages,
    }
}

#[derive(Debug, Default)]
struct RepOutcome {
    error: Option<String>,
    /// Some replications finish but with non-converged candidate fits.
    converged: bool,
    zeros: f64,
    psi: Vec<f64>,
    se: Vec<f64>,
    k: Vec<f64>,
    picks: Vec<Pick>,
    traces: Vec<(usize, String, usize, f64)>,
}

#[derive(Debug)]
struct Pick {
    stage: usize,
    method: Method,
    policy: Option<Stage2Policy>,
    all_ok: bool,
    chosen: String,
    correct: bool,
}

fn run_one(s: &Scenario, analysis: &Analysis, irls: &IrlsOptions, rep: u64) -> RepOutcome {
    let mut out = RepOutcome::default();
    let ds = match scenario::generate(s, rep) {
        Ok(d) => d,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.zeros = ds.outcomes().iter().filter(|y| **y == 0.0).count() as f64 / ds.n() as f64;
    let result = match analysis {
        Analysis::Estimate { spec } => estimate(&ds, spec, irls, &mut out),
        Analysis::Stepwise { policies } => stepwise(&ds, s, policies, irls, &mut out),
        Analysis::Exhaustive => exhaustive(&ds, s, irls, &mut out),
        Analysis::Trace => trace(&ds, s, irls, &mut out),
    };
    if let Err(e) = result {
        out.error = Some(e.to_string());
        out.converged = false;
    }
    out
}

fn estimate(ds: &Dataset, spec: &ModelSpec, irls: &IrlsOptions, out: &mut RepOutcome) -> Result<()> {
    let fit = fit_dtr(ds, spec, irls)?;
    if let Some(stage) = fit.failed_stage {
        out.converged = false;
        out.error = Some(format!("IRLS did not converge at stage {stage}"));
        return Ok(());
    }
    out.converged = true;
    for stage in 1..=spec.n_stages() {
        let st = fit.stage(stage).expect("every stage fitted");
        let inf = st.inference.as_ref().expect("converged stages carry inference");
        out.psi.extend(st.psi().iter());
        out.se.extend(inf.se.iter());
        out.k.push(inf.k);
    }
    Ok(())
}

fn stepwise(ds: &Dataset, s: &Scenario, policies: &[Stage2Policy], irls: &IrlsOptions, out: &mut RepOutcome) -> Result<()> {
    let base = analysis_spec(s);
    let truth = [true_model(s, 1), true_model(s, 2)];
    for method in Method::STEPWISE {
        let opts = SelectionOptions {
            direction: method.direction,
            criterion: method.criterion,
            irls: *irls,
            ..Default::default()
        };
        let terms = [stage_terms(1, 3), stage_terms(2, 3)];
        let free = select_dtr(
            ds,
            &base,
            &[StagePlan::Stepwise(terms[0].clone()), StagePlan::Stepwise(terms[1].clone())],
            &opts,
        )?;
        let chosen2 = free.chosen_at(2);
        out.picks.push(Pick {
            stage: 2,
            method,
            policy: None,
            all_ok: free.all_candidates_ok(2),
            chosen: canonical_label(chosen2),
            correct: same_model(chosen2, &truth[1]),
        });
        for &policy in policies {
            let result = match policy {
                Stage2Policy::Recommended => free.clone(),
                Stage2Policy::Correct | Stage2Policy::Intercept => {
                    let fixed = if policy == Stage2Policy::Correct {
                        truth[1].clone()
                    } else {
                        TermSet::intercept_only()
                    };
                    select_dtr(
                        ds,
                        &base,
                        &[StagePlan::Stepwise(terms[0].clone()), StagePlan::Fixed(fixed)],
                        &opts,
                    )?
                }
            };
            let chosen1 = result.chosen_at(1);
            out.picks.push(Pick {
                stage: 1,
                method,
                policy: Some(policy),
                all_ok: result.all_candidates_ok(1),
                chosen: canonical_label(chosen1),
                correct: same_model(chosen1, &truth[0]),
            });
        }
    }
    out.converged = out.picks.iter().all(|p| p.all_ok);
    Ok(())
}

fn exhaustive(ds: &Dataset, s: &Scenario, irls: &IrlsOptions, out: &mut RepOutcome) -> Result<()> {
    let base = analysis_spec(s);
    let truth = [true_model(s, 1), true_model(s, 2)];
    let cands = [nested_models(&stage_terms(1, 3)), nested_models(&stage_terms(2, 3))];
    let opts = SelectionOptions {
        direction: Direction::Exhaustive,
        criterion: Criterion::Qic,
        irls: *irls,
        ..Default::default()
    };
    let method = Method {
        criterion: Criterion::Qic,
        direction: Direction::Exhaustive,
    };
    // Stage 2 first; its choice does not depend on the stage-1 plan.
    let stage2 = select_dtr(
        ds,
        &base,
        &[StagePlan::Fixed(TermSet::intercept_only()), StagePlan::Exhaustive(cands[1].clone())],
        &opts,
    );
    let stage1 = select_dtr(
        ds,
        &base,
        &[StagePlan::Exhaustive(cands[0].clone()), StagePlan::Fixed(truth[1].clone())],
        &opts,
    );
    let mut all_ok = true;
    match stage2 {
        Ok(r) => {
            let ok = r.all_candidates_ok(2);
            all_ok &= ok;
            out.picks.push(Pick {
                stage: 2,
                method,
                policy: None,
                all_ok: ok,
                chosen: canonical_label(r.chosen_at(2)),
                correct: same_model(r.chosen_at(2), &truth[1]),
            });
        }
        // A failure at the fixed stage-1 fit still leaves stage 2 selected;
        // anything else is a failure of the stage-2 search itself.
        Err(GestError::Stage { stage: 1, .. }) => {}
        Err(e) => return Err(e),
    }
    let r = stage1?;
    let ok = r.all_candidates_ok(1);
    all_ok &= ok;
    out.picks.push(Pick {
        stage: 1,
        method,
        policy: Some(Stage2Policy::Correct),
        all_ok: ok,
        chosen: canonical_label(r.chosen_at(1)),
        correct: same_model(r.chosen_at(1), &truth[0]),
    });
    out.converged = all_ok;
    Ok(())
}

fn trace(ds: &Dataset, s: &Scenario, irls: &IrlsOptions, out: &mut RepOutcome) -> Result<()> {
    let mut spec = analysis_spec(s);
    let truth2 = true_model(s, 2);
    spec.stages[1].blip = truth2.clone();
    let mut rec = Recursion::new(ds, spec.scale, irls);
    let n_cov = s.n_covariates();
    let mut all_ok = true;
    for stage in [2, 1] {
        let ctx = StageContext::new(ds, &spec, stage, rec.pseudo_outcome()?, irls).map_err(|e| e.at_stage(stage))?;
        for cand in all_subsets(&stage_terms(stage, n_cov)) {
            match ctx.fit_blip(ds, &cand, &TermSet::empty()) {
                Ok(f) => match &f.inference {
                    Some(inf) => out.traces.push((stage, canonical_label(&cand), cand.ncols(), inf.k)),
                    None => all_ok = false,
                },
                Err(_) => all_ok = false,
            }
        }
        if stage == 2 {
            let fixed = ctx.fit_blip(ds, &truth2, &TermSet::empty()).map_err(|e| e.at_stage(2))?;
            if !fixed.converged() {
                return Err(GestError::Stage {
                    stage: 2,
                    source: Box::new(GestError::State("true stage-2 model did not converge".into())),
                });
            }
            rec.absorb(&fixed);
        }
    }
    out.converged = all_ok;
    Ok(())
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn worker_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.parse().ok().filter(|n: &usize| *n > 0)
}

/// Scenario with its outcome intercept calibrated, ready for replication.
pub fn prepare(s: &Scenario) -> Result<Scenario> {
    s.validate()?;
    let mut s = s.clone();
    if s.has_poisson_outcome() && s.beta0.is_none() {
        s.beta0 = Some(scenario::calibrate_beta0(&s, s.zero_prob_target, CALIBRATION_DRAWS, BETA0_BRACKET)?);
    }
    Ok(s)
}

/// Runs `n_reps` replications in parallel and folds them in replication
/// order, so the report does not depend on scheduling or worker count.
pub fn run_replications(s: &Scenario, n_reps: usize, analysis: &Analysis, irls: &IrlsOptions) -> Result<ReplicationReport> {
    if n_reps == 0 {
        return Err(GestError::Domain("n_reps must be at least 1".into()));
    }
    irls.validate()?;
    let s = prepare(s)?;
    let run = || -> Vec<RepOutcome> {
        (0..n_reps as u64)
            .into_par_iter()
            .map(|rep| run_one(&s, analysis, irls, rep))
            .collect()
    };
    let outcomes = match worker_count() {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| GestError::Io(e.to_string()))?
            .install(run),
        None => run(),
    };
    Ok(summarize(s, analysis.clone(), outcomes))
}

fn summarize(s: Scenario, analysis: Analysis, outcomes: Vec<RepOutcome>) -> ReplicationReport {
    let n_requested = outcomes.len();
    let mut failures = Vec::new();
    let mut n_converged = 0;
    for (rep, o) in outcomes.iter().enumerate() {
        match (&o.error, o.converged) {
            (None, true) => n_converged += 1,
            (Some(e), _) => failures.push((rep as u64, e.clone())),
            (None, false) => failures.push((rep as u64, "a candidate fit did not converge".into())),
        }
    }
    let zero_fraction = outcomes.iter().map(|o| o.zeros).sum::<f64>() / n_requested as f64;

    let estimates = match &analysis {
        Analysis::Estimate { spec } => {
            let ok: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.error.is_none() && o.converged).collect();
            let p = ok.first().map_or(0, |o| o.psi.len());
            let col = |f: &dyn Fn(&RepOutcome) -> &Vec<f64>, k: usize| -> Vec<f64> { ok.iter().map(|o| f(o)[k]).collect() };
            let mut names = Vec::new();
            let mut truth = Vec::new();
            for (j, st) in spec.stages.iter().enumerate() {
                for (c, _) in st.blip.column_names().iter().enumerate() {
                    names.push(format!("psi{}{}", j + 1, c));
                    truth.push(s.psi_true.get(j).and_then(|v| v.get(c)).copied().unwrap_or(f64::NAN));
                }
            }
            let stages = if ok.is_empty() { 0 } else { spec.n_stages() };
            Some(EstimateSummary {
                names,
                truth,
                mean: (0..p).map(|k| mean_sd(&col(&|o| &o.psi, k)).0).collect(),
                sd: (0..p).map(|k| mean_sd(&col(&|o| &o.psi, k)).1).collect(),
                mean_se: (0..p).map(|k| mean_sd(&col(&|o| &o.se, k)).0).collect(),
                mean_k: (0..stages).map(|k| mean_sd(&col(&|o| &o.k, k)).0).collect(),
            })
        }
        _ => None,
    };

    let mut tallies: Vec<SelectionTally> = Vec::new();
    for o in outcomes.iter().filter(|o| o.error.is_none()) {
        for p in &o.picks {
            let truth = true_model(&s, p.stage).label();
            for restricted in [false, true] {
                if restricted && !p.all_ok {
                    continue;
                }
                let pos = tallies.iter().position(|t| {
                    t.stage == p.stage && t.method == p.method && t.policy == p.policy && t.all_converged_only == restricted
                });
                let t = match pos {
                    Some(i) => &mut tallies[i],
                    None => {
                        tallies.push(SelectionTally {
                            stage: p.stage,
                            method: p.method,
                            policy: p.policy,
                            all_converged_only: restricted,
                            truth: truth.clone(),
                            runs: 0,
                            correct: 0,
                            chosen: BTreeMap::new(),
                        });
                        tallies.last_mut().unwrap()
                    }
                };
                t.runs += 1;
                t.correct += usize::from(p.correct);
                *t.chosen.entry(p.chosen.clone()).or_default() += 1;
            }
        }
    }

    let mut trace_groups: BTreeMap<(usize, String), (usize, Vec<f64>)> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.error.is_none()) {
        for (stage, model, dim, k) in &o.traces {
            trace_groups.entry((*stage, model.clone())).or_insert((*dim, Vec::new())).1.push(*k);
        }
    }
    let trace = trace_groups
        .into_iter()
        .map(|((stage, model), (dimension, ks))| {
            let (mean, sd) = mean_sd(&ks);
            TraceSummary {
                stage,
                truth: true_model(&s, stage).label(),
                model,
                dimension,
                n: ks.len(),
                mean,
                sd,
            }
        })
        .collect();

    ReplicationReport {
        scenario: s,
        analysis,
        n_requested,
        n_converged,
        n_failed: n_requested - n_converged,
        failures,
        zero_fraction,
        estimates,
        selection: tallies,
        trace,
    }
}

/// Pools selection tallies across setups that share a stage, method, policy
/// and true model at that stage.
pub fn aggregate_selection(reports: &[&ReplicationReport]) -> Result<Vec<SelectionTally>> {
    let Some(first) = reports.first() else {
        return Ok(Vec::new());
    };
    let stages = first.scenario.psi_true.len();
    let mut pooled: Vec<SelectionTally> = Vec::new();
    for r in reports {
        if r.scenario.psi_true.len() != stages || r.scenario.kind != first.scenario.kind {
            return Err(GestError::Aggregation(format!(
                "cannot pool a {:?} report with a {:?} report",
                r.scenario.kind, first.scenario.kind
            )));
        }
        for t in &r.selection {
            match pooled.iter_mut().find(|p| p.key() == t.key()) {
                Some(p) => {
                    p.runs += t.runs;
                    p.correct += t.correct;
                    for (m, c) in &t.chosen {
                        *p.chosen.entry(m.clone()).or_default() += c;
                    }
                }
                None => pooled.push(t.clone()),
            }
        }
    }
    Ok(pooled)
}
