//! Named simulation studies and their tabular summaries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::harness::{aggregate_selection, analysis_spec, run_replications, true_model, Analysis, Method, ReplicationReport, SelectionTally, Stage2Policy};
use super::scenario::{ErrorDist, Scenario};
use crate::error::{GestError, Result};
use crate::loglinear::IrlsOptions;
use crate::select::nested_models;
use crate::data::Term;

/// Covariate coefficients of the three true blip models per stage.
pub const TRUE_MODELS: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Log-linear estimates over sample sizes and zero proportions.
    Table1,
    /// Selection rates over sample sizes, skewed errors.
    Table2,
    /// Stage-1 selection under each stage-2 policy, skewed errors.
    Table3,
    /// Exhaustive selection for the discrete outcome.
    SuppS1,
    SuppS2,
    SuppS3,
    SuppS4,
    SuppS5,
    SuppS6,
    SuppS7,
    SuppS8,
    SuppS9,
    /// Trace penalties of all candidate models, normal errors.
    Trace,
}

impl Preset {
    pub const ALL: [Preset; 13] = [
        Preset::Table1,
        Preset::Table2,
        Preset::Table3,
        Preset::SuppS1,
        Preset::SuppS2,
        Preset::SuppS3,
        Preset::SuppS4,
        Preset::SuppS5,
        Preset::SuppS6,
        Preset::SuppS7,
        Preset::SuppS8,
        Preset::SuppS9,
        Preset::Trace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table2 => "table2",
            Preset::Table3 => "table3",
            Preset::SuppS1 => "supp-s1",
            Preset::SuppS2 => "supp-s2",
            Preset::SuppS3 => "supp-s3",
            Preset::SuppS4 => "supp-s4",
            Preset::SuppS5 => "supp-s5",
            Preset::SuppS6 => "supp-s6",
            Preset::SuppS7 => "supp-s7",
            Preset::SuppS8 => "supp-s8",
            Preset::SuppS9 => "supp-s9",
            Preset::Trace => "trace",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Preset::Table1 => "log-linear blip estimates by n and P(Y=0)",
            Preset::Table2 => "selection rates by n, log-normal errors",
            Preset::Table3 => "stage-1 selection by stage-2 policy, log-normal errors",
            Preset::SuppS1 => "exhaustive QIC selection, discrete outcome",
            Preset::SuppS2 => "selection by effect size, log-normal errors",
            Preset::SuppS3 => "selection by covariate correlation, log-normal errors",
            Preset::SuppS4 => "non-aggregated selection, log-normal errors",
            Preset::SuppS5 => "selection rates by n, normal errors",
            Preset::SuppS6 => "stage-1 selection by stage-2 policy, normal errors",
            Preset::SuppS7 => "selection by effect size, normal errors",
            Preset::SuppS8 => "selection by covariate correlation, normal errors",
            Preset::SuppS9 => "non-aggregated selection, normal errors",
            Preset::Trace => "trace penalty by candidate model, normal errors",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = GestError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| GestError::Domain(format!("unknown preset `{s}`")))
    }
}

/// One scenario to replicate, tagged with the row group it reports under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub group: String,
    pub scenario: Scenario,
    pub analysis: Analysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let esc = |c: &String| {
            if c.contains(',') || c.contains('"') {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        };
        let mut out = String::new();
        for line in std::iter::once(&self.header).chain(self.rows.iter()) {
            out.push_str(&line.iter().map(esc).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        for line in std::iter::once(&self.header).chain(self.rows.iter()) {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(f, "{}", cells.join("  ").trim_end())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: Preset,
    pub n_reps: usize,
    pub seed: u64,
    /// Stage-2 handling override for stage-1 selection rows.
    pub stage2_policy: Option<Stage2Policy>,
    pub jobs: Vec<(String, ReplicationReport)>,
    pub table: Table,
}

fn job_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

fn scaled(p: [f64; 3], s: f64) -> [f64; 3] {
    p.map(|v| v * s)
}

/// The nine stage-1 by stage-2 truth combinations for one group.
fn grid(group: &str, make: impl Fn([f64; 3], [f64; 3]) -> Scenario, analysis: &Analysis) -> Vec<Job> {
    let mut jobs = Vec::new();
    for s1 in TRUE_MODELS {
        for s2 in TRUE_MODELS {
            jobs.push(Job {
                group: group.to_string(),
                scenario: make(s1, s2),
                analysis: analysis.clone(),
            });
        }
    }
    jobs
}

/// Jobs making up a preset. Seeds are filled in by [`run_preset`].
pub fn jobs(preset: Preset) -> Vec<Job> {
    use ErrorDist::*;
    let correct = Analysis::Stepwise {
        policies: vec![Stage2Policy::Correct],
    };
    let policies = Analysis::Stepwise {
        policies: vec![Stage2Policy::Correct, Stage2Policy::Recommended, Stage2Policy::Intercept],
    };
    let by_n = |err: ErrorDist| -> Vec<Job> {
        [50, 100, 200]
            .into_iter()
            .flat_map(|n| grid(&n.to_string(), |a, b| Scenario::continuous(n, a, b, err, 0), &correct))
            .collect()
    };
    let by_effect = |err: ErrorDist| -> Vec<Job> {
        [1.0, 0.5, 0.1]
            .into_iter()
            .flat_map(|k| {
                grid(
                    &k.to_string(),
                    |a, b| Scenario::continuous(100, scaled(a, k), scaled(b, k), err, 0),
                    &correct,
                )
            })
            .collect()
    };
    let by_corr = |err: ErrorDist| -> Vec<Job> {
        [("none", 0.0), ("medium", 0.25), ("strong", 0.5)]
            .into_iter()
            .flat_map(|(label, rho)| {
                grid(
                    label,
                    |a, b| {
                        let mut s = Scenario::continuous(100, a, b, err, 0);
                        s.covariate_correlation = rho;
                        s
                    },
                    &correct,
                )
            })
            .collect()
    };
    let n100 = |err: ErrorDist, analysis: &Analysis| grid("100", |a, b| Scenario::continuous(100, a, b, err, 0), analysis);
    match preset {
        Preset::Table1 => {
            let mut out = Vec::new();
            for n in [50, 100, 200, 500] {
                for zero in [0.05, 0.10, 0.20] {
                    let s = Scenario::loglinear(n, zero, 0);
                    out.push(Job {
                        group: n.to_string(),
                        analysis: Analysis::Estimate { spec: analysis_spec(&s) },
                        scenario: s,
                    });
                }
            }
            out
        }
        Preset::Table2 => by_n(CenteredLognormal),
        Preset::Table3 => n100(CenteredLognormal, &policies),
        Preset::SuppS1 => grid("200", |a, b| Scenario::discrete(200, scaled(a, 0.5), scaled(b, 0.5), 0), &Analysis::Exhaustive),
        Preset::SuppS2 => by_effect(CenteredLognormal),
        Preset::SuppS3 => by_corr(CenteredLognormal),
        Preset::SuppS4 => n100(CenteredLognormal, &correct),
        Preset::SuppS5 => by_n(StandardNormal),
        Preset::SuppS6 => n100(StandardNormal, &policies),
        Preset::SuppS7 => by_effect(StandardNormal),
        Preset::SuppS8 => by_corr(StandardNormal),
        Preset::SuppS9 => n100(StandardNormal, &correct),
        Preset::Trace => n100(StandardNormal, &Analysis::Trace),
    }
}

/// Jobs of a preset with seeds derived from `seed`, and stepwise analyses
/// restricted to `policy` when one is given.
pub fn seeded_jobs(preset: Preset, seed: u64, policy: Option<Stage2Policy>) -> Vec<Job> {
    let mut out = jobs(preset);
    for (i, job) in out.iter_mut().enumerate() {
        job.scenario.seed = job_seed(seed, i);
        if let (Some(p), Analysis::Stepwise { policies }) = (policy, &mut job.analysis) {
            *policies = vec![p];
        }
    }
    out
}

/// Runs every job of a preset with `n_reps` replications each.
pub fn run_preset(
    preset: Preset,
    n_reps: usize,
    seed: u64,
    irls: &IrlsOptions,
    policy: Option<Stage2Policy>,
) -> Result<PresetReport> {
    let mut reports = Vec::new();
    for job in seeded_jobs(preset, seed, policy) {
        let r = run_replications(&job.scenario, n_reps, &job.analysis, irls)?;
        reports.push((job.group, r));
    }
    let table = render(preset, &reports, policy)?;
    Ok(PresetReport {
        preset,
        n_reps,
        seed,
        stage2_policy: policy,
        jobs: reports,
        table,
    })
}

fn f3(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.3}")
    } else {
        "NA".into()
    }
}

fn groups(reports: &[(String, ReplicationReport)]) -> Vec<(String, Vec<&ReplicationReport>)> {
    let mut out: Vec<(String, Vec<&ReplicationReport>)> = Vec::new();
    for (g, r) in reports {
        match out.iter_mut().find(|(k, _)| k == g) {
            Some((_, v)) => v.push(r),
            None => out.push((g.clone(), vec![r])),
        }
    }
    out
}

fn method_header(first: &str) -> Vec<String> {
    let mut h = vec![first.to_string(), "Model".to_string()];
    h.extend(Method::STEPWISE.iter().map(Method::label));
    h
}

/// Truth labels in display order: stage-1 models, then stage-2 models.
fn truth_labels(stage: usize) -> Vec<String> {
    let names = ["1", "2", "3"];
    (1..=3)
        .map(|k| {
            let terms: Vec<Term> = names[..k].iter().map(|c| Term::covariate(stage, c)).collect();
            crate::data::TermSet::with_terms(terms).label()
        })
        .collect()
}

fn rate_of(pooled: &[SelectionTally], stage: usize, method: Method, policy: Option<Stage2Policy>, truth: &str, restricted: bool) -> f64 {
    pooled
        .iter()
        .find(|t| t.stage == stage && t.method == method && t.policy == policy && t.truth == truth && t.all_converged_only == restricted)
        .map_or(f64::NAN, SelectionTally::rate)
}

/// Builds the display table of a finished preset.
pub fn render(preset: Preset, reports: &[(String, ReplicationReport)], policy: Option<Stage2Policy>) -> Result<Table> {
    let stage_policy = |stage: usize| (stage == 1).then_some(policy.unwrap_or(Stage2Policy::Correct));
    let mut rows = Vec::new();
    let header = match preset {
        Preset::Table1 => {
            for (g, r) in reports {
                let e = r.estimates.as_ref().ok_or_else(|| GestError::State("missing estimates".into()))?;
                let mut row = vec![g.clone(), format!("{:.0}%", r.scenario.zero_prob_target * 100.0)];
                for k in 0..e.mean.len() {
                    row.push(format!("{} ({})", f3(e.mean[k]), f3(e.sd[k])));
                }
                rows.push(row);
            }
            ["n", "P(Y=0)", "psi10 (SE)", "psi11 (SE)", "psi20 (SE)", "psi21 (SE)"].map(String::from).to_vec()
        }
        Preset::Table2 | Preset::SuppS2 | Preset::SuppS3 | Preset::SuppS5 | Preset::SuppS7 | Preset::SuppS8 => {
            let first = match preset {
                Preset::SuppS2 | Preset::SuppS7 => "psi",
                Preset::SuppS3 | Preset::SuppS8 => "Correlation",
                _ => "n",
            };
            for (g, rs) in groups(reports) {
                let pooled = aggregate_selection(&rs)?;
                for stage in [1, 2] {
                    for truth in truth_labels(stage) {
                        let mut row = vec![g.clone(), truth.clone()];
                        for m in Method::STEPWISE {
                            row.push(f3(rate_of(&pooled, stage, m, stage_policy(stage), &truth, false)));
                        }
                        rows.push(row);
                    }
                }
            }
            method_header(first)
        }
        Preset::Table3 | Preset::SuppS6 => {
            let rs: Vec<&ReplicationReport> = reports.iter().map(|(_, r)| r).collect();
            let pooled = aggregate_selection(&rs)?;
            let shown = match policy {
                Some(p) => vec![p],
                None => vec![Stage2Policy::Correct, Stage2Policy::Recommended, Stage2Policy::Intercept],
            };
            for policy in shown {
                for truth in truth_labels(1) {
                    let mut row = vec![policy.label().to_string(), truth.clone()];
                    for m in Method::STEPWISE {
                        row.push(f3(rate_of(&pooled, 1, m, Some(policy), &truth, false)));
                    }
                    rows.push(row);
                }
            }
            method_header("Stage 2")
        }
        Preset::SuppS4 | Preset::SuppS9 => {
            for (_, r) in reports {
                let t = [true_model(&r.scenario, 1).label(), true_model(&r.scenario, 2).label()];
                for stage in [1, 2] {
                    let mut row = vec![t[0].clone(), t[1].clone(), format!("stage {stage}")];
                    for m in Method::STEPWISE {
                        row.push(f3(r.tally(stage, m, stage_policy(stage), false).map_or(f64::NAN, SelectionTally::rate)));
                    }
                    rows.push(row);
                }
            }
            let mut h = vec!["Stage 1 truth".to_string(), "Stage 2 truth".to_string(), "Stage".to_string()];
            h.extend(Method::STEPWISE.iter().map(Method::label));
            h
        }
        Preset::SuppS1 => {
            let rs: Vec<&ReplicationReport> = reports.iter().map(|(_, r)| r).collect();
            let pooled = aggregate_selection(&rs)?;
            let mut header = vec!["True".to_string()];
            header.extend(["Intercept", "x_j1", "x_j1,x_j2", "x_j1,x_j2,x_j3"].map(String::from));
            for stage in [1, 2] {
                let labels: Vec<String> = {
                    let terms: Vec<Term> = ["1", "2", "3"].iter().map(|c| Term::covariate(stage, c)).collect();
                    nested_models(&terms).iter().map(|m| m.label()).collect()
                };
                for truth in truth_labels(stage) {
                    let t = pooled
                        .iter()
                        .find(|t| t.stage == stage && t.truth == truth && t.all_converged_only);
                    let mut row = vec![truth.clone()];
                    for l in &labels {
                        let rate = t.map_or(f64::NAN, |t| {
                            if t.runs == 0 {
                                f64::NAN
                            } else {
                                *t.chosen.get(l).unwrap_or(&0) as f64 / t.runs as f64
                            }
                        });
                        row.push(f3(rate));
                    }
                    rows.push(row);
                }
            }
            header
        }
        Preset::Trace => {
            // Each truth appears in three setups; pool them per candidate.
            rows = pool_trace_rows(reports);
            ["Stage", "True model", "Candidate", "Dimension", "Mean K", "SD K"].map(String::from).to_vec()
        }
    };
    Ok(Table { header, rows })
}

fn pool_trace_rows(reports: &[(String, ReplicationReport)]) -> Vec<Vec<String>> {
    use std::collections::BTreeMap;
    // (stage, truth, model) -> (dimension, n, sum, sum of squares)
    let mut acc: BTreeMap<(usize, String, String), (usize, usize, f64, f64)> = BTreeMap::new();
    for (_, r) in reports {
        for t in &r.trace {
            let e = acc.entry((t.stage, t.truth.clone(), t.model.clone())).or_insert((t.dimension, 0, 0.0, 0.0));
            let n = t.n as f64;
            e.1 += t.n;
            e.2 += t.mean * n;
            // Recover the raw second moment from mean and sample SD.
            let ss = if t.n > 1 { t.sd * t.sd * (n - 1.0) } else { 0.0 } + n * t.mean * t.mean;
            e.3 += ss;
        }
    }
    acc.into_iter()
        .map(|((stage, truth, model), (dim, n, sum, ss))| {
            let nf = n as f64;
            let mean = sum / nf;
            let sd = if n > 1 { ((ss - nf * mean * mean) / (nf - 1.0)).max(0.0).sqrt() } else { 0.0 };
            vec![format!("stage {stage}"), truth, model, dim.to_string(), f3(mean), f3(sd)]
        })
        .collect()
}
