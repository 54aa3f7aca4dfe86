use gestdtr_core::csv_io;
use gestdtr_core::engine::fit_dtr;
use gestdtr_core::select::{select_dtr, StagePlan, TrailEntry};
use gestdtr_core::simulation::{analysis_spec, run_preset, run_replications, Analysis, ReplicationReport, Table};
use gestdtr_core::summary::{regime_rows, FitSummary, SelectionSummary, StageSummary};
use gestdtr_core::Dataset;
use serde::Serialize;

use crate::config::{Command, Format, RunConfig};
use crate::error::CliError;

/// Runs one command and returns the rendered output.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<String, CliError> {
    cfg.irls.validate()?;
    match cmd {
        Command::Fit => cmd_fit(cfg),
        Command::Select => cmd_select(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::Regime => cmd_regime(cfg),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    Ok(csv_io::read_csv_path(cfg.require_dataset()?)?)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Coefficient rows followed by one row per stage-level statistic.
fn stage_rows(stages: &[StageSummary]) -> Table {
    let mut rows = Vec::new();
    for s in stages {
        let stage = s.stage.to_string();
        for (k, (name, v)) in s.blip_columns.iter().zip(&s.psi).enumerate() {
            let se = s.se.as_ref().map(|x| x[k]);
            let p = s.wald_p.as_ref().and_then(|x| x[k]);
            rows.push(vec![stage.clone(), "psi".into(), name.clone(), num(*v), opt(se), opt(p)]);
        }
        for (name, v) in s.beta_columns.iter().zip(&s.beta) {
            rows.push(vec![stage.clone(), "beta".into(), name.clone(), num(*v), String::new(), String::new()]);
        }
        for (name, v) in s.alpha_columns.iter().zip(&s.alpha) {
            rows.push(vec![stage.clone(), "alpha".into(), name.clone(), num(*v), String::new(), String::new()]);
        }
        for (name, v) in [("Q", Some(s.q)), ("K", s.k), ("QIC", s.qic), ("converged", Some(f64::from(u8::from(s.converged))))] {
            rows.push(vec![stage.clone(), name.into(), String::new(), opt(v), String::new(), String::new()]);
        }
    }
    Table {
        header: ["stage", "parameter", "term", "estimate", "se", "wald_p"].map(String::from).to_vec(),
        rows,
    }
}

fn trail_table(trail: &[TrailEntry]) -> Table {
    let rows = trail
        .iter()
        .map(|t| {
            let decision = serde_json::to_value(&t.decision)
                .ok()
                .map(|v| match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Object(m) => m.keys().next().cloned().unwrap_or_default(),
                    other => other.to_string(),
                })
                .unwrap_or_default();
            vec![
                t.stage.to_string(),
                t.step.to_string(),
                t.model.clone(),
                t.term.clone().unwrap_or_default(),
                opt(t.value),
                decision,
            ]
        })
        .collect();
    Table {
        header: ["stage", "step", "model", "term", "value", "decision"].map(String::from).to_vec(),
        rows,
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let spec = cfg.require_spec()?;
    let fit = fit_dtr(&ds, spec, &cfg.irls)?;
    let summary = FitSummary::new(&fit, spec);
    match cfg.output.format {
        Format::Json => to_json(&summary),
        Format::Csv => Ok(stage_rows(&summary.stages).to_csv()),
    }
}

pub fn cmd_select(cfg: &RunConfig) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let spec = cfg.require_spec()?;
    let plans = match &cfg.selection.plans {
        Some(p) => p.clone(),
        None => spec.stages.iter().map(|s| StagePlan::Stepwise(s.blip.terms.clone())).collect(),
    };
    let res = select_dtr(&ds, spec, &plans, &cfg.selection_options())?;
    let summary = SelectionSummary::new(&res, spec);
    match cfg.output.format {
        Format::Json => to_json(&summary),
        Format::Csv => Ok(trail_table(&summary.trail).to_csv()),
    }
}

pub fn cmd_regime(cfg: &RunConfig) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let spec = cfg.require_spec()?;
    let fit = fit_dtr(&ds, spec, &cfg.irls)?;
    if let Some(stage) = fit.failed_stage {
        return Err(CliError::Core(gestdtr_core::GestError::Stage {
            stage,
            source: Box::new(gestdtr_core::GestError::State("IRLS did not converge; no regime available".into())),
        }));
    }
    let rows = regime_rows(&ds, &fit);
    match cfg.output.format {
        Format::Json => {
            let v: Vec<_> = rows
                .iter()
                .map(|(id, a)| serde_json::json!({ "id": id, "optimal": a }))
                .collect();
            to_json(&v)
        }
        Format::Csv => {
            let mut header = vec!["id".to_string()];
            header.extend((1..=spec.n_stages()).map(|j| format!("a{j}_opt")));
            let rows = rows
                .into_iter()
                .map(|(id, a)| std::iter::once(id).chain(a.into_iter().map(num)).collect())
                .collect();
            Ok(Table { header, rows }.to_csv())
        }
    }
}

/// Summary table of a single custom-scenario report.
fn report_table(r: &ReplicationReport) -> Table {
    if let Some(e) = &r.estimates {
        let rows = (0..e.names.len())
            .map(|k| vec![e.names[k].clone(), num(e.truth[k]), num(e.mean[k]), num(e.sd[k]), num(e.mean_se[k])])
            .collect();
        return Table {
            header: ["parameter", "truth", "mean", "sd", "mean_se"].map(String::from).to_vec(),
            rows,
        };
    }
    if !r.trace.is_empty() {
        let rows = r
            .trace
            .iter()
            .map(|t| {
                vec![
                    t.stage.to_string(),
                    t.model.clone(),
                    t.truth.to_string(),
                    t.dimension.to_string(),
                    t.n.to_string(),
                    num(t.mean),
                    num(t.sd),
                ]
            })
            .collect();
        return Table {
            header: ["stage", "model", "truth", "dimension", "runs", "mean_k", "sd_k"].map(String::from).to_vec(),
            rows,
        };
    }
    let rows = r
        .selection
        .iter()
        .map(|t| {
            vec![
                t.stage.to_string(),
                t.method.label(),
                t.policy.map(|p| p.label().to_string()).unwrap_or_default(),
                t.all_converged_only.to_string(),
                t.truth.clone(),
                t.runs.to_string(),
                t.correct.to_string(),
                num(t.rate()),
            ]
        })
        .collect();
    Table {
        header: ["stage", "method", "policy", "converged_only", "truth", "runs", "correct", "rate"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let (seed, reps) = (cfg.seed(), cfg.reps());
    if reps == 0 {
        return Err(CliError::Config("reps must be at least 1".into()));
    }
    if let Some(preset) = cfg.preset {
        let report = run_preset(preset, reps, seed, &cfg.irls, cfg.stage2_policy)?;
        return match cfg.output.format {
            Format::Json => to_json(&report),
            Format::Csv => Ok(report.table.to_csv()),
        };
    }
    let mut scenario = cfg
        .scenario
        .clone()
        .ok_or_else(|| CliError::Config("simulate needs a preset (--scenario) or a `[scenario]` table".into()))?;
    if cfg.seed.is_some() {
        scenario.seed = seed;
    }
    let mut analysis = cfg.analysis.clone().unwrap_or_else(|| Analysis::Estimate {
        spec: analysis_spec(&scenario),
    });
    if let (Some(p), Analysis::Stepwise { policies }) = (cfg.stage2_policy, &mut analysis) {
        *policies = vec![p];
    }
    let report = run_replications(&scenario, reps, &analysis, &cfg.irls)?;
    match cfg.output.format {
        Format::Json => to_json(&report),
        Format::Csv => Ok(report_table(&report).to_csv()),
    }
}
