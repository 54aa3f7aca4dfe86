use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gestdtr_core::csv_io::write_csv_path;
use gestdtr_core::data::{DoseRange, StageRecord, Subject};
use gestdtr_core::engine::fit_dtr;
use gestdtr_core::loglinear::IrlsOptions;
use gestdtr_core::select::{select_dtr, SelectionOptions, StagePlan};
use gestdtr_core::simulation::{analysis_spec, generate, ErrorDist, Scenario};
use gestdtr_core::summary::{FitSummary, SelectionSummary};
use gestdtr_core::{Dataset, ModelSpec, Scale, StageSpec, Term, TermSet, TreatmentType};
use serde_json::Value;
use tempfile::TempDir;

fn gestdtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gestdtr")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"].clone()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn dataset(&self, name: &str, ds: &Dataset) -> String {
        let p = self.path(name);
        write_csv_path(ds, &p).unwrap();
        s(&p)
    }

    fn spec(&self, name: &str, spec: &ModelSpec) -> String {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string(spec).unwrap()).unwrap();
        s(&p)
    }

    fn text(&self, name: &str, body: &str) -> String {
        let p = self.path(name);
        std::fs::write(&p, body).unwrap();
        s(&p)
    }
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn continuous_case() -> (Dataset, ModelSpec) {
    let sc = Scenario::continuous(200, [1.0, 1.0, 1.0], [1.0, 0.0, 0.0], ErrorDist::CenteredLognormal, 11);
    (generate(&sc, 0).unwrap(), analysis_spec(&sc))
}

fn loglinear_case() -> (Dataset, ModelSpec) {
    let sc = Scenario::discrete(200, [0.5, 0.5, 0.0], [0.5, 0.0, 0.0], 5);
    (generate(&sc, 0).unwrap(), analysis_spec(&sc))
}

#[test]
fn empty_csv_is_a_parse_error() {
    let fx = Fixture::new();
    let data = fx.text("empty.csv", "");
    let (_, spec) = continuous_case();
    let spec = fx.spec("spec.json", &spec);
    let err = stderr_error(&gestdtr(&["fit", "--data", &data, "--spec", &spec]));
    assert_eq!(err["kind"], "parse");
    assert_eq!(err["line"], 1);
}

#[test]
fn malformed_cell_reports_its_position() {
    let fx = Fixture::new();
    let data = fx.text("bad.csv", "id,x1_a,a1,y\n1,0.5,1,2\n2,0.1,oops,1\n");
    let spec = ModelSpec {
        scale: Scale::Linear,
        treatment_type: TreatmentType::Binary,
        stages: vec![StageSpec::default()],
    };
    let spec = fx.spec("spec.json", &spec);
    let err = stderr_error(&gestdtr(&["fit", "--data", &data, "--spec", &spec]));
    assert_eq!((err["line"].as_u64(), err["column"].as_u64()), (Some(3), Some(3)));
}

#[test]
fn fit_json_matches_the_library() {
    let fx = Fixture::new();
    let (ds, spec) = continuous_case();
    let data = fx.dataset("d.csv", &ds);
    let spec_path = fx.spec("spec.json", &spec);
    let got = stdout_json(&gestdtr(&["fit", "--data", &data, "--spec", &spec_path]));
    let fit = fit_dtr(&ds, &spec, &IrlsOptions::default()).unwrap();
    let want = serde_json::to_value(FitSummary::new(&fit, &spec)).unwrap();
    assert_eq!(got, want);
    assert_eq!(got["stages"][0]["stage"], 1);
    assert!(got["stages"][1]["qic"].is_number());
}

#[test]
fn fit_csv_lists_coefficients_and_stage_statistics() {
    let fx = Fixture::new();
    let (ds, spec) = continuous_case();
    let data = fx.dataset("d.csv", &ds);
    let spec_path = fx.spec("spec.json", &spec);
    let out = gestdtr(&["fit", "--data", &data, "--spec", &spec_path, "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("stage,parameter,term,estimate,se,wald_p"));
    for key in ["1,psi,(intercept)", "2,beta,", "1,alpha,", "2,QIC,", "1,converged,,1"] {
        assert!(text.lines().any(|l| l.starts_with(key)), "{key}");
    }
}

#[test]
fn negative_outcome_on_log_scale_names_rows() {
    let fx = Fixture::new();
    let (mut ds, spec) = loglinear_case();
    ds.subjects[3].outcome = -1.0;
    ds.subjects[17].outcome = -0.5;
    let data = fx.dataset("d.csv", &ds);
    let spec = fx.spec("spec.json", &spec);
    let err = stderr_error(&gestdtr(&["fit", "--data", &data, "--spec", &spec]));
    assert_eq!(err["kind"], "validation");
    assert_eq!(err["rows"], serde_json::json!([3, 17]));
}

#[test]
fn config_file_drives_a_run_and_flags_override_it() {
    let fx = Fixture::new();
    let (ds, spec) = continuous_case();
    let data = fx.dataset("d.csv", &ds);
    let spec_path = fx.spec("spec.json", &spec);
    let out_path = fx.path("out.csv");
    let cfg = fx.text(
        "run.toml",
        &format!("command = \"fit\"\ndataset = {data:?}\n[output]\nformat = \"json\"\npath = {:?}\n", s(&out_path)),
    );
    let out = gestdtr(&["--config", &cfg, "--spec", &spec_path, "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(out_path).unwrap();
    assert!(text.starts_with("stage,parameter"));
}

#[test]
fn missing_command_and_bad_config_are_reported() {
    let fx = Fixture::new();
    assert_eq!(stderr_error(&gestdtr(&[]))["kind"], "config");
    let cfg = fx.text("run.toml", "comand = \"fit\"\n");
    assert_eq!(stderr_error(&gestdtr(&["--config", &cfg]))["kind"], "config");
}

#[test]
fn single_candidate_selection_has_one_trail_entry_per_stage() {
    let fx = Fixture::new();
    let (ds, spec) = continuous_case();
    let data = fx.dataset("d.csv", &ds);
    let spec_path = fx.spec("spec.json", &spec);
    let plans = spec.stages.iter().map(|st| StagePlan::Exhaustive(vec![st.blip.clone()])).collect();
    let cfg = gestdtr_cli::RunConfig {
        command: Some(gestdtr_cli::Command::Select),
        selection: gestdtr_cli::config::SelectionConfig {
            direction: gestdtr_core::select::Direction::Exhaustive,
            plans: Some(plans),
            ..Default::default()
        },
        ..Default::default()
    };
    let cfg = fx.text("run.toml", &cfg.to_toml().unwrap());
    let got = stdout_json(&gestdtr(&["--config", &cfg, "--data", &data, "--spec", &spec_path]));
    let trail = got["trail"].as_array().unwrap();
    assert_eq!(trail.len(), 2);
    assert!(trail.iter().all(|t| t["decision"] == "selected"));
    let chosen: Vec<String> = spec.stages.iter().map(|st| st.blip.label()).collect();
    assert_eq!(got["chosen"], serde_json::json!(chosen));
}

#[test]
fn stepwise_trails_are_reproducible_in_both_directions() {
    let fx = Fixture::new();
    let (ds, spec) = continuous_case();
    let data = fx.dataset("d.csv", &ds);
    let spec_path = fx.spec("spec.json", &spec);
    let mut trails = Vec::new();
    for dir in ["forward", "backward"] {
        let cfg = fx.text(&format!("{dir}.toml"), &format!("[selection]\ndirection = \"{dir}\"\n"));
        let run = || gestdtr(&["select", "--config", &cfg, "--data", &data, "--spec", &spec_path, "--seed", "3"]);
        let a = stdout_json(&run());
        assert_eq!(a, stdout_json(&run()));
        assert!(a["trail"].as_array().unwrap().len() > 2);
        trails.push(a["trail"].clone());
    }
    assert_ne!(trails[0], trails[1]);
}

#[test]
fn exhaustive_over_nested_loglinear_candidates_matches_the_library() {
    let fx = Fixture::new();
    let (ds, spec) = loglinear_case();
    let data = fx.dataset("d.csv", &ds);
    let spec_path = fx.spec("spec.json", &spec);
    let nested = |j: usize| -> Vec<TermSet> {
        let names: Vec<String> = (1..=3).map(|k| format!("{k}")).collect();
        (0..=3)
            .map(|m| TermSet::with_terms(names[..m].iter().map(|n| Term::covariate(j, n)).collect()))
            .collect()
    };
    let plans = vec![StagePlan::Exhaustive(nested(1)), StagePlan::Exhaustive(nested(2))];
    let opts = SelectionOptions {
        direction: gestdtr_core::select::Direction::Exhaustive,
        ..Default::default()
    };
    let cfg = gestdtr_cli::RunConfig {
        command: Some(gestdtr_cli::Command::Select),
        selection: gestdtr_cli::config::SelectionConfig {
            direction: opts.direction,
            plans: Some(plans.clone()),
            ..Default::default()
        },
        ..Default::default()
    };
    let cfg_path = fx.text("run.toml", &cfg.to_toml().unwrap());
    let got = stdout_json(&gestdtr(&["--config", &cfg_path, "--data", &data, "--spec", &spec_path]));
    let res = select_dtr(&ds, &spec, &plans, &opts).unwrap();
    assert_eq!(got, serde_json::to_value(SelectionSummary::new(&res, &spec)).unwrap());
    let evaluated = got["trail"].as_array().unwrap().iter().filter(|t| t["decision"] == "evaluated").count();
    assert_eq!(evaluated + res.stages_with_failures.len(), 8);
}

#[test]
fn simulate_is_deterministic_for_a_fixed_seed() {
    let fx = Fixture::new();
    let cfg = fx.text(
        "sim.toml",
        "command = \"simulate\"\n[scenario]\nkind = \"continuous_twostage\"\nn = 80\npsi_true = [[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]]\nerror = \"standard_normal\"\nseed = 1\n[analysis]\ntype = \"stepwise\"\npolicies = [\"correct\"]\n",
    );
    let run = |seed: &str| gestdtr(&["--config", &cfg, "--reps", "2", "--seed", seed]);
    let a = stdout_json(&run("9"));
    assert_eq!(a, stdout_json(&run("9")));
    assert_eq!(a["n_requested"], 2);
    assert_eq!(a["scenario"]["seed"], 9);
    assert_ne!(a, stdout_json(&run("10")));
}

#[test]
fn preset_tables_have_the_published_columns() {
    let out = gestdtr(&["simulate", "--scenario", "table1", "--reps", "2", "--seed", "4", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("n,P(Y=0),psi10 (SE),psi11 (SE),psi20 (SE),psi21 (SE)"));
    assert_eq!(text.lines().count(), 13);

    let out = gestdtr(&["simulate", "--scenario", "table2", "--reps", "2", "--seed", "4", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("n,Model,QIC_G (F),QIC_G (B),Wald (F),Wald (B)"));
}

#[test]
fn stage2_policy_flag_restricts_table3_rows() {
    let out = gestdtr(&["simulate", "--scenario", "table3", "--reps", "1", "--stage2-policy", "intercept", "--format", "json"]);
    let v = stdout_json(&out);
    assert_eq!(v["stage2_policy"], "intercept");
    let rows = v["table"]["rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.as_array().unwrap().iter().any(|c| c == "Intercept")));
    let bad = gestdtr(&["simulate", "--scenario", "table3", "--stage2-policy", "sometimes"]);
    assert!(!bad.status.success());
}

fn one_stage(n: usize, treated: impl Fn(usize) -> f64, y: impl Fn(f64, f64) -> f64) -> Dataset {
    let subjects = (0..n)
        .map(|i| {
            let x = (i % 10) as f64 / 10.0;
            let a = treated(i);
            Subject {
                stages: vec![StageRecord {
                    covariates: vec![x],
                    treatment: a,
                }],
                outcome: y(x, a) + ((i * 7919 % 13) as f64 - 6.0) / 60.0,
            }
        })
        .collect();
    Dataset::new(vec![vec!["x".into()]], subjects, None).unwrap()
}

fn regime(fx: &Fixture, ds: &Dataset, spec: &ModelSpec) -> Vec<Vec<f64>> {
    let data = fx.dataset("r.csv", ds);
    let spec = fx.spec("r.json", spec);
    let out = gestdtr(&["regime", "--data", &data, "--spec", &spec, "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,a1_opt"));
    lines
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn regime_treats_everyone_when_the_blip_is_positive() {
    let fx = Fixture::new();
    let ds = one_stage(60, |i| ((i * 31 + 7) % 5 < 2) as u8 as f64, |x, a| x + a * (2.0 + x));
    let spec = ModelSpec {
        scale: Scale::Linear,
        treatment_type: TreatmentType::Binary,
        stages: vec![StageSpec {
            blip: TermSet::with_terms(vec![Term::covariate(1, "x")]),
            treatment_free: TermSet::with_terms(vec![Term::covariate(1, "x")]),
            ..Default::default()
        }],
    };
    assert!(regime(&fx, &ds, &spec).iter().all(|r| r == &[1.0]));
    let harmful = one_stage(60, |i| ((i * 31 + 7) % 5 < 2) as u8 as f64, |x, a| x - a * (2.0 + x));
    assert!(regime(&fx, &harmful, &spec).iter().all(|r| r == &[0.0]));
}

#[test]
fn regime_doses_stay_inside_the_declared_range() {
    let fx = Fixture::new();
    // Optimal dose 1 + x, partly outside [0.5, 1.5].
    let ds = one_stage(80, |i| ((i * 37) % 23) as f64 / 11.0, |x, a| x + a * (2.0 + 2.0 * x) - a * a);
    let range = DoseRange { lo: 0.5, hi: 1.5 };
    let spec = ModelSpec {
        scale: Scale::Linear,
        treatment_type: TreatmentType::Continuous,
        stages: vec![StageSpec {
            blip: TermSet::with_terms(vec![Term::covariate(1, "x")]),
            blip_quadratic: TermSet::intercept_only(),
            treatment_free: TermSet::with_terms(vec![Term::covariate(1, "x")]),
            dose_range: Some(range),
            ..Default::default()
        }],
    };
    let doses = regime(&fx, &ds, &spec);
    assert!(doses.iter().all(|r| r[0] >= range.lo && r[0] <= range.hi));
    assert!(doses.iter().any(|r| r[0] > range.lo && r[0] < range.hi));
}
