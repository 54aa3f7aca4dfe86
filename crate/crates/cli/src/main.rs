use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gestdtr_cli::config::load_spec;
use gestdtr_cli::{commands, CliError, Command, Format, RunConfig};
use gestdtr_core::simulation::{Preset, Stage2Policy};

/// G-estimation of optimal dynamic treatment regimes.
#[derive(Debug, Parser)]
#[command(name = "gestdtr", version)]
struct Args {
    /// Command to run; taken from the config file when omitted.
    #[arg(value_enum)]
    command: Option<Command>,

    /// TOML run configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Wide-format CSV dataset.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Model spec file (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Replications per simulation setup.
    #[arg(long, global = true)]
    reps: Option<usize>,

    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, value_enum, global = true)]
    format: Option<Format>,

    /// Named simulation study: table1, table2, table3, supp-s1 .. supp-s9, trace.
    #[arg(long, global = true, value_parser = parse_preset)]
    scenario: Option<Preset>,

    /// Stage-2 model used while selecting at stage 1 in simulations.
    #[arg(long, global = true, value_parser = parse_policy)]
    stage2_policy: Option<Stage2Policy>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: gestdtr_core::GestError| e.to_string())
}

fn parse_policy(s: &str) -> Result<Stage2Policy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("unknown stage-2 policy `{s}` (correct, recommended, intercept)"))
}

fn configure(args: Args) -> Result<(Command, RunConfig), CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.spec {
        cfg.spec = Some(load_spec(p)?);
    }
    cfg.dataset = args.data.or(cfg.dataset);
    cfg.seed = args.seed.or(cfg.seed);
    cfg.reps = args.reps.or(cfg.reps);
    cfg.preset = args.scenario.or(cfg.preset);
    cfg.stage2_policy = args.stage2_policy.or(cfg.stage2_policy);
    cfg.output.path = args.out.or(cfg.output.path);
    if let Some(f) = args.format {
        cfg.output.format = f;
    }
    let cmd = args
        .command
        .or(cfg.command)
        .ok_or_else(|| CliError::Config("no command given (simulate, fit, select or regime)".into()))?;
    Ok((cmd, cfg))
}

fn execute(args: Args) -> Result<(), CliError> {
    let (cmd, cfg) = configure(args)?;
    let text = commands::run(cmd, &cfg)?;
    match &cfg.output.path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
