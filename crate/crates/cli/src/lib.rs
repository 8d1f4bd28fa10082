//! The `oiqa` command line: argument handling, run directories, and dispatch.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure. stdout carries exactly one JSON line.

pub mod commands;
pub mod config;
pub mod plot;
pub mod rational;
pub mod rundir;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::Parser;
use orthoiqa::Error;
use serde_json::{json, Value};

use crate::config::{Cli, Command};
use crate::rundir::{load_provenance, RunDir};

pub const THREADS_ENV: &str = "OIQA_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) if e.is_numerical() => 3,
            CliError::Run(e) => match e.root() {
                Error::Config(_) | Error::Construction(_) => 1,
                _ => 2,
            },
        }
    }
}

/// Result of one invocation: the summary line and the run directory, if any.
pub struct Outcome {
    pub summary: Value,
    pub run_dir: PathBuf,
}

fn threads(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

/// Runs one resolved command into a fresh run directory.
pub fn execute(cmd: &Command, out: &Path) -> Result<Outcome, CliError> {
    let mut run = RunDir::create(out, cmd)?;
    let details = match cmd {
        Command::GenData(a) => commands::gen_data(&mut run, a),
        Command::Train(a) => commands::train_cmd(&mut run, a),
        Command::Certify(a) => commands::certify_cmd(&mut run, a),
        Command::Defend(a) => commands::defend_cmd(&mut run, a),
        Command::Attack(a) => commands::attack_cmd(&mut run, a),
        Command::Eval(a) => commands::eval_cmd(&mut run, a),
        Command::Report(a) => commands::report_cmd(&mut run, a),
    }?;
    let (run_dir, _) = run.commit()?;
    let mut summary = json!({ "status": "ok", "subcommand": cmd.name(), "run_dir": run_dir });
    if let (Value::Object(s), Value::Object(d)) = (&mut summary, details) {
        s.extend(d);
    }
    Ok(Outcome { summary, run_dir })
}

/// Re-runs a provenance record and compares every output hash.
pub fn replay(record_path: &Path, out: &Path) -> Result<Outcome, CliError> {
    let record = load_provenance(record_path)?;
    for (path, hash) in &record.inputs {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("recorded input {path} is unreadable: {e}")))?;
        if &orthoiqa::data::sha256_hex(&bytes) != hash {
            return Err(Error::Input(format!("recorded input {path} has changed since the run")).into());
        }
    }
    let mut outcome = execute(&record.config, out)?;
    let again = load_provenance(&outcome.run_dir.join(rundir::PROVENANCE_FILE))?;
    let differing: Vec<&String> = record
        .outputs
        .keys()
        .chain(again.outputs.keys())
        .filter(|k| record.outputs.get(*k) != again.outputs.get(*k))
        .collect();
    if !differing.is_empty() {
        return Err(Error::Input(format!("replay outputs differ: {differing:?} (new run at {})", outcome.run_dir.display())).into());
    }
    if let Value::Object(s) = &mut outcome.summary {
        s.insert("replay_of".into(), json!(record_path));
        s.insert("identical".into(), json!(true));
    }
    Ok(outcome)
}

fn load_config(path: &Path) -> Result<Command, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn dispatch(cli: Cli) -> Result<Outcome, CliError> {
    let n = threads(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?;
    pool.install(|| match (cli.command, cli.config, cli.replay) {
        (Some(cmd), None, None) => execute(&cmd, &cli.out),
        (None, Some(path), None) => execute(&load_config(&path)?, &cli.out),
        (None, None, Some(path)) => replay(&path, &cli.out),
        (None, None, None) => Err(CliError::Usage("expected a subcommand, --config, or --replay".into())),
        _ => Err(CliError::Usage("give exactly one of a subcommand, --config, or --replay".into())),
    })
}

/// Parses `args`, runs, prints the summary line, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{}", e.render());
            println!("{}", json!({ "status": "error", "code": 1, "error": e.kind().to_string() }));
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(o) => {
            println!("{}", o.summary);
            0
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            println!("{}", json!({ "status": "error", "code": code, "error": e.to_string() }));
            code
        }
    }
}
