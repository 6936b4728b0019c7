mod args;
mod commands;
mod config;
mod error;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use picat_core::manifest::{RunManifest, RunStatus};
use serde::Serialize;

use args::{Cli, Command};
use error::CliError;

/// Worker count from `PICAT_THREADS`, the only environment variable read.
fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PICAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PICAT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Runs `body`, then writes the manifest whatever the outcome.
fn execute<C: Serialize>(
    name: &str,
    resolved: Result<C, CliError>,
    fallback_out: Option<&Path>,
    out: impl Fn(&C) -> &Path,
    body: impl FnOnce(&C, &mut RunManifest) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let start = Instant::now();
    let config = match resolved {
        Ok(c) => c,
        Err(e) => {
            if let Some(dir) = fallback_out {
                let mut m = RunManifest::new(name, serde_json::Value::Null);
                m.status = RunStatus::Error;
                m.error = Some(e.to_string());
                let _ = m.write(dir.join("manifest.json"));
            }
            return Err(e);
        }
    };
    let mut m = RunManifest::new(name, serde_json::to_value(&config)?);
    let result = body(&config, &mut m);
    m.elapsed_secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(()) => {}
        Err(CliError::Check(e)) => {
            m.status = RunStatus::CheckFailed;
            m.error = Some(e.clone());
        }
        Err(e) => {
            m.status = RunStatus::Error;
            m.error = Some(e.to_string());
        }
    }
    let path = out(&config).join("manifest.json");
    if let Err(e) = m.write(&path) {
        eprintln!("picat: cannot write {}: {e}", path.display());
        if result.is_ok() {
            return Err(CliError::Runtime(e.to_string()));
        }
    }
    result
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    use config::*;
    match cmd {
        Command::Transform(a) => execute(
            "transform",
            TransformConfig::resolve(&a),
            a.common.out.as_deref(),
            |c| &c.out,
            commands::transform,
        ),
        Command::Train(a) => execute(
            "train",
            TrainRunConfig::resolve(&a),
            a.common.out.as_deref(),
            |c| &c.out,
            commands::train,
        ),
        Command::Enhance(a) => execute(
            "enhance",
            EnhanceConfig::resolve(&a),
            a.common.out.as_deref(),
            |c| &c.out,
            commands::enhance,
        ),
        Command::Eval(a) => execute("eval", EvalConfig::resolve(&a), a.common.out.as_deref(), |c| &c.out, commands::eval),
        Command::Perturb(a) => execute(
            "perturb",
            PerturbConfig::resolve(&a),
            a.common.out.as_deref(),
            |c| &c.out,
            commands::perturb_cmd,
        ),
        Command::Gradcheck(a) => execute(
            "gradcheck",
            GradcheckConfig::resolve(&a),
            a.common.out.as_deref(),
            |c| &c.out,
            commands::gradcheck,
        ),
        Command::Report(a) => execute(
            "report",
            ReportConfig::resolve(&a),
            a.common.out.as_deref(),
            |c| &c.out,
            commands::report,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|()| dispatch(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("picat: {e}");
            e.exit_code()
        }
    }
}
