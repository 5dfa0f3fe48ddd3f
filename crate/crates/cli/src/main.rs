mod args;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

/// Parses `argv` (config already merged) and runs the chosen command.
fn run(argv: Vec<String>) -> Result<()> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let usage_only = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            if usage_only {
                return Ok(());
            }
            return Err(UsageError.into());
        }
    };
    if let Some(n) = cli.threads {
        // a second call (replay) leaves the first pool in place
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let name = cli.command.name();
    let args = &argv[1..];
    let run = match &cli.command {
        Command::Kinship(a) => commands::kinship(a)?,
        Command::Fit(a) => commands::fit(a)?,
        Command::Herit(a) => commands::herit(a)?,
        Command::Predict(a) => commands::predict(a)?,
        Command::Cv(a) => commands::cv(a)?,
        Command::Reml(a) => commands::reml(a)?,
        Command::Priorsim(a) => commands::priorsim(a)?,
        Command::Simulate(a) => commands::simulate(a)?,
        Command::Replay(a) => return replay(&a.manifest),
    };
    let path = commands::write_manifest(name, args, &run)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn replay(path: &PathBuf) -> Result<()> {
    let recorded = manifest::read(path)?;
    if recorded.command == "replay" {
        bail!("a replay manifest cannot be replayed");
    }
    for (input, digest) in &recorded.inputs {
        let now = manifest::sha256_path(input.as_ref())?;
        if &now != digest {
            bail!("input {input} changed since the recorded run");
        }
    }
    let mut argv = vec![recorded.tool.clone()];
    argv.extend(recorded.args.iter().cloned());
    run(argv)?;
    let fresh = manifest::read(path)?;
    if fresh.outputs != recorded.outputs {
        let differing: Vec<&String> = recorded
            .outputs
            .iter()
            .filter(|(k, v)| fresh.outputs.get(*k) != Some(*v))
            .map(|(k, _)| k)
            .chain(fresh.outputs.keys().filter(|k| !recorded.outputs.contains_key(*k)))
            .collect();
        bail!("replayed outputs differ from the recorded run: {differing:?}");
    }
    eprintln!("replay reproduced {} output file(s) bit for bit", fresh.outputs.len());
    Ok(())
}

#[derive(Debug)]
struct UsageError;

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("invalid command line")
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<mvherit_core::Error>())
        .any(mvherit_core::Error::is_numerical);
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let raw: Vec<String> = std::env::args().collect();
    let argv = match config::config_path(&raw) {
        Some(path) => match config::merge(&raw, path.as_ref()) {
            Ok(a) => a,
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::from(EXIT_VALIDATION);
            }
        },
        None => raw,
    };
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => ExitCode::from(EXIT_VALIDATION),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
