//! `mavlkit` command-line front end.
//!
//! Every command prints a JSON report (command, version, seed, config,
//! result) followed by a plain table. Exit codes: 0 success, 1 invalid
//! input or usage, 2 internal failure (including a failing self-check).

mod args;
mod commands;
mod report;

use std::io::Write;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, Format};

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Core(mavlkit::Error),
}

impl From<mavlkit::Error> for CliError {
    fn from(e: mavlkit::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Eval(_) => "eval",
        Command::Combine(_) => "combine",
        Command::Infer(_) => "infer",
        Command::Pseudolabel(_) => "pseudolabel",
        Command::Mask2box(_) => "mask2box",
        Command::GenSynth(_) => "gen-synth",
        Command::Ablate(_) => "ablate",
        Command::TrainToy(_) => "train-toy",
        Command::Gradcheck(_) => "gradcheck",
        Command::Oracle(_) => "oracle",
    }
}

fn execute(cli: &Cli) -> Result<bool, CliError> {
    if cli.threads == 0 {
        return Err(CliError::Invalid("--threads must be at least 1".into()));
    }
    if let Some(p) = &cli.report {
        if p.is_dir() || p.parent().is_some_and(|d| !d.as_os_str().is_empty() && !d.is_dir()) {
            return Err(CliError::Invalid(format!("cannot write report file {}", p.display())));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Core(mavlkit::Error::Config(e.to_string())))?;
    let outcome = commands::run(&cli.command, cli.seed, &pool)?;
    let doc = report::document(command_name(&cli.command), cli.seed, &outcome);
    if let Some(p) = &cli.report {
        std::fs::write(p, &doc).map_err(|e| CliError::Core(e.into()))?;
    }
    let mut out = std::io::stdout().lock();
    let text = match cli.format {
        Format::Json => doc,
        Format::Table => outcome.table.render(),
        Format::Both => format!("{doc}\n{}", outcome.table.render()),
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::Core(e.into()))?;
    Ok(!outcome.failed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: self-check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
