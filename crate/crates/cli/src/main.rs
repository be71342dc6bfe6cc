mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use config::{resolve, Cli, Command, ConfigFile};
use icpoint::ErrorKind;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(icpoint::Error),
}

impl From<icpoint::Error> for CliError {
    fn from(e: icpoint::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    let seed = match cli.seed {
        Some(s) => s,
        None => file.seed()?.unwrap_or(0),
    };
    let jobs = match cli.jobs {
        Some(j) => Some(j),
        None => file.jobs()?,
    };
    if let Some(j) = jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let name = cli.command.name();
    let data_dir = cli.data_dir.as_deref();
    match &cli.command {
        Command::Fit(a) => commands::fit(&resolve(a, &file, name, seed)?, data_dir),
        Command::Simulate(a) => commands::simulate(&resolve(a, &file, name, seed)?, data_dir),
        Command::Evaluate(a) => commands::evaluate(&resolve(a, &file, name, seed)?, data_dir),
        Command::ExportParams(a) => commands::export_params(&resolve(a, &file, name, seed)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
