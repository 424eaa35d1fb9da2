//! Command-line driver for `sdtp-core`: configuration, synthetic inputs,
//! subcommands and reports.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::Config;
pub use report::RunReport;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{0}")]
    Core(sdtp_core::Error),
    #[error("{0}")]
    Io(String),
}

impl From<sdtp_core::Error> for CliError {
    fn from(e: sdtp_core::Error) -> Self {
        match e {
            sdtp_core::Error::Config { field, reason } => CliError::Config {
                field: field.into(),
                reason,
            },
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}

pub const EXIT_OK: i32 = 0;
/// A check failed or a run could not complete.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    /// Only for `flops`.
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "sdtp",
    version,
    about = "Decoupled transformer pyramid toolkit"
)]
pub struct Cli {
    /// TOML configuration file; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `variant` from the config.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Writes the JSON report to this path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Adds wall time to the report, which then differs between runs.
    #[arg(long, global = true)]
    pub timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs the selected variant on a seeded synthetic pyramid.
    Forward,
    /// Compares analytic gradients with central finite differences.
    Gradcheck {
        /// Comma-separated subset of ops.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        /// Perturbs every analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_analytic: bool,
    },
    /// Attention cost per level for primitive, strided and decoupled MSA.
    Flops,
    /// Gradient descent on the identity-regression toy task.
    Train,
    /// Lists the pipeline variants.
    Variants,
}

impl Cli {
    /// Loads the config file and applies the command-line overrides.
    pub fn resolve_config(&self) -> Result<Config, CliError> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.clone();
        }
        if let Command::Gradcheck { ops, .. } = &self.command {
            if !ops.is_empty() {
                cfg.gradcheck.ops = ops.clone();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one invocation and returns the process exit code. Text output goes
/// to `stdout`, diagnostics to `stderr`.
pub fn run(cli: &Cli, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32 {
    match run_inner(cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn run_inner(
    cli: &Cli,
    stdout: &mut dyn std::io::Write,
    stderr: &mut dyn std::io::Write,
) -> Result<i32, CliError> {
    let cfg = cli.resolve_config()?;
    if cli.format == Format::Csv && !matches!(cli.command, Command::Flops) {
        return Err(CliError::Config {
            field: "--format".into(),
            reason: "csv is only available for `flops`".into(),
        });
    }
    let start = std::time::Instant::now();
    let outcome = match &cli.command {
        Command::Forward => commands::forward(&cfg)?,
        Command::Gradcheck {
            corrupt_analytic, ..
        } => commands::gradcheck(&cfg, *corrupt_analytic)?,
        Command::Flops => commands::flops(&cfg)?,
        Command::Train => commands::train(&cfg)?,
        Command::Variants => commands::variants(&cfg),
    };
    if let Some(m) = &outcome.message {
        let _ = writeln!(stderr, "{m}");
    }
    let mut report = outcome.report;
    if cli.timing {
        report.wall_time_s = Some(start.elapsed().as_secs_f64());
    }
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    let text = match cli.format {
        Format::Table => report::render_table(&report),
        Format::Json => report.to_json(),
        Format::Csv => report::flops_csv(report.flops.as_ref().expect("flops report")),
    };
    stdout.write_all(text.as_bytes()).map_err(io)?;
    if let Some(path) = &cli.out {
        std::fs::write(path, report.to_json())
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(if outcome.passed {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}
