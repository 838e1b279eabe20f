//! Command-line front end of `fbsde-core`.
//!
//! Every subcommand reads a [`RunConfig`] (from `--config` and flag
//! overrides), writes its results under the output directory and maps the
//! outcome to an exit code: 0 ok, 1 check failure, 2 configuration or input
//! error, 3 numerical failure.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{Pipeline, Status};
pub use config::RunConfig;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "FBSDE_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "fbsde-out";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fbsde_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fbsde",
    version,
    about = "Value functions of controlled coupled FBSDEs"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML, or JSON by `.json` extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in problem; replaces any problem in the configuration.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(config::PRESETS))]
    pub preset: Option<String>,
    #[arg(long = "l-sigma", global = true)]
    pub l_sigma: Option<f64>,
    /// Horizon.
    #[arg(short = 'T', long = "horizon", global = true)]
    pub horizon: Option<f64>,
    #[arg(long, global = true)]
    pub dx: Option<f64>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Shrink the time step to the admissible contraction step.
    #[arg(long = "auto-delta", global = true)]
    pub auto_delta: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long = "output-dir", global = true)]
    pub output_dir: Option<PathBuf>,
    /// Also write wide x-versus-W tables per pipeline.
    #[arg(long = "emit-plot-data", global = true)]
    pub emit_plot_data: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the structural assumptions at the declared constants.
    Validate,
    /// Compute value fields with one or both pipelines.
    Solve {
        #[arg(long, value_enum, default_value = "dpp")]
        pipeline: Pipeline,
    },
    /// Run the verification checks.
    Verify {
        /// Comma-separated subset of: assumptions, comparison, regularity, flow, cross_validation.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        checks: Option<Vec<String>>,
    },
    /// Compare the dynamic-programming and HJB pipelines.
    CrossCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Solve { .. } => "solve",
            Command::Verify { .. } => "verify",
            Command::CrossCheck => "cross-check",
        }
    }
}

/// Configuration after applying flag overrides on top of `--config`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let a = &cli.common;
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &a.preset {
        cfg.problem = config::ProblemConfig {
            preset: Some(name.clone()),
            ..Default::default()
        };
    }
    if let Some(l) = a.l_sigma {
        cfg.problem.l_sigma = Some(l);
    }
    if let Some(t) = a.horizon {
        cfg.horizon = t;
    }
    if let Some(dx) = a.dx {
        cfg.dx = dx;
    }
    if let Some(d) = a.delta {
        cfg.delta = d;
    }
    cfg.auto_delta |= a.auto_delta;
    cfg.emit_plot_data |= a.emit_plot_data;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(dir) = &a.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    if let Command::Verify { checks: Some(list) } = &cli.command {
        cfg.checks = list
            .iter()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| {
            std::env::var_os(OUTPUT_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn execute(cli: &Cli) -> Result<Status, CliError> {
    let cfg = resolve_config(cli)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(fbsde_core::Error::Config("--threads must be at least 1".into()).into());
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let problem = cfg.build_problem()?;
    let out = output::OutputDir::create(output_dir(&cfg), cli.command.name(), &cfg)?;
    let mut ctx = commands::Context {
        config: cfg,
        problem,
        out,
    };
    match &cli.command {
        Command::Validate => commands::validate(&mut ctx),
        Command::Solve { pipeline } => commands::solve(&mut ctx, *pipeline),
        Command::Verify { .. } => commands::verify(&mut ctx),
        Command::CrossCheck => commands::cross_check(&mut ctx),
    }
}

/// Parses `args` and runs the selected command; returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(Status::Ok) => 0,
        Ok(Status::CheckFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("fbsde").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let cli = parse(&[
            "solve",
            "--preset",
            "example_5_2",
            "--l-sigma",
            "0.1",
            "-T",
            "0.5",
            "--pipeline",
            "both",
        ]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.problem.preset.as_deref(), Some("example_5_2"));
        assert_eq!(cfg.problem.l_sigma, Some(0.1));
        assert_eq!(cfg.horizon, 0.5);
        assert!(matches!(
            cli.command,
            Command::Solve {
                pipeline: Pipeline::Both
            }
        ));
    }

    #[test]
    fn empty_check_list() {
        let cli = parse(&["verify", "--preset", "zero", "--checks", ""]);
        assert!(resolve_config(&cli).unwrap().checks.is_empty());
        let cli = parse(&["verify", "--preset", "zero", "--checks", "flow,comparison"]);
        assert_eq!(resolve_config(&cli).unwrap().checks, ["flow", "comparison"]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(
            CliError::from(fbsde_core::Error::Config("x".into())).exit_code(),
            2
        );
        assert_eq!(
            CliError::from(fbsde_core::Error::StepTooLarge {
                delta: 1.0,
                delta0: 0.5
            })
            .exit_code(),
            2
        );
        assert_eq!(
            CliError::from(fbsde_core::Error::BlowUp { slice: 0, node: 0 }).exit_code(),
            3
        );
    }
}
