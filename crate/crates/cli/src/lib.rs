//! Command-line front end: Monte-Carlo coverage runs, per-exposure
//! inference on CSV data, and factor-count selection.

pub mod error;
pub mod infer;
pub mod select_k;
pub mod simulate;
pub mod table;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use latentci::{FactorCount, GlmFamily};

use crate::error::CliError;
use crate::infer::InferArgs;

#[derive(Debug, Parser)]
#[command(name = "latentci", version, about = "Debiased single-coefficient inference under hidden confounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a coverage simulation from a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Directory for summary.json and records.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Test each exposure column of a CSV file.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        response: String,
        /// Comma-separated column names, or `all`.
        #[arg(long, default_value = "all")]
        exposures: String,
        #[arg(long)]
        family: GlmFamily,
        /// `auto` or a fixed number of factors.
        #[arg(long, default_value = "auto")]
        k: FactorCount,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV report; a JSON copy goes to the same path with a .json extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose the number of factors by parallel analysis.
    SelectK {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, default_value_t = 0.95)]
        quantile: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_logging() {
    // built by hand so no environment variable is consulted
    let _ = env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .format_timestamp(None)
        .try_init();
}

pub fn execute(command: &Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, out } => simulate::cmd_simulate(config, out, stdout),
        Command::Infer {
            data,
            response,
            exposures,
            family,
            k,
            alpha,
            seed,
            out,
        } => {
            let args = InferArgs {
                data,
                response,
                exposures,
                family: *family,
                k: *k,
                alpha: *alpha,
                seed: *seed,
                out,
            };
            infer::cmd_infer(&args, stdout).map(|_| ())
        }
        Command::SelectK {
            data,
            draws,
            quantile,
            seed,
        } => select_k::cmd_select_k(data, *draws, *quantile, *seed, stdout).map(|_| ()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 2 input error, 3 invalid run.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    match execute(&cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
