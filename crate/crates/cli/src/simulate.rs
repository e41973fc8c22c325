use std::fs;
use std::io::Write;
use std::path::Path;

use latentci::simulation::{run_replications, SimConfig};

use crate::error::{CliError, CliResult};

pub const SUMMARY_FILE: &str = "summary.json";
pub const RECORDS_FILE: &str = "records.csv";

/// 1-based line holding the `"field":` key, or 1 when the key is absent.
fn key_line(text: &str, field: &str) -> usize {
    let key = format!("\"{field}\"");
    text.lines()
        .position(|line| {
            line.find(&key)
                .is_some_and(|at| line[at + key.len()..].trim_start().starts_with(':'))
        })
        .map_or(1, |i| i + 1)
}

pub fn parse_config(path: &Path, text: &str) -> CliResult<SimConfig> {
    let config: SimConfig = serde_json::from_str(text).map_err(|e| {
        CliError::Input(format!("{}:{}:{}: malformed config: {e}", path.display(), e.line(), e.column()))
    })?;
    config.check().map_err(|problem| {
        CliError::Input(format!(
            "{}:{}: invalid {}: {}",
            path.display(),
            key_line(text, problem.field),
            problem.field,
            problem.message
        ))
    })?;
    Ok(config)
}

pub fn cmd_simulate(config_path: &Path, out_dir: &Path, stdout: &mut dyn Write) -> CliResult<()> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Input(format!("{}: cannot read: {e}", config_path.display())))?;
    let config = parse_config(config_path, &text)?;
    let summary = run_replications(&config).map_err(|e| CliError::InvalidRun(e.to_string()))?;

    fs::create_dir_all(out_dir)?;
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.into()))?;
    json.push('\n');
    fs::write(out_dir.join(SUMMARY_FILE), json)?;
    let mut records = csv::Writer::from_path(out_dir.join(RECORDS_FILE)).map_err(|e| CliError::Io(e.into()))?;
    for record in &summary.records {
        records.serialize(record).map_err(|e| CliError::Io(e.into()))?;
    }
    records.flush()?;

    for m in &summary.methods {
        let coverage = m.coverage.map_or("n/a".to_string(), |c| format!("{c:.3}"));
        writeln!(stdout, "{}: coverage {coverage} ({}/{} covered, {} failed)", m.method, m.covered, m.successful, m.failed)?;
    }
    if !summary.valid {
        return Err(CliError::InvalidRun(format!(
            "{} of {} replication runs failed, above the allowed share; outputs written but the run is invalid",
            summary.failures.len(),
            config.replications * config.methods.len()
        )));
    }
    Ok(())
}
