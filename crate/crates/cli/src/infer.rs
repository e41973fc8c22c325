use std::io::Write;
use std::path::{Path, PathBuf};

use latentci::pipeline::{estimate_confounder_step, infer_with_confounders, PipelineHooks, PipelineOptions};
use latentci::{FactorCount, GlmFamily};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::table::Table;

/// One tested exposure. Numeric fields are empty when inference failed for
/// that column; `error` then says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReportRow {
    pub column_name: String,
    pub theta_tilde: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_value: Option<f64>,
    /// The z-statistic `θ̃ / se`.
    pub effect_size: Option<f64>,
    pub significant_bonferroni: bool,
    pub adjusted_p_value: Option<f64>,
    pub k_used: usize,
    pub error: Option<String>,
}

pub struct InferArgs<'a> {
    pub data: &'a Path,
    pub response: &'a str,
    pub exposures: &'a str,
    pub family: GlmFamily,
    pub k: FactorCount,
    pub alpha: f64,
    pub seed: u64,
    pub out: &'a Path,
}

/// `p < α / m`, and the adjusted p-value `min(1, m p)`.
pub fn bonferroni(p_value: f64, alpha: f64, m: usize) -> (bool, f64) {
    (p_value < alpha / m as f64, (m as f64 * p_value).min(1.0))
}

pub fn json_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

/// Exposure positions among the covariates, in the order requested.
fn resolve_exposures(selection: &str, covariates: &[String]) -> CliResult<Vec<usize>> {
    if selection.trim() == "all" {
        return Ok((0..covariates.len()).collect());
    }
    let mut picked = Vec::new();
    for name in selection.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let idx = covariates
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::Input(format!("exposure column '{name}' not found among covariates")))?;
        if picked.contains(&idx) {
            return Err(CliError::Input(format!("exposure column '{name}' listed twice")));
        }
        picked.push(idx);
    }
    if picked.is_empty() {
        return Err(CliError::Input("no exposure columns given".into()));
    }
    Ok(picked)
}

pub fn cmd_infer(args: &InferArgs, stdout: &mut dyn Write) -> CliResult<Vec<InferenceReportRow>> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Input(format!("alpha must lie in (0, 1), got {}", args.alpha)));
    }
    if args.out.extension().is_some_and(|e| e == "json") {
        return Err(CliError::Input("--out names the CSV report; the JSON copy is written next to it".into()));
    }
    let table = Table::read(args.data)?;
    let response_idx = table.column_index(args.response)?;
    let y = table.column(response_idx);
    args.family
        .check_response(y.as_slice())
        .map_err(|e| CliError::Input(format!("column '{}': {e}", args.response)))?;
    let (covariates, x) = table.without(response_idx);
    if covariates.is_empty() {
        return Err(CliError::Input("no covariate columns besides the response".into()));
    }
    let exposures = resolve_exposures(args.exposures, &covariates)?;
    if let FactorCount::Fixed(k) = args.k {
        if k >= covariates.len() {
            return Err(CliError::Input(format!("k = {k} must be below the {} covariates", covariates.len())));
        }
    }

    let opts = PipelineOptions {
        alpha: args.alpha,
        seed: args.seed,
        k: args.k,
        ..Default::default()
    };
    let step = estimate_confounder_step(&x, &opts, &PipelineHooks::default())
        .map_err(|e| CliError::InvalidRun(format!("confounder estimation failed: {e}")))?;
    let m = exposures.len();
    let rows: Vec<InferenceReportRow> = exposures
        .par_iter()
        .map(|&j| {
            let name = covariates[j].clone();
            match infer_with_confounders(args.family, &y, &x, j, &step.uhat, &opts) {
                Ok(out) => {
                    let r = out.inference;
                    let (significant, adjusted) = bonferroni(r.p_value, args.alpha, m);
                    InferenceReportRow {
                        column_name: name,
                        theta_tilde: Some(r.theta_tilde),
                        ci_low: Some(r.ci_low),
                        ci_high: Some(r.ci_high),
                        p_value: Some(r.p_value),
                        effect_size: Some(r.z),
                        significant_bonferroni: significant,
                        adjusted_p_value: Some(adjusted),
                        k_used: out.k_used,
                        error: None,
                    }
                }
                Err(e) => InferenceReportRow {
                    column_name: name,
                    theta_tilde: None,
                    ci_low: None,
                    ci_high: None,
                    p_value: None,
                    effect_size: None,
                    significant_bonferroni: false,
                    adjusted_p_value: None,
                    k_used: step.k,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut writer = csv::Writer::from_path(args.out).map_err(|e| CliError::Io(e.into()))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| CliError::Io(e.into()))?;
    }
    writer.flush()?;
    let mut json = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Io(e.into()))?;
    json.push('\n');
    std::fs::write(json_path(args.out), json)?;

    let failed: Vec<&InferenceReportRow> = rows.iter().filter(|r| r.error.is_some()).collect();
    for row in &failed {
        log::warn!("exposure '{}' failed: {}", row.column_name, row.error.as_deref().unwrap_or(""));
    }
    let significant = rows.iter().filter(|r| r.significant_bonferroni).count();
    writeln!(stdout, "k_used={} tested={m} significant={significant} failed={}", step.k, failed.len())?;
    if failed.len() == m {
        return Err(CliError::InvalidRun("inference failed for every exposure".into()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bonferroni_threshold_arithmetic() {
        assert_eq!(bonferroni(0.01, 0.05, 2), (true, 0.02));
        assert_eq!(bonferroni(0.4, 0.05, 2), (false, 0.8));
        assert!(bonferroni(5.18e-9, 0.05, 798).0);
        assert_eq!(bonferroni(0.9, 0.05, 3).1, 1.0);
    }

    #[test]
    fn exposure_resolution() {
        let cov: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(resolve_exposures("all", &cov).unwrap(), vec![0, 1, 2]);
        assert_eq!(resolve_exposures("c, a", &cov).unwrap(), vec![2, 0]);
        assert!(resolve_exposures("a,a", &cov).is_err());
        assert!(resolve_exposures("z", &cov).is_err());
        assert!(resolve_exposures(" , ", &cov).is_err());
    }

    #[test]
    fn json_sits_next_to_csv() {
        assert_eq!(json_path(Path::new("out/report.csv")), PathBuf::from("out/report.json"));
        assert_eq!(json_path(Path::new("report")), PathBuf::from("report.json"));
    }
}
