use std::io::Write;
use std::path::Path;

use latentci::parallel_analysis::{parallel_analysis, ParallelAnalysis};
use latentci::pipeline::PipelineOptions;

use crate::error::{CliError, CliResult};
use crate::table::Table;

pub fn cmd_select_k(data: &Path, draws: usize, quantile: f64, seed: u64, stdout: &mut dyn Write) -> CliResult<ParallelAnalysis> {
    if draws == 0 {
        return Err(CliError::Input("--draws must be positive".into()));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(CliError::Input(format!("--quantile must lie in (0, 1), got {quantile}")));
    }
    let table = Table::read(data)?;
    // same seed derivation as the inference pipeline
    let opts = PipelineOptions {
        seed,
        pa_draws: draws,
        pa_quantile: quantile,
        ..Default::default()
    }
    .parallel_analysis();
    let pa = parallel_analysis(&table.values, &opts).map_err(|e| CliError::Input(e.to_string()))?;
    writeln!(stdout, "selected_k={}", pa.k)?;
    writeln!(stdout, "rank,observed,null_quantile")?;
    for (r, (obs, null)) in pa.observed.iter().zip(&pa.null_quantiles).enumerate() {
        writeln!(stdout, "{},{obs},{null}", r + 1)?;
    }
    Ok(pa)
}
