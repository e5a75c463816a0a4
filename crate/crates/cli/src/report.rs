//! Diagnostics computed from persisted draws. Fit and diagnose both go
//! through [`build_report`], so their reports agree byte for byte.

use std::path::Path;

use anyhow::{Context, Result};
use claimfreq::diagnostics::{
    calibration_table, convergence_gate, fit_statistics, overdispersion_statistic, residual_table, write_csv,
    DiagnosticsReport, ParameterSummary,
};
use claimfreq::posterior::{to_unconstrained, ModelInputs, ParameterBlock};

use crate::artifacts::ChainTable;
use crate::config::DiagnosticsConfig;

pub const REPORT_JSON: &str = "diagnostics.json";
pub const REPORT_TEXT: &str = "diagnostics.txt";
pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const RESIDUALS_CSV: &str = "residuals.csv";

pub struct Assessment {
    pub report: DiagnosticsReport,
    /// Posterior-mean rate per record.
    pub lambda: Vec<f64>,
}

/// Summaries, fit statistics and the convergence gate for a set of chains.
pub fn build_report(
    inputs: &ModelInputs<f64>,
    chains: &[ChainTable],
    settings: &DiagnosticsConfig,
) -> Result<Assessment> {
    let layout = inputs.layout();
    let names = layout.names();
    let unc_names = layout.unconstrained_names();
    let d = names.len();
    let n_records = inputs.n_records();

    let mut lambda = vec![0.0; n_records];
    let mut unconstrained: Vec<Vec<Vec<f64>>> = Vec::with_capacity(chains.len());
    let mut n_draws = 0usize;
    for chain in chains {
        let mut cols = vec![Vec::with_capacity(chain.len()); d];
        for row in &chain.rows {
            let block = ParameterBlock::from_flat(layout, row)?;
            let x = to_unconstrained(layout, &block)?;
            for (col, v) in cols.iter_mut().zip(x) {
                col.push(v);
            }
            let rates = inputs.predict_rates(&block)?;
            for (l, r) in lambda.iter_mut().zip(rates) {
                *l += r;
            }
            n_draws += 1;
        }
        unconstrained.push(cols);
    }
    let inv = 1.0 / n_draws.max(1) as f64;
    lambda.iter_mut().for_each(|l| *l *= inv);

    let mut params = Vec::with_capacity(d);
    for j in 0..d {
        let constrained: Vec<Vec<f64>> = chains.iter().map(|c| c.rows.iter().map(|r| r[j]).collect()).collect();
        let con: Vec<&[f64]> = constrained.iter().map(Vec::as_slice).collect();
        let unc: Vec<&[f64]> = unconstrained.iter().map(|c| c[j].as_slice()).collect();
        params.push(ParameterSummary::compute(&names[j], &unc_names[j], &con, &unc)?);
    }
    let per_chain = chains.iter().map(ChainTable::len).min().unwrap_or(0);
    let divergences = chains.iter().map(ChainTable::divergences).sum();
    let mut report = DiagnosticsReport::new(chains.len(), per_chain, divergences, params);

    let y = inputs.claims();
    report.fit = Some(fit_statistics(y, &lambda)?);
    if n_records > d {
        report.overdispersion = Some(overdispersion_statistic(y, &lambda, d)?);
        report.overdispersion_df = Some(n_records - d);
    }
    report.gate = Some(convergence_gate(&report, settings.rhat_max, settings.ess_min));
    Ok(Assessment { report, lambda })
}

/// Writes the JSON and text reports plus calibration and residual tables.
pub fn write_reports(dir: &Path, a: &Assessment, y: &[u32], bins: usize) -> Result<()> {
    let path = dir.join(REPORT_JSON);
    std::fs::write(&path, a.report.to_json()).with_context(|| format!("cannot write {}", path.display()))?;
    let path = dir.join(REPORT_TEXT);
    std::fs::write(&path, a.report.to_table()).with_context(|| format!("cannot write {}", path.display()))?;
    let path = dir.join(CALIBRATION_CSV);
    write_csv(&path, &calibration_table(y, &a.lambda, bins))
        .with_context(|| format!("cannot write {}", path.display()))?;
    let path = dir.join(RESIDUALS_CSV);
    write_csv(&path, &residual_table(y, &a.lambda)).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
