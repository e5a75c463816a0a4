use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ess, split_rhat, FitStatistics, Result};

/// Serializes non-finite floats as `null` and reads `null` back as NaN.
pub(crate) mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub unconstrained_name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    /// Split-R-hat of the unconstrained draws; `null` when undefined.
    #[serde(with = "nullable")]
    pub rhat: f64,
    /// ESS of the unconstrained draws; `null` when undefined.
    #[serde(with = "nullable")]
    pub ess: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl ParameterSummary {
    /// Location summaries use the constrained draws; convergence
    /// statistics use the unconstrained draws.
    pub fn compute(
        name: &str,
        unconstrained_name: &str,
        constrained: &[&[f64]],
        unconstrained: &[&[f64]],
    ) -> Result<Self> {
        let rhat = split_rhat(unconstrained)?;
        let ess = ess(unconstrained)?;
        let mut all: Vec<f64> = constrained.iter().flat_map(|c| c.iter().copied()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        all.sort_by(f64::total_cmp);
        Ok(Self {
            name: name.to_string(),
            unconstrained_name: unconstrained_name.to_string(),
            mean,
            sd,
            q025: quantile(&all, 0.025),
            median: quantile(&all, 0.5),
            q975: quantile(&all, 0.975),
            rhat,
            ess,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub name: String,
    #[serde(with = "nullable")]
    pub rhat: f64,
    #[serde(with = "nullable")]
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub passed: bool,
    pub rhat_max: f64,
    pub ess_min: f64,
    /// Failing parameters, worst first.
    pub offenders: Vec<Offender>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n_chains: usize,
    pub draws_per_chain: usize,
    pub divergences: usize,
    pub parameters: Vec<ParameterSummary>,
    pub fit: Option<FitStatistics>,
    pub overdispersion: Option<f64>,
    pub overdispersion_df: Option<usize>,
    pub gate: Option<GateOutcome>,
}

impl DiagnosticsReport {
    pub fn new(n_chains: usize, draws_per_chain: usize, divergences: usize, parameters: Vec<ParameterSummary>) -> Self {
        Self {
            n_chains,
            draws_per_chain,
            divergences,
            parameters,
            fit: None,
            overdispersion: None,
            overdispersion_df: None,
            gate: None,
        }
    }

    pub fn max_rhat(&self) -> f64 {
        self.parameters
            .iter()
            .map(|p| if p.rhat.is_nan() { f64::INFINITY } else { p.rhat })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.parameters
            .iter()
            .map(|p| if p.ess.is_nan() { 0.0 } else { p.ess })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text summary; lists every parameter after the headline figures.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "chains: {}  draws/chain: {}  divergences: {}",
            self.n_chains, self.draws_per_chain, self.divergences
        );
        let _ = writeln!(
            out,
            "max rhat: {}  min ess: {}",
            fmt(self.max_rhat()),
            fmt(self.min_ess())
        );
        if let Some(f) = &self.fit {
            let _ = writeln!(out, "R2 (Pearson): {}", fmt(f.r2_pp));
            let _ = writeln!(
                out,
                "mean log-likelihood: {:.6} (without log y!: {:.6})",
                f.mean_log_likelihood, f.mean_log_likelihood_kernel
            );
            let _ = writeln!(out, "mean absolute error: {:.6}", f.mean_absolute_error);
            let _ = writeln!(out, "2-sigma coverage: {:.6}", f.coverage_2sigma);
        }
        if let (Some(o), Some(df)) = (self.overdispersion, self.overdispersion_df) {
            let _ = writeln!(out, "overdispersion: {o:.6} (df {df})");
        }
        if let Some(g) = &self.gate {
            let verdict = if g.passed { "passed" } else { "FAILED" };
            let _ = writeln!(
                out,
                "convergence gate (rhat < {}, ess > {}): {verdict}",
                g.rhat_max, g.ess_min
            );
            for o in g.offenders.iter().take(10) {
                let _ = writeln!(out, "  {}  rhat {}  ess {}", o.name, fmt(o.rhat), fmt(o.ess));
            }
        }
        let _ = writeln!(out);
        let w = self.parameters.iter().map(|p| p.name.len()).max().unwrap_or(4).max(9);
        let _ = writeln!(
            out,
            "{:<w$} {:>12} {:>12} {:>12} {:>12} {:>12} {:>8} {:>10}",
            "parameter", "mean", "sd", "2.5%", "50%", "97.5%", "rhat", "ess"
        );
        for p in &self.parameters {
            let _ = writeln!(
                out,
                "{:<w$} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>8} {:>10}",
                p.name,
                p.mean,
                p.sd,
                p.q025,
                p.median,
                p.q975,
                fmt_prec(p.rhat, 4),
                fmt_prec(p.ess, 1)
            );
        }
        out
    }
}

fn fmt(v: f64) -> String {
    fmt_prec(v, 4)
}

fn fmt_prec(v: f64, prec: usize) -> String {
    if v.is_finite() {
        format!("{v:.prec$}")
    } else if v.is_nan() {
        "undef".into()
    } else {
        "inf".into()
    }
}

/// Fails iff some parameter has R-hat at or above `rhat_max`, ESS at or
/// below `ess_min`, or an undefined statistic.
pub fn convergence_gate(report: &DiagnosticsReport, rhat_max: f64, ess_min: f64) -> GateOutcome {
    let mut bad: Vec<(f64, &ParameterSummary)> = report
        .parameters
        .iter()
        .filter(|p| !(p.rhat < rhat_max) || !(p.ess > ess_min))
        .map(|p| {
            let r = if p.rhat.is_nan() {
                f64::INFINITY
            } else {
                p.rhat / rhat_max
            };
            let e = if p.ess > 0.0 { ess_min / p.ess } else { f64::INFINITY };
            (r.max(e), p)
        })
        .collect();
    bad.sort_by(|a, b| b.0.total_cmp(&a.0));
    GateOutcome {
        passed: bad.is_empty(),
        rhat_max,
        ess_min,
        offenders: bad
            .into_iter()
            .map(|(_, p)| Offender {
                name: p.name.clone(),
                rhat: p.rhat,
                ess: p.ess,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub bin: usize,
    pub n: usize,
    pub mean_predicted: f64,
    pub mean_observed: f64,
}

/// Records sorted by predicted rate and grouped into equal-count bins.
pub fn calibration_table(y: &[u32], lambda: &[f64], n_bins: usize) -> Vec<CalibrationRow> {
    let n = y.len().min(lambda.len());
    if n == 0 || n_bins == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lambda[a].total_cmp(&lambda[b]).then(a.cmp(&b)));
    let bins = n_bins.min(n);
    (0..bins)
        .map(|b| {
            let idx = &order[b * n / bins..(b + 1) * n / bins];
            let k = idx.len() as f64;
            CalibrationRow {
                bin: b,
                n: idx.len(),
                mean_predicted: idx.iter().map(|&i| lambda[i]).sum::<f64>() / k,
                mean_observed: idx.iter().map(|&i| y[i] as f64).sum::<f64>() / k,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub record: usize,
    pub observed: u32,
    pub predicted: f64,
    pub pearson: f64,
}

pub fn residual_table(y: &[u32], lambda: &[f64]) -> Vec<ResidualRow> {
    y.iter()
        .zip(lambda)
        .enumerate()
        .map(|(i, (&o, &l))| ResidualRow {
            record: i,
            observed: o,
            predicted: l,
            pearson: (o as f64 - l) / l.sqrt(),
        })
        .collect()
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}
