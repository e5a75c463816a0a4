//! Convergence diagnostics and goodness-of-fit statistics.

mod report;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use statrs::function::factorial::ln_factorial;
use thiserror::Error;

pub use report::{
    calibration_table, convergence_gate, residual_table, write_csv, CalibrationRow, DiagnosticsReport, GateOutcome,
    Offender, ParameterSummary, ResidualRow,
};

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least one chain")]
    NoChains,
    #[error("need at least 4 draws per chain, got {0}")]
    TooFewDraws(usize),
    #[error("chains have unequal lengths")]
    RaggedChains,
    #[error("length mismatch: {0} counts vs {1} rates")]
    Length(usize, usize),
    #[error("rates must be positive and finite")]
    BadRate,
    #[error("need more records ({n}) than parameters ({d})")]
    DegreesOfFreedom { n: usize, d: usize },
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

fn check_chains(chains: &[&[f64]]) -> Result<usize> {
    let first = chains.first().ok_or(DiagnosticsError::NoChains)?;
    let n = first.len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticsError::RaggedChains);
    }
    if n < 4 {
        return Err(DiagnosticsError::TooFewDraws(n));
    }
    Ok(n)
}

/// Halves of every chain; the middle draw of an odd-length chain is dropped.
fn split<'a>(chains: &[&'a [f64]]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        out.push(&c[..h]);
        out.push(&c[c.len() - h..]);
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split-chain potential scale reduction. Returns `+inf` when the
/// within-chain variance vanishes.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64> {
    check_chains(chains)?;
    let halves = split(chains);
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let w = mean(&halves.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let b = n * sample_variance(&means);
    if !(w > 0.0) || !w.is_finite() {
        return Ok(f64::INFINITY);
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

/// Biased autocovariance `(1/n) sum_t (x_t - m)(x_{t+k} - m)` for all lags.
pub fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let size = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd: Arc<dyn rustfft::Fft<f64>> = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fwd.process(&mut buf);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    buf[..n].iter().map(|c| c.re / (size as f64 * n as f64)).collect()
}

/// Effective sample size over split chains with Geyer's initial positive
/// and monotone sequence truncation. Returns NaN for constant draws.
pub fn ess(chains: &[&[f64]]) -> Result<f64> {
    check_chains(chains)?;
    let halves = split(chains);
    let m = halves.len();
    let n = halves[0].len();
    let acov: Vec<Vec<f64>> = halves.iter().map(|c| autocovariance(c)).collect();
    let nf = n as f64;
    let chain_mean: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let chain_var: Vec<f64> = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).collect();
    let mean_var = mean(&chain_var);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_variance(&chain_mean);
    }
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return Ok(f64::NAN);
    }
    let lag_mean = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - lag_mean(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 1;
    while t + 3 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - lag_mean(t + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - lag_mean(t + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    let mut t = 1;
    while t + 4 <= max_t {
        let prev = rho[t - 1] + rho[t];
        if rho[t + 1] + rho[t + 2] > prev {
            rho[t + 1] = prev / 2.0;
            rho[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let mut tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1];
    tau = tau.max(1.0 / total.log10());
    Ok(total / tau)
}

/// Sum of squared Pearson residuals over `N - n_params`.
pub fn overdispersion_statistic(y: &[u32], lambda: &[f64], n_params: usize) -> Result<f64> {
    check_rates(y, lambda)?;
    let n = y.len();
    if n <= n_params {
        return Err(DiagnosticsError::DegreesOfFreedom { n, d: n_params });
    }
    Ok(pearson_sum(y, lambda) / (n - n_params) as f64)
}

fn check_rates(y: &[u32], lambda: &[f64]) -> Result<()> {
    if y.len() != lambda.len() {
        return Err(DiagnosticsError::Length(y.len(), lambda.len()));
    }
    if y.is_empty() {
        return Err(DiagnosticsError::DegreesOfFreedom { n: 0, d: 0 });
    }
    if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(DiagnosticsError::BadRate);
    }
    Ok(())
}

fn pearson_sum(y: &[u32], lambda: &[f64]) -> f64 {
    y.iter().zip(lambda).map(|(&y, &l)| (y as f64 - l).powi(2) / l).sum()
}

/// Goodness-of-fit summaries of predicted rates against observed counts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitStatistics {
    /// Pearson-residual R^2; NaN when the observed mean is zero.
    #[serde(with = "report::nullable")]
    pub r2_pp: f64,
    /// Mean Poisson log-likelihood including `log(y!)`.
    pub mean_log_likelihood: f64,
    /// Mean Poisson log-likelihood without the `log(y!)` constant.
    pub mean_log_likelihood_kernel: f64,
    pub mean_absolute_error: f64,
    /// Fraction of counts inside `lambda +/- 2 sqrt(lambda)`.
    pub coverage_2sigma: f64,
}

pub fn fit_statistics(y: &[u32], lambda: &[f64]) -> Result<FitStatistics> {
    check_rates(y, lambda)?;
    let n = y.len() as f64;
    let ybar = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let r2_pp = if ybar > 0.0 {
        let denom: f64 = y.iter().map(|&v| (v as f64 - ybar).powi(2) / ybar).sum();
        1.0 - pearson_sum(y, lambda) / denom
    } else {
        f64::NAN
    };
    let mut kernel = 0.0;
    let mut log_fact = 0.0;
    let mut abs_err = 0.0;
    let mut inside = 0usize;
    for (&yi, &l) in y.iter().zip(lambda) {
        let yf = yi as f64;
        kernel += yf * l.ln() - l;
        log_fact += ln_factorial(yi as u64);
        abs_err += (yf - l).abs();
        let half = 2.0 * l.sqrt();
        if yf >= l - half && yf <= l + half {
            inside += 1;
        }
    }
    Ok(FitStatistics {
        r2_pp,
        mean_log_likelihood: (kernel - log_fact) / n,
        mean_log_likelihood_kernel: kernel / n,
        mean_absolute_error: abs_err / n,
        coverage_2sigma: inside as f64 / n,
    })
}
