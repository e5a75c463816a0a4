use serde::{Deserialize, Serialize};

use super::{build_kernel, chain_rng, drive, Kernel, Result, SamplerConfig, SamplerError, SamplerKind};
use crate::diagnostics::ess;
use crate::posterior::LogDensity;
use crate::scalar::Scalar;

/// Product of `dim` standard normals.
#[derive(Debug, Clone, Copy)]
pub struct StandardNormalTarget {
    pub dim: usize,
}

impl<T: Scalar> LogDensity<T> for StandardNormalTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logp_grad(&self, x: &[T], grad: &mut [T]) -> T {
        let mut v = T::ZERO;
        for (g, &xi) in grad.iter_mut().zip(x) {
            *g = -xi;
            v -= T::HALF * xi * xi;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSettings {
    pub dims: Vec<usize>,
    pub seed: u64,
    pub n_warmup: usize,
    /// Post-warmup iterations at the smallest dimension; longer runs are
    /// used where the sampler is expected to mix more slowly.
    pub n_samples: usize,
    /// Coordinates whose ESS is averaged.
    pub tracked: usize,
}

impl Default for ScalingSettings {
    fn default() -> Self {
        Self {
            dims: vec![16, 32, 64, 128, 256, 512, 1024],
            seed: 1,
            n_warmup: 2000,
            n_samples: 4000,
            tracked: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub d: usize,
    pub iterations: usize,
    pub grad_evals: u64,
    pub ess: f64,
    /// Gradient evaluations times `d` per effective sample.
    pub cost_per_ess: f64,
    /// ESS below 10; the point is left out of the slope fit.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub kind: SamplerKind,
    pub points: Vec<ScalingPoint>,
    pub slope: f64,
    pub intercept: f64,
}

/// Iterations needed for comparable ESS, from the known mixing rates.
fn iterations(kind: SamplerKind, base: usize, d: usize, d0: usize) -> usize {
    let r = d as f64 / d0 as f64;
    let factor = match kind {
        SamplerKind::Nuts => 1.0,
        SamplerKind::Mala => r.powf(1.0 / 3.0),
        SamplerKind::Rwm => r,
    };
    let base = match kind {
        SamplerKind::Rwm => base * 8,
        SamplerKind::Mala => base * 3,
        SamplerKind::Nuts => base,
    };
    (base as f64 * factor).ceil() as usize
}

/// Least-squares line through `(x, y)`.
pub(crate) fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Cost per effective sample on isotropic normals of increasing dimension,
/// with the fitted slope of log cost against log dimension.
pub fn scaling_benchmark(kind: SamplerKind, settings: &ScalingSettings) -> Result<ScalingResult> {
    let dims = &settings.dims;
    if dims.len() < 3 || dims.windows(2).any(|w| w[0] >= w[1]) || dims[0] == 0 {
        return Err(SamplerError::Config(
            "scaling dims must be positive, strictly increasing and at least 3".into(),
        ));
    }
    let mut points = Vec::with_capacity(dims.len());
    for (i, &d) in dims.iter().enumerate() {
        let target = StandardNormalTarget { dim: d };
        let mut rng = chain_rng(settings.seed, i);
        // exact draw from the target, so warmup only tunes the kernel
        let start: Vec<f64> = (0..d).map(|_| f64::standard_normal(&mut rng)).collect();
        let config = SamplerConfig {
            n_warmup: settings.n_warmup,
            max_tree_depth: 10,
            ..Default::default()
        };
        let n_iter = iterations(kind, settings.n_samples, d, dims[0]);
        let tracked: Vec<usize> = (0..settings.tracked.min(d))
            .map(|k| k * d / settings.tracked.min(d))
            .collect();
        let mut trace: Vec<Vec<f64>> = vec![Vec::with_capacity(n_iter); tracked.len()];
        let mut kernel = build_kernel(kind, &target, &config, start, &mut rng, i)?;
        let summary = drive(
            &mut kernel,
            &mut rng,
            i,
            settings.n_warmup,
            n_iter,
            1,
            |x: &[f64], _| {
                for (t, &j) in trace.iter_mut().zip(&tracked) {
                    t.push(x[j]);
                }
            },
        )?;
        let grad_evals = kernel.grad_evals() - summary.warmup_grad_evals;
        let mut total = 0.0;
        for t in &trace {
            total += ess(&[t.as_slice()])?;
        }
        let e = total / trace.len() as f64;
        points.push(ScalingPoint {
            d,
            iterations: n_iter,
            grad_evals,
            ess: e,
            cost_per_ess: grad_evals as f64 * d as f64 / e,
            flagged: !(e >= 10.0),
        });
    }
    let kept: Vec<&ScalingPoint> = points.iter().filter(|p| !p.flagged).collect();
    let (slope, intercept) = if kept.len() >= 2 {
        let x: Vec<f64> = kept.iter().map(|p| (p.d as f64).ln()).collect();
        let y: Vec<f64> = kept.iter().map(|p| p.cost_per_ess.ln()).collect();
        fit_line(&x, &y)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ScalingResult {
        kind,
        points,
        slope,
        intercept,
    })
}
