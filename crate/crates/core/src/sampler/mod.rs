//! Gradient-based MCMC: multinomial NUTS with warmup adaptation, MALA and
//! random-walk Metropolis, plus an Adam initializer and the dimension
//! scaling benchmark.
//!
//! Every chain draws from its own ChaCha stream (`seed`, stream = chain id),
//! so sequential and parallel execution give identical draws.

mod adapt;
mod metric;
mod metropolis;
mod nuts;
mod optimize;
mod scaling;

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::DiagnosticsError;
use crate::posterior::LogDensity;
use crate::scalar::Scalar;

pub use metric::MetricKind;
pub use optimize::{optimize_from, optimize_init, OptimizeOutcome};
pub use scaling::{scaling_benchmark, ScalingPoint, ScalingResult, ScalingSettings, StandardNormalTarget};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("initial point has length {found}, target dimension is {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("log density is not finite at the initial point of chain {chain}")]
    NonFiniteInit { chain: usize },
    #[error("every warmup iteration of chain {chain} diverged; the step size collapsed to {step_size:e}")]
    AllWarmupDivergent { chain: usize, step_size: f64 },
    #[error("step size search failed in chain {chain}: {reason}")]
    StepSize { chain: usize, reason: String },
    #[error("optimizer objective was not finite for 100 consecutive steps (step {step})")]
    OptimizerDiverged { step: usize },
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Start every chain at the supplied point.
    Zeros,
    /// Supplied point plus uniform jitter of half-width `init_radius`.
    Random,
    /// Adam ascent from the supplied point; every chain starts at the result.
    Optimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_warmup: usize,
    pub n_samples: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub metric: MetricKind,
    pub seed: u64,
    pub init: InitStrategy,
    pub init_radius: f64,
    pub parallel_chains: bool,
    pub optimize_steps: usize,
    pub optimize_learning_rate: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_warmup: 2000,
            n_samples: 2000,
            thin: 20,
            n_chains: 2,
            target_accept: 0.8,
            max_tree_depth: 10,
            metric: MetricKind::Diagonal,
            seed: 1,
            init: InitStrategy::Optimize,
            init_radius: 2.0,
            parallel_chains: false,
            optimize_steps: 200_000,
            optimize_learning_rate: 1e-3,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SamplerError::Config(m.to_string()));
        if self.n_warmup < 1 || self.n_samples < 1 {
            return bad("n_warmup and n_samples must be at least 1");
        }
        if self.thin < 1 {
            return bad("thin must be at least 1");
        }
        if self.n_chains < 1 {
            return bad("n_chains must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if self.max_tree_depth < 1 || self.max_tree_depth > 30 {
            return bad("max_tree_depth must lie in 1..=30");
        }
        if !(self.init_radius >= 0.0 && self.init_radius.is_finite()) {
            return bad("init_radius must be finite and non-negative");
        }
        if !(self.optimize_learning_rate >= 0.0 && self.optimize_learning_rate.is_finite()) {
            return bad("optimize_learning_rate must be finite and non-negative");
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        self.n_samples / self.thin
    }
}

/// Per-draw sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawStats {
    /// Hamiltonian for NUTS, negative log density for the Metropolis kernels.
    pub energy: f64,
    pub tree_depth: u32,
    pub divergent: bool,
    pub step_size: f64,
    pub accept_stat: f64,
    pub n_grad: u32,
}

/// Adapted state of a chain at the end of sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState<T> {
    pub position: Vec<T>,
    pub step_size: f64,
    /// Diagonal of the adapted inverse metric.
    pub inverse_mass_diag: Vec<f64>,
    pub divergences: usize,
    pub mean_tree_depth: f64,
    pub mean_accept_stat: f64,
}

#[derive(Debug, Clone)]
pub struct ChainDraws<T> {
    pub chain_id: usize,
    dim: usize,
    /// Kept draws, row-major `n_kept x dim`.
    pub draws: Vec<T>,
    pub stats: Vec<DrawStats>,
    pub warmup_grad_evals: u64,
    pub sampling_grad_evals: u64,
    pub warmup_divergences: usize,
    pub final_state: ChainState<T>,
    pub elapsed: Duration,
}

impl<T: Scalar> ChainDraws<T> {
    pub fn n_kept(&self) -> usize {
        self.stats.len()
    }

    pub fn draw(&self, i: usize) -> &[T] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws
            .iter()
            .skip(j)
            .step_by(self.dim)
            .map(|v| v.as_f64())
            .collect()
    }
}

/// Draws from all chains, in unconstrained coordinates.
#[derive(Debug, Clone)]
pub struct PosteriorDraws<T> {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws<T>>,
}

impl<T: Scalar> PosteriorDraws<T> {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn n_kept(&self) -> usize {
        self.chains.first().map_or(0, |c| c.n_kept())
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.names.len(), "name count must match dimension");
        self.names = names;
        self
    }

    /// Coordinate `j` split by chain.
    pub fn column_chains(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.column(j)).collect()
    }

    pub fn divergences(&self) -> usize {
        self.chains
            .iter()
            .map(|c| c.stats.iter().filter(|s| s.divergent).count())
            .sum()
    }
}

/// One Markov transition kernel bound to a target.
pub(crate) trait Kernel<T> {
    fn transition(&mut self, rng: &mut ChaCha8Rng, adapt: bool) -> DrawStats;
    fn end_warmup(&mut self);
    fn position(&self) -> &[T];
    fn step_size(&self) -> f64;
    fn inverse_metric(&self) -> Vec<f64>;
    fn grad_evals(&self) -> u64;
}

pub(crate) fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

pub(crate) struct RunSummary {
    pub warmup_grad_evals: u64,
    pub warmup_divergences: usize,
}

/// Logs one line per tenth of each phase.
struct Progress {
    chain: usize,
    started: Instant,
    depth: u64,
    divergent: usize,
    count: usize,
}

impl Progress {
    fn new(chain: usize) -> Self {
        Self {
            chain,
            started: Instant::now(),
            depth: 0,
            divergent: 0,
            count: 0,
        }
    }

    fn note<T, K: Kernel<T>>(&mut self, phase: &str, i: usize, n: usize, stats: &DrawStats, kernel: &K) {
        self.depth += u64::from(stats.tree_depth);
        self.divergent += usize::from(stats.divergent);
        self.count += 1;
        let every = n.div_ceil(10).max(1);
        if (i + 1) % every != 0 && i + 1 != n {
            return;
        }
        log::info!(
            "chain {} {phase} {}/{n}: step {:.3e}, mean depth {:.1}, {} divergent, {} gradients, {:.0}s",
            self.chain + 1,
            i + 1,
            kernel.step_size(),
            self.depth as f64 / self.count as f64,
            self.divergent,
            kernel.grad_evals(),
            self.started.elapsed().as_secs_f64()
        );
        self.depth = 0;
        self.divergent = 0;
        self.count = 0;
    }
}

/// Runs warmup then sampling, handing every kept draw to `record`.
pub(crate) fn drive<T: Scalar, K: Kernel<T>>(
    kernel: &mut K,
    rng: &mut ChaCha8Rng,
    chain: usize,
    n_warmup: usize,
    n_samples: usize,
    thin: usize,
    mut record: impl FnMut(&[T], DrawStats),
) -> Result<RunSummary> {
    let mut warmup_divergences = 0;
    let mut progress = Progress::new(chain);
    for i in 0..n_warmup {
        let stats = kernel.transition(rng, true);
        if stats.divergent {
            warmup_divergences += 1;
        }
        progress.note("warmup", i, n_warmup, &stats, kernel);
    }
    if n_warmup > 0 && warmup_divergences == n_warmup {
        return Err(SamplerError::AllWarmupDivergent {
            chain,
            step_size: kernel.step_size(),
        });
    }
    kernel.end_warmup();
    let warmup_grad_evals = kernel.grad_evals();
    for s in 0..n_samples {
        let stats = kernel.transition(rng, false);
        progress.note("sampling", s, n_samples, &stats, kernel);
        if (s + 1) % thin == 0 {
            record(kernel.position(), stats);
        }
    }
    Ok(RunSummary {
        warmup_grad_evals,
        warmup_divergences,
    })
}

fn finite_at<T: Scalar, D: LogDensity<T>>(logp: &D, x: &[T]) -> bool {
    let mut g = vec![T::ZERO; x.len()];
    let v = logp.logp_grad(x, &mut g);
    v.is_finite() && g.iter().all(|g| g.is_finite())
}

/// Starting point for one chain under the configured strategy.
fn chain_start<T: Scalar, D: LogDensity<T>>(
    logp: &D,
    config: &SamplerConfig,
    base: &[T],
    chain: usize,
) -> Result<Vec<T>> {
    if config.init == InitStrategy::Random && config.init_radius > 0.0 {
        // separate stream family so the jitter never overlaps sampling draws
        let mut rng = chain_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15, chain);
        let r = T::lit(config.init_radius);
        for _ in 0..100 {
            let x: Vec<T> = base
                .iter()
                .map(|&b| b + r * (T::lit(2.0) * T::uniform(&mut rng) - T::ONE))
                .collect();
            if finite_at(logp, &x) {
                return Ok(x);
            }
        }
        return Err(SamplerError::NonFiniteInit { chain });
    }
    if finite_at(logp, base) {
        Ok(base.to_vec())
    } else {
        Err(SamplerError::NonFiniteInit { chain })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Nuts,
    Mala,
    Rwm,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Nuts => "nuts",
            SamplerKind::Mala => "mala",
            SamplerKind::Rwm => "rwm",
        })
    }
}

pub(crate) fn build_kernel<'a, T: Scalar, D: LogDensity<T>>(
    kind: SamplerKind,
    logp: &'a D,
    config: &SamplerConfig,
    start: Vec<T>,
    rng: &mut ChaCha8Rng,
    chain: usize,
) -> Result<Box<dyn Kernel<T> + 'a>> {
    Ok(match kind {
        SamplerKind::Nuts => Box::new(nuts::Nuts::new(logp, start, config, rng, chain)?),
        SamplerKind::Mala => Box::new(metropolis::Metropolis::mala(logp, start)),
        SamplerKind::Rwm => Box::new(metropolis::Metropolis::rwm(logp, start)),
    })
}

impl<T: Scalar> Kernel<T> for Box<dyn Kernel<T> + '_> {
    fn transition(&mut self, rng: &mut ChaCha8Rng, adapt: bool) -> DrawStats {
        (**self).transition(rng, adapt)
    }
    fn end_warmup(&mut self) {
        (**self).end_warmup()
    }
    fn position(&self) -> &[T] {
        (**self).position()
    }
    fn step_size(&self) -> f64 {
        (**self).step_size()
    }
    fn inverse_metric(&self) -> Vec<f64> {
        (**self).inverse_metric()
    }
    fn grad_evals(&self) -> u64 {
        (**self).grad_evals()
    }
}

fn run_chain<T: Scalar, D: LogDensity<T>>(
    kind: SamplerKind,
    logp: &D,
    config: &SamplerConfig,
    base: &[T],
    chain: usize,
) -> Result<ChainDraws<T>> {
    let started = Instant::now();
    let d = base.len();
    let start = chain_start(logp, config, base, chain)?;
    let mut rng = chain_rng(config.seed, chain);
    let mut kernel = build_kernel(kind, logp, config, start, &mut rng, chain)?;
    let mut draws = Vec::with_capacity(config.n_kept() * d);
    let mut stats = Vec::with_capacity(config.n_kept());
    let summary = drive(
        &mut kernel,
        &mut rng,
        chain,
        config.n_warmup,
        config.n_samples,
        config.thin,
        |x, s| {
            draws.extend_from_slice(x);
            stats.push(s);
        },
    )?;
    let n = stats.len().max(1) as f64;
    let final_state = ChainState {
        position: kernel.position().to_vec(),
        step_size: kernel.step_size(),
        inverse_mass_diag: kernel.inverse_metric(),
        divergences: stats.iter().filter(|s| s.divergent).count(),
        mean_tree_depth: stats.iter().map(|s| s.tree_depth as f64).sum::<f64>() / n,
        mean_accept_stat: stats.iter().map(|s| s.accept_stat).sum::<f64>() / n,
    };
    Ok(ChainDraws {
        chain_id: chain,
        dim: d,
        draws,
        stats,
        warmup_grad_evals: summary.warmup_grad_evals,
        sampling_grad_evals: kernel.grad_evals() - summary.warmup_grad_evals,
        warmup_divergences: summary.warmup_divergences,
        final_state,
        elapsed: started.elapsed(),
    })
}

/// Runs `config.n_chains` chains of the given kernel.
pub fn sample<T: Scalar, D: LogDensity<T>>(
    kind: SamplerKind,
    logp: &D,
    config: &SamplerConfig,
    init: &[T],
) -> Result<PosteriorDraws<T>> {
    config.validate()?;
    let d = logp.dim();
    if init.len() != d {
        return Err(SamplerError::Dimension {
            expected: d,
            found: init.len(),
        });
    }
    let base = if config.init == InitStrategy::Optimize {
        optimize_from(logp, init, config.optimize_steps, config.optimize_learning_rate)?.point
    } else {
        init.to_vec()
    };
    let chains: Vec<Result<ChainDraws<T>>> = if config.parallel_chains {
        (0..config.n_chains)
            .into_par_iter()
            .map(|c| run_chain(kind, logp, config, &base, c))
            .collect()
    } else {
        (0..config.n_chains)
            .map(|c| run_chain(kind, logp, config, &base, c))
            .collect()
    };
    Ok(PosteriorDraws {
        names: (0..d).map(|i| format!("x[{i}]")).collect(),
        chains: chains.into_iter().collect::<Result<_>>()?,
    })
}

pub fn nuts_sample<T: Scalar, D: LogDensity<T>>(
    logp: &D,
    config: &SamplerConfig,
    init: &[T],
) -> Result<PosteriorDraws<T>> {
    sample(SamplerKind::Nuts, logp, config, init)
}

pub fn mala_sample<T: Scalar, D: LogDensity<T>>(
    logp: &D,
    config: &SamplerConfig,
    init: &[T],
) -> Result<PosteriorDraws<T>> {
    sample(SamplerKind::Mala, logp, config, init)
}

pub fn rwm_sample<T: Scalar, D: LogDensity<T>>(
    logp: &D,
    config: &SamplerConfig,
    init: &[T],
) -> Result<PosteriorDraws<T>> {
    sample(SamplerKind::Rwm, logp, config, init)
}
