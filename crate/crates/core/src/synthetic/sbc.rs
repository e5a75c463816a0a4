//! Simulation-based calibration: ranks of prior-drawn truths among
//! posterior draws should be uniform when generator, model and sampler agree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{generate, Result, SyntheticError, SyntheticSpec, TruthSpec};
use crate::diagnostics::{ess, split_rhat};
use crate::posterior::{to_constrained, ModelInputs, ModelOptions};
use crate::sampler::{nuts_sample, InitStrategy, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbcSettings {
    pub n_replicates: usize,
    pub sampler: SamplerConfig,
    /// Posterior draws kept per replicate for ranking; ranks take
    /// `n_rank_draws + 1` values.
    pub n_rank_draws: usize,
    pub n_bins: usize,
    pub rhat_max: f64,
    pub ess_min: f64,
    pub parallel: bool,
}

impl Default for SbcSettings {
    fn default() -> Self {
        Self {
            n_replicates: 100,
            sampler: SamplerConfig {
                n_warmup: 500,
                n_samples: 1000,
                thin: 1,
                n_chains: 2,
                init: InitStrategy::Random,
                init_radius: 1.0,
                ..Default::default()
            },
            n_rank_draws: 99,
            n_bins: 10,
            rhat_max: 1.10,
            ess_min: 35.0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcReplicate {
    pub index: usize,
    pub seed: u64,
    pub converged: bool,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub divergences: usize,
    /// Rank of each truth among the kept draws; empty when not converged.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcParameter {
    pub name: String,
    pub bin_counts: Vec<usize>,
    pub chi_square: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcResult {
    pub replicates: Vec<SbcReplicate>,
    pub parameters: Vec<SbcParameter>,
    pub n_flagged: usize,
}

impl SbcResult {
    /// Share of parameters whose uniformity p-value is below `alpha`.
    pub fn fraction_rejected(&self, alpha: f64) -> f64 {
        if self.parameters.is_empty() {
            return 0.0;
        }
        self.parameters.iter().filter(|p| p.p_value < alpha).count() as f64 / self.parameters.len() as f64
    }
}

/// Seed of replicate `r`, decorrelated from the master seed.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    let mut z = master.wrapping_add((r as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn run_replicate(spec: &SyntheticSpec, settings: &SbcSettings, index: usize) -> Result<(SbcReplicate, Vec<String>)> {
    let seed = replicate_seed(spec.seed, index);
    let rep_spec = SyntheticSpec {
        seed,
        truth: TruthSpec::Prior,
        ..spec.clone()
    };
    let data = generate(&rep_spec)?;
    let inputs: ModelInputs<f64> = ModelInputs::from_dataset(
        &data.dataset,
        &data.basis,
        data.graph.clone(),
        spec.priors.clone(),
        &ModelOptions::default(),
    )?;
    let layout = inputs.layout().clone();
    let config = SamplerConfig {
        seed,
        ..settings.sampler.clone()
    };
    let draws =
        nuts_sample(&inputs, &config, &vec![0.0; layout.dim]).map_err(|e| SyntheticError::Sampler(e.to_string()))?;

    let mut max_rhat: f64 = 0.0;
    let mut min_ess = f64::INFINITY;
    for j in 0..layout.dim {
        let cols = draws.column_chains(j);
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let r = split_rhat(&refs).map_err(|e| SyntheticError::Sampler(e.to_string()))?;
        let e = ess(&refs).map_err(|e| SyntheticError::Sampler(e.to_string()))?;
        max_rhat = max_rhat.max(if r.is_nan() { f64::INFINITY } else { r });
        min_ess = min_ess.min(if e.is_nan() { 0.0 } else { e });
    }
    let converged = max_rhat < settings.rhat_max && min_ess > settings.ess_min;

    let mut ranks = Vec::new();
    if converged {
        let pooled: Vec<&[f64]> = draws
            .chains
            .iter()
            .flat_map(|c| (0..c.n_kept()).map(move |i| c.draw(i)))
            .collect();
        let l = settings.n_rank_draws.min(pooled.len());
        let kept: Vec<Vec<f64>> = (0..l)
            .map(|k| Ok(to_constrained(&layout, pooled[k * pooled.len() / l])?.flatten()))
            .collect::<Result<_>>()?;
        let truth = data.truth.flatten();
        ranks = (0..layout.dim)
            .map(|j| kept.iter().filter(|d| d[j] < truth[j]).count())
            .collect();
    }
    Ok((
        SbcReplicate {
            index,
            seed,
            converged,
            max_rhat,
            min_ess,
            divergences: draws.divergences(),
            ranks,
        },
        layout.names(),
    ))
}

/// Rank counts in `n_bins` equal-width bins over `0..=n_draws`, with the
/// chi-square uniformity statistic and its p-value.
pub fn rank_uniformity(ranks: &[usize], n_draws: usize, n_bins: usize) -> (Vec<usize>, f64, f64) {
    let mut counts = vec![0usize; n_bins];
    for &r in ranks {
        counts[(r * n_bins / (n_draws + 1)).min(n_bins - 1)] += 1;
    }
    if ranks.is_empty() || n_bins < 2 {
        return (counts, f64::NAN, f64::NAN);
    }
    let expected = ranks.len() as f64 / n_bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = ChiSquared::new((n_bins - 1) as f64).expect("df >= 1").sf(stat);
    (counts, stat, p)
}

pub fn sbc_run(spec: &SyntheticSpec, settings: &SbcSettings) -> Result<SbcResult> {
    spec.validate()?;
    settings
        .sampler
        .validate()
        .map_err(|e| SyntheticError::Sampler(e.to_string()))?;
    if settings.n_bins < 2 || settings.n_rank_draws + 1 < settings.n_bins {
        return Err(SyntheticError::Spec("need 2 <= n_bins <= n_rank_draws + 1".into()));
    }
    let outcomes: Vec<Result<(SbcReplicate, Vec<String>)>> = if settings.parallel {
        (0..settings.n_replicates)
            .into_par_iter()
            .map(|r| run_replicate(spec, settings, r))
            .collect()
    } else {
        (0..settings.n_replicates)
            .map(|r| run_replicate(spec, settings, r))
            .collect()
    };
    let mut replicates = Vec::with_capacity(outcomes.len());
    let mut names = Vec::new();
    for o in outcomes {
        let (rep, n) = o?;
        names = n;
        replicates.push(rep);
    }
    let n_flagged = replicates.iter().filter(|r| !r.converged).count();
    let good: Vec<&SbcReplicate> = replicates.iter().filter(|r| r.converged).collect();
    let parameters = if good.is_empty() {
        Vec::new()
    } else {
        names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let ranks: Vec<usize> = good.iter().map(|r| r.ranks[j]).collect();
                let (bin_counts, chi_square, p_value) = rank_uniformity(&ranks, settings.n_rank_draws, settings.n_bins);
                SbcParameter {
                    name: name.clone(),
                    bin_counts,
                    chi_square,
                    p_value,
                }
            })
            .collect()
    };
    Ok(SbcResult {
        replicates,
        parameters,
        n_flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_replicates_give_empty_table() {
        let s = SbcSettings {
            n_replicates: 0,
            ..Default::default()
        };
        let r = sbc_run(&SyntheticSpec::default(), &s).unwrap();
        assert!(r.replicates.is_empty() && r.parameters.is_empty());
        assert_eq!(r.fraction_rejected(0.05), 0.0);
    }

    #[test]
    fn uniform_ranks_pass_and_piled_ranks_fail() {
        let flat: Vec<usize> = (0..100).collect();
        let (counts, stat, p) = rank_uniformity(&flat, 99, 10);
        assert_eq!(counts, vec![10; 10]);
        assert_eq!(stat, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        let piled = vec![0usize; 100];
        let (_, _, p) = rank_uniformity(&piled, 99, 10);
        assert!(p < 1e-10);
    }

    #[test]
    fn replicate_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|r| replicate_seed(7, r)).collect();
        assert_eq!(s.len(), 1000);
    }
}
