use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use claimfreq::data::summarize as summarize_dataset;
use claimfreq::posterior::{to_constrained, LogDensity, ModelInputs};
use claimfreq::sampler::{nuts_sample, optimize_from, scaling_benchmark, InitStrategy, ScalingResult};
use claimfreq::synthetic::{generate, write_cities_csv, write_policies_csv, write_truth_json, SyntheticSpec};
use serde::Serialize;

use crate::artifacts::{chain_csv, chain_file_name, sha256_hex, ChainEntry, ChainTable, Manifest};
use crate::config::{RunConfig, SplineConfig};
use crate::pipeline::{build_model, load_dataset, Stages};
use crate::report::{build_report, write_reports, Assessment};

/// Paper reference for one CPU gradient evaluation on the full dataset.
pub const PAPER_CPU_GRADIENT_MS: f64 = 44.0;

pub struct FitOutcome {
    pub output_dir: PathBuf,
    pub assessment: Assessment,
    pub manifest: Manifest,
}

impl FitOutcome {
    pub fn gate_passed(&self) -> bool {
        self.assessment.report.gate.as_ref().is_some_and(|g| g.passed)
    }
}

/// Ingest, build the model, sample, and persist draws, manifest and reports.
pub fn fit(config: &RunConfig) -> Result<FitOutcome> {
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let mut stages = Stages::default();
    let model = build_model(config, &mut stages)?;
    let inputs = &model.inputs;
    let layout = inputs.layout();
    let d = layout.dim;

    let mut sampler = config.sampler.clone();
    let start = stages.run("optimize", || {
        let zeros = vec![0.0; d];
        if sampler.init != InitStrategy::Optimize {
            return Ok(zeros);
        }
        let out = optimize_from(inputs, &zeros, sampler.optimize_steps, sampler.optimize_learning_rate)?;
        log::info!(
            "optimizer: log density {:.3} -> {:.3} in {} steps",
            out.start_value,
            out.final_value,
            out.steps
        );
        sampler.init = InitStrategy::Zeros;
        Ok(out.point)
    })?;

    let draws = stages.run("chains", || Ok(nuts_sample(inputs, &sampler, &start)?))?;

    let names = layout.names();
    let mut manifest = Manifest::new(
        config,
        inputs.describe(Some(model.graph_hash.clone())),
        model.dataset.report.clone(),
    );
    let mut tables = Vec::with_capacity(draws.chains.len());
    stages.run("persist", || {
        for chain in &draws.chains {
            let rows = (0..chain.n_kept())
                .map(|i| Ok(to_constrained(layout, chain.draw(i))?.flatten()))
                .collect::<Result<Vec<_>>>()?;
            let text = chain_csv(&names, &rows, &chain.stats);
            let file = chain_file_name(chain.chain_id);
            let path = dir.join(&file);
            std::fs::write(&path, &text).with_context(|| format!("cannot write {}", path.display()))?;
            manifest.chains.push(ChainEntry {
                file,
                draws: rows.len(),
                sha256: sha256_hex(text.as_bytes()),
                step_size: chain.final_state.step_size,
                warmup_divergences: chain.warmup_divergences,
                warmup_grad_evals: chain.warmup_grad_evals,
                sampling_grad_evals: chain.sampling_grad_evals,
                seconds: chain.elapsed.as_secs_f64(),
            });
            tables.push(ChainTable {
                rows,
                energy: chain.stats.iter().map(|s| s.energy).collect(),
                tree_depth: chain.stats.iter().map(|s| s.tree_depth).collect(),
                divergent: chain.stats.iter().map(|s| s.divergent).collect(),
                step_size: chain.stats.iter().map(|s| s.step_size).collect(),
            });
        }
        Ok(())
    })?;

    let assessment = stages.run("diagnostics", || {
        let a = build_report(inputs, &tables, &config.diagnostics)?;
        write_reports(&dir, &a, inputs.claims(), config.diagnostics.calibration_bins)?;
        Ok(a)
    })?;
    manifest.timings = stages.timings;
    manifest.write(&dir)?;
    Ok(FitOutcome {
        output_dir: dir,
        assessment,
        manifest,
    })
}

/// Recomputes the reports of a finished fit from its persisted draws.
pub fn diagnose(run_dir: &Path, out_dir: &Path) -> Result<Assessment> {
    let manifest = Manifest::read(run_dir)?;
    let mut stages = Stages::default();
    let model = build_model(&manifest.config, &mut stages)?;
    let inputs = &model.inputs;
    if inputs.describe(Some(model.graph_hash.clone())) != manifest.model {
        bail!(
            "the data referenced by {} no longer match the model recorded in its manifest",
            run_dir.display()
        );
    }
    let chains = stages.run("load draws", || manifest.read_chains(run_dir))?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let settings = &manifest.config.diagnostics;
    stages.run("diagnostics", || {
        let a = build_report(inputs, &chains, settings)?;
        write_reports(out_dir, &a, inputs.claims(), settings.calibration_bins)?;
        Ok(a)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradTiming {
    pub n_records: usize,
    pub dim: usize,
    pub repeats: usize,
    pub median_ms: f64,
    /// Only reported with more than one repeat.
    pub p05_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub ns_per_record: f64,
}

impl GradTiming {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "records            {}", self.n_records).unwrap();
        writeln!(s, "parameters         {}", self.dim).unwrap();
        writeln!(s, "repeats            {}", self.repeats).unwrap();
        writeln!(s, "median             {:.4} ms", self.median_ms).unwrap();
        if let (Some(lo), Some(hi)) = (self.p05_ms, self.p95_ms) {
            writeln!(s, "p05 / p95          {lo:.4} / {hi:.4} ms").unwrap();
        }
        writeln!(s, "per record         {:.2} ns", self.ns_per_record).unwrap();
        writeln!(
            s,
            "paper CPU figure   {PAPER_CPU_GRADIENT_MS} ms on 1.5M policies (reference only)"
        )
        .unwrap();
        s
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Times `repeats` value-and-gradient evaluations at the origin of the
/// unconstrained space, after one untimed warm-up call.
pub fn time_gradient(inputs: &ModelInputs<f64>, repeats: usize) -> GradTiming {
    let d = inputs.dim();
    let x = vec![0.0; d];
    let mut g = vec![0.0; d];
    std::hint::black_box(inputs.logp_grad(&x, &mut g));
    let mut ms: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(inputs.logp_grad(std::hint::black_box(&x), &mut g));
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    ms.sort_by(f64::total_cmp);
    let median = percentile(&ms, 0.5);
    let spread = ms.len() > 1;
    GradTiming {
        n_records: inputs.n_records(),
        dim: d,
        repeats: ms.len(),
        median_ms: median,
        p05_ms: spread.then(|| percentile(&ms, 0.05)),
        p95_ms: spread.then(|| percentile(&ms, 0.95)),
        ns_per_record: median * 1e6 / inputs.n_records() as f64,
    }
}

pub fn bench_grad(config: &RunConfig, repeats: usize) -> Result<GradTiming> {
    let mut stages = Stages::default();
    let model = build_model(config, &mut stages)?;
    stages.run("bench", || Ok(time_gradient(&model.inputs, repeats)))
}

/// Runs the scaling benchmark for every configured sampler and writes
/// `scaling.csv` and `slopes.json` to `out_dir`.
pub fn bench_scaling(config: &RunConfig, out_dir: &Path) -> Result<Vec<ScalingResult>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut results = Vec::new();
    let mut csv = String::from("kind,d,iterations,grad_evals,ess,cost_per_ess,flagged\n");
    for &kind in &config.bench.kinds {
        log::info!("scaling benchmark: {kind}");
        let r = scaling_benchmark(kind, &config.bench.scaling).with_context(|| format!("{kind} benchmark failed"))?;
        for p in &r.points {
            writeln!(
                csv,
                "{kind},{},{},{},{},{},{}",
                p.d, p.iterations, p.grad_evals, p.ess, p.cost_per_ess, p.flagged
            )
            .unwrap();
        }
        results.push(r);
    }
    let path = out_dir.join("scaling.csv");
    std::fs::write(&path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    #[derive(Serialize)]
    struct Slope {
        kind: String,
        slope: f64,
        intercept: f64,
    }
    let slopes: Vec<Slope> = results
        .iter()
        .map(|r| Slope {
            kind: r.kind.to_string(),
            slope: r.slope,
            intercept: r.intercept,
        })
        .collect();
    let path = out_dir.join("slopes.json");
    std::fs::write(&path, serde_json::to_string_pretty(&slopes)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(results)
}

pub fn read_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read spec {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid spec {}", path.display()))
}

/// Fit config that reads the files written by [`simulate`] with the
/// generating model's settings.
pub fn config_for_spec(spec: &SyntheticSpec) -> RunConfig {
    let mut c = RunConfig {
        seed: spec.seed,
        output_dir: PathBuf::from("fit"),
        ..Default::default()
    };
    c.data.policies = Some(PathBuf::from("policies.csv"));
    c.data.cities = Some(PathBuf::from("cities.csv"));
    c.data.year_floor = spec.year_floor;
    c.data.standardize_covariates = false;
    c.spline = SplineConfig {
        n_interior_knots: spec.n_interior_knots,
        degree: spec.spline_degree,
    };
    c.spatial.k_neighbors = spec.k_neighbors;
    c.priors = spec.priors.clone();
    c.sampler.seed = spec.seed;
    c
}

/// Writes `policies.csv`, `cities.csv`, `truth.json` and a matching
/// `fit.toml` to `out_dir`.
pub fn simulate(spec: &SyntheticSpec, out_dir: &Path) -> Result<()> {
    let data = generate(spec)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    write_policies_csv(&data.dataset, &out_dir.join("policies.csv"))?;
    write_cities_csv(&data.dataset.cities, &out_dir.join("cities.csv"))?;
    write_truth_json(&data, spec, &out_dir.join("truth.json"))?;
    let mut table = toml::Table::try_from(config_for_spec(spec)).context("fit config does not serialize")?;
    if let Some(s) = table.get_mut("sampler").and_then(|s| s.as_table_mut()) {
        s.remove("seed");
    }
    let path = out_dir.join("fit.toml");
    std::fs::write(&path, toml::to_string(&table)?).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn summarize(config: &RunConfig) -> Result<String> {
    let dataset = load_dataset(config).context("stage `ingest` failed")?;
    Ok(serde_json::to_string_pretty(&summarize_dataset(&dataset))? + "\n")
}
