//! Stages shared by the commands: ingest, basis, graph and posterior.

use std::time::Instant;

use anyhow::{Context, Result};
use claimfreq::data::{ingest_city_covariates, ingest_policies, Dataset, IngestOptions, VehicleMap};
use claimfreq::posterior::ModelInputs;
use claimfreq::spatial::{load_or_build_graph, AdjacencyGraph};
use claimfreq::spline::SplineBasis;

use crate::artifacts::StageTiming;
use crate::config::RunConfig;

/// Wall-clock record of the stages run so far.
#[derive(Debug, Default)]
pub struct Stages {
    pub timings: Vec<StageTiming>,
}

impl Stages {
    /// Runs one stage, timing it and tagging any error with its name.
    pub fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let started = Instant::now();
        log::info!("stage {name}");
        let out = f().with_context(|| format!("stage `{name}` failed"))?;
        let seconds = started.elapsed().as_secs_f64();
        log::info!("stage {name} done in {seconds:.2}s");
        self.timings.push(StageTiming {
            stage: name.to_string(),
            seconds,
        });
        Ok(out)
    }
}

pub struct Model {
    pub dataset: Dataset,
    pub graph_hash: String,
    pub inputs: ModelInputs<f64>,
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let (policies, cities) = config.data_paths()?;
    let vehicle_map = match &config.data.vehicle_map {
        Some(p) => Some(VehicleMap::from_csv(p)?),
        None => None,
    };
    let opts = IngestOptions {
        year_floor: config.data.year_floor,
        malformed: config.data.malformed,
        vehicle_map,
    };
    let table = ingest_policies(policies, &config.data.columns, &opts)?;
    let cities = ingest_city_covariates(cities, &config.data.city_columns, config.data.standardize_covariates)?;
    Ok(Dataset::new(table, cities)?)
}

pub fn build_basis(config: &RunConfig, dataset: &Dataset) -> Result<SplineBasis<f64>> {
    let log_alpha: Vec<f64> = dataset.records.iter().map(|r| r.exposure.ln()).collect();
    SplineBasis::build(&log_alpha, config.spline.n_interior_knots, config.spline.degree)
        .context("cannot place spline knots")
}

pub fn build_graph(config: &RunConfig, dataset: &Dataset) -> Result<(AdjacencyGraph, String)> {
    let coords = dataset.cities.coordinates();
    Ok(load_or_build_graph(
        &coords,
        config.spatial.k_neighbors,
        config.spatial.cache_dir.as_deref(),
    )?)
}

/// Runs the ingest, basis, graph and posterior stages.
pub fn build_model(config: &RunConfig, stages: &mut Stages) -> Result<Model> {
    let dataset = stages.run("ingest", || load_dataset(config))?;
    let basis = stages.run("basis", || build_basis(config, &dataset))?;
    let (graph, graph_hash) = stages.run("graph", || build_graph(config, &dataset))?;
    let inputs = stages.run("posterior", || {
        Ok(ModelInputs::from_dataset(
            &dataset,
            &basis,
            graph,
            config.priors.clone(),
            &config.model,
        )?)
    })?;
    Ok(Model {
        dataset,
        graph_hash,
        inputs,
    })
}
