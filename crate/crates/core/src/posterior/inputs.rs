use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use super::{Layout, ModelDescription, ModelDims, Parameterization, PosteriorError, PriorSettings, Result};
use crate::data::Dataset;
use crate::scalar::Scalar;
use crate::spatial::AdjacencyGraph;
use crate::spline::{DesignMatrix, SplineBasis};

/// Evaluation settings that do not change the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    /// Merge records with identical exposure, factors, city and year.
    pub aggregate: bool,
    /// Threads for the likelihood sum; 1 runs inline, 0 uses all cores.
    pub workers: usize,
    pub parameterization: Parameterization,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            aggregate: true,
            workers: 1,
            parameterization: Parameterization::default(),
        }
    }
}

const MIN_CHUNK: usize = 2048;
const MAX_PARTITIONS: usize = 64;

/// Encoded data, basis and graph, ready for repeated posterior evaluation.
///
/// Records are stored as cells; with aggregation on, a cell holds every
/// record sharing the same exposure, factor levels, city and year, with its
/// claim counts summed. The cell partition depends only on the data, so the
/// likelihood reduction is reproducible for any worker count.
pub struct ModelInputs<T> {
    pub(crate) layout: Layout,
    pub(crate) priors: PriorSettings,
    pub(crate) graph: AdjacencyGraph,
    pub(crate) basis: SplineBasis<T>,
    pub(crate) log_alpha: Vec<T>,
    pub(crate) weight: Vec<T>,
    pub(crate) y: Vec<T>,
    pub(crate) design: DesignMatrix<T>,
    /// Per cell, the index of each factor level in the concatenated level
    /// vector, `p` entries per cell.
    pub(crate) levels: Vec<u32>,
    pub(crate) factor_offsets: Vec<usize>,
    pub(crate) city: Vec<u32>,
    pub(crate) year: Vec<u32>,
    /// `J x M`, row-major.
    pub(crate) covariates: Vec<T>,
    pub(crate) record_cell: Vec<u32>,
    pub(crate) record_y: Vec<u32>,
    pub(crate) log_factorial_sum: f64,
    pub(crate) partitions: Vec<(usize, usize)>,
    pub(crate) pool: Option<Arc<rayon::ThreadPool>>,
    pub(crate) year_floor: i32,
    pub(crate) factor_names: Vec<String>,
    pub(crate) covariate_names: Vec<String>,
}

/// Column view of the records, one entry per policy.
pub(crate) struct Columns<'a> {
    pub exposure: Vec<f64>,
    pub claims: Vec<u32>,
    pub factors: Vec<Vec<u32>>,
    pub city: Vec<u32>,
    pub year: Vec<u32>,
    pub dataset: &'a Dataset,
}

impl<'a> Columns<'a> {
    fn from_dataset(ds: &'a Dataset) -> Self {
        let r = &ds.records;
        Self {
            exposure: r.iter().map(|r| r.exposure).collect(),
            claims: r.iter().map(|r| r.claim_count).collect(),
            factors: vec![
                r.iter().map(|r| r.brand_id).collect(),
                r.iter().map(|r| r.category_id).collect(),
            ],
            city: r.iter().map(|r| r.city_id).collect(),
            year: r.iter().map(|r| (r.vehicle_year - ds.year_floor) as u32).collect(),
            dataset: ds,
        }
    }
}

impl<T: Scalar> ModelInputs<T> {
    /// Builds inputs for the brand + category model on `dataset`.
    pub fn from_dataset(
        dataset: &Dataset,
        basis: &SplineBasis<f64>,
        graph: AdjacencyGraph,
        priors: PriorSettings,
        options: &ModelOptions,
    ) -> Result<Self> {
        dataset.validate().map_err(|e| PosteriorError::Inputs(e.to_string()))?;
        priors.validate()?;
        if graph.len() != dataset.n_city() {
            return Err(PosteriorError::Inputs(format!(
                "graph has {} nodes but the city table has {} rows",
                graph.len(),
                dataset.n_city()
            )));
        }
        let dims = ModelDims {
            n_spline: basis.len(),
            factor_levels: vec![dataset.n_brand(), dataset.n_category()],
            n_covariates: dataset.cities.n_covariates(),
            n_cities: dataset.n_city(),
            n_years: dataset.n_years(),
        };
        let cols = Columns::from_dataset(dataset);
        Self::build(dims, cols, basis, graph, priors, options)
    }

    fn build(
        dims: ModelDims,
        cols: Columns<'_>,
        basis: &SplineBasis<f64>,
        graph: AdjacencyGraph,
        priors: PriorSettings,
        options: &ModelOptions,
    ) -> Result<Self> {
        let n = cols.exposure.len();
        let p = dims.n_factors();
        let layout = Layout::with_parameterization(&dims, &options.parameterization);

        let mut cells: IndexMap<Box<[u32]>, usize> = IndexMap::new();
        let mut record_cell = Vec::with_capacity(n);
        let mut first_record = Vec::new();
        for i in 0..n {
            let cell = if options.aggregate {
                let bits = cols.exposure[i].to_bits();
                let mut key = Vec::with_capacity(p + 4);
                key.push((bits >> 32) as u32);
                key.push(bits as u32);
                key.extend(cols.factors.iter().map(|f| f[i]));
                key.push(cols.city[i]);
                key.push(cols.year[i]);
                let next = cells.len();
                *cells.entry(key.into_boxed_slice()).or_insert_with(|| {
                    first_record.push(i);
                    next
                })
            } else {
                first_record.push(i);
                i
            };
            record_cell.push(cell as u32);
        }
        let n_cells = first_record.len();

        let mut weight = vec![T::ZERO; n_cells];
        let mut y = vec![T::ZERO; n_cells];
        for (i, &c) in record_cell.iter().enumerate() {
            weight[c as usize] += T::ONE;
            y[c as usize] += T::lit(cols.claims[i] as f64);
        }
        let log_alpha_f64: Vec<f64> = first_record.iter().map(|&i| cols.exposure[i].ln()).collect();
        let basis_t: SplineBasis<T> = basis.cast();
        let log_alpha: Vec<T> = log_alpha_f64.iter().map(|&v| T::lit(v)).collect();
        let design = basis_t.design_matrix(&log_alpha);
        let mut factor_offsets = Vec::with_capacity(p);
        let mut off = 0;
        for &lv in &dims.factor_levels {
            factor_offsets.push(off);
            off += lv;
        }
        let mut levels = Vec::with_capacity(n_cells * p);
        for &i in &first_record {
            levels.extend(cols.factors.iter().zip(&factor_offsets).map(|(f, &o)| o as u32 + f[i]));
        }
        let ds = cols.dataset;
        let covariates = ds.cities.covariates.iter().map(|&z| T::lit(z)).collect();
        let log_factorial_sum = cols.claims.iter().map(|&k| ln_factorial(k as u64)).sum();

        let chunk = MIN_CHUNK.max(n_cells.div_ceil(MAX_PARTITIONS));
        let partitions = (0..n_cells)
            .step_by(chunk.max(1))
            .map(|lo| (lo, (lo + chunk).min(n_cells)))
            .collect();
        let pool = match options.workers {
            1 => None,
            w => Some(Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(w)
                    .build()
                    .map_err(|e| PosteriorError::Inputs(e.to_string()))?,
            )),
        };
        Ok(Self {
            layout,
            priors,
            graph,
            basis: basis_t,
            log_alpha,
            weight,
            y,
            design,
            levels,
            factor_offsets,
            city: first_record.iter().map(|&i| cols.city[i]).collect(),
            year: first_record.iter().map(|&i| cols.year[i]).collect(),
            covariates,
            record_cell,
            record_y: cols.claims,
            log_factorial_sum,
            partitions,
            pool,
            year_floor: ds.year_floor,
            factor_names: vec!["brand".into(), "category".into()],
            covariate_names: ds.cities.covariate_names.clone(),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dims(&self) -> &ModelDims {
        &self.layout.dims
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn priors(&self) -> &PriorSettings {
        &self.priors
    }

    pub fn graph(&self) -> &AdjacencyGraph {
        &self.graph
    }

    pub fn basis(&self) -> &SplineBasis<T> {
        &self.basis
    }

    pub fn n_records(&self) -> usize {
        self.record_cell.len()
    }

    pub fn n_cells(&self) -> usize {
        self.log_alpha.len()
    }

    /// Observed claim counts per record.
    pub fn claims(&self) -> &[u32] {
        &self.record_y
    }

    /// `sum_i log(y_i!)`, dropped from the sampling density.
    pub fn log_factorial_sum(&self) -> f64 {
        self.log_factorial_sum
    }

    /// Manifest entry sufficient to rebuild the model layout and basis.
    pub fn describe(&self, graph_hash: Option<String>) -> ModelDescription {
        ModelDescription {
            layout: self.layout.clone(),
            spline_degree: self.basis.degree(),
            spline_knots: self.basis.knots().iter().map(|k| k.as_f64()).collect(),
            year_floor: self.year_floor,
            priors: self.priors.clone(),
            parameter_count: self.layout.dim,
            graph_hash,
            factor_names: self.factor_names.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}
