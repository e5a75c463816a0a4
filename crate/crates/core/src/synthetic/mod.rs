//! Forward simulation from the full generative model.
//!
//! Rates come from [`ModelInputs::predict_rates`], the same code path the
//! likelihood uses, so simulated data and the fitted model cannot disagree
//! about the rate formula.

mod sbc;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CityKey, CityTable, Dataset, IngestReport, Levels, PolicyRecord};
use crate::posterior::{ModelInputs, ModelOptions, ParameterBlock, PosteriorError, PriorSettings};
use crate::spatial::{build_knn_graph, sample_car_prior, AdjacencyGraph, SpatialError};
use crate::spline::{SplineBasis, SplineError};

pub use sbc::{rank_uniformity, replicate_seed, sbc_run, SbcParameter, SbcReplicate, SbcResult, SbcSettings};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error("writing {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("sampler: {0}")]
    Sampler(String),
}

pub type Result<T> = std::result::Result<T, SyntheticError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExposureSpec {
    LogNormal { mu: f64, sigma: f64 },
    Constant { value: f64 },
}

/// Ground truth: drawn from the priors, or fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthSpec {
    Prior,
    Fixed { parameters: Box<ParameterBlock<f64>> },
}

/// Multiplies one scale after drawing from the prior; the dependent block is
/// drawn with the inflated scale. Used as an SBC negative control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleInflation {
    /// One of `sigma_g`, `sigma_v1`, `sigma_v2`, ..., `sigma_eps`, `sigma_xi`.
    pub scale: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_records: usize,
    pub n_cities: usize,
    pub n_brand: usize,
    pub n_category: usize,
    pub n_covariates: usize,
    pub n_years: usize,
    pub year_floor: i32,
    pub k_neighbors: usize,
    pub n_interior_knots: usize,
    pub spline_degree: usize,
    pub exposure: ExposureSpec,
    /// `[lat_min, lat_max, lon_min, lon_max]` in degrees.
    pub region: [f64; 4],
    pub priors: PriorSettings,
    pub truth: TruthSpec,
    pub inflate: Option<ScaleInflation>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_records: 20_000,
            n_cities: 60,
            n_brand: 12,
            n_category: 5,
            n_covariates: 3,
            n_years: 10,
            year_floor: 1971,
            k_neighbors: 5,
            n_interior_knots: 3,
            spline_degree: 3,
            exposure: ExposureSpec::LogNormal { mu: -1.0, sigma: 1.0 },
            region: [-30.0, -5.0, -60.0, -35.0],
            priors: PriorSettings::default(),
            truth: TruthSpec::Prior,
            inflate: None,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(SyntheticError::Spec(m.into()));
        if self.n_records == 0 {
            return err("n_records must be at least 1");
        }
        if self.n_cities == 0 || self.n_brand == 0 || self.n_category == 0 || self.n_years == 0 {
            return err("all cardinalities must be at least 1");
        }
        if self.n_cities <= self.k_neighbors || self.k_neighbors == 0 {
            return err("need 1 <= k_neighbors < n_cities");
        }
        let needed = self.n_brand.max(self.n_category).max(self.n_years);
        if self.n_records < needed {
            return err("n_records must cover every brand, category and year at least once");
        }
        match self.exposure {
            ExposureSpec::LogNormal { mu, sigma } if mu.is_finite() && sigma > 0.0 => {}
            ExposureSpec::Constant { value } if value > 0.0 && value.is_finite() => {}
            _ => return err("exposure distribution parameters are invalid"),
        }
        let [a, b, c, d] = self.region;
        if !(a < b && c < d && a >= -90.0 && b <= 90.0) {
            return err("region must be [lat_min, lat_max, lon_min, lon_max]");
        }
        self.priors.validate()?;
        Ok(())
    }
}

/// Simulated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub truth: ParameterBlock<f64>,
    pub graph: AdjacencyGraph,
    pub basis: SplineBasis<f64>,
    /// True `lambda_i` per record.
    pub rates: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn half_normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    (sd * rng.sample::<f64, _>(StandardNormal)).abs()
}

fn beta(rng: &mut ChaCha8Rng, ab: [f64; 2]) -> f64 {
    Beta::new(ab[0], ab[1]).expect("validated").sample(rng)
}

/// Knots from the data, or a unit-width span when all exposures coincide.
fn exposure_basis(log_alpha: &[f64], n_interior: usize, degree: usize) -> Result<SplineBasis<f64>> {
    match SplineBasis::build(log_alpha, n_interior, degree) {
        Err(SplineError::Degenerate) => {
            let x = log_alpha[0];
            let mut knots = vec![x - 1.0; degree + 1];
            knots.extend((1..=n_interior).map(|i| x - 1.0 + 2.0 * i as f64 / (n_interior + 1) as f64));
            knots.extend(vec![x + 1.0; degree + 1]);
            Ok(SplineBasis::from_knots(degree, knots)?)
        }
        other => Ok(other?),
    }
}

fn draw_truth(
    spec: &SyntheticSpec,
    n_spline: usize,
    graph: &AdjacencyGraph,
    rng: &mut ChaCha8Rng,
) -> Result<ParameterBlock<f64>> {
    let pr = &spec.priors;
    let sd = pr.scale_sd;
    let mut sigma_g = half_normal(rng, sd);
    let mut sigma_v = vec![half_normal(rng, sd), half_normal(rng, sd)];
    let mut sigma_eps = half_normal(rng, sd);
    let mut sigma_xi = half_normal(rng, sd);
    if let Some(inf) = &spec.inflate {
        let target = match inf.scale.as_str() {
            "sigma_g" => &mut sigma_g,
            "sigma_v1" => &mut sigma_v[0],
            "sigma_v2" => &mut sigma_v[1],
            "sigma_eps" => &mut sigma_eps,
            "sigma_xi" => &mut sigma_xi,
            other => return Err(SyntheticError::Spec(format!("unknown scale `{other}`"))),
        };
        *target *= inf.factor;
    }
    let phi = beta(rng, pr.phi_beta);
    let rho = beta(rng, pr.rho_beta);
    let c = normal_vec(rng, n_spline, sigma_g);
    let v = vec![
        normal_vec(rng, spec.n_brand, sigma_v[0]),
        normal_vec(rng, spec.n_category, sigma_v[1]),
    ];
    let gamma = normal_vec(rng, spec.n_covariates, pr.gamma_sd);
    let delta = normal_vec(rng, spec.n_cities, 1.0);
    let eta = sample_car_prior(graph, rho, rng)?;
    let xi = normal_vec(rng, spec.n_years - 1, sigma_xi);
    Ok(ParameterBlock {
        c,
        v,
        gamma,
        delta,
        eta,
        xi,
        sigma_g,
        sigma_v,
        sigma_eps,
        sigma_xi,
        phi,
        rho,
    })
}

/// Simulates a dataset. The same spec and seed give identical output.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [lat0, lat1, lon0, lon1] = spec.region;

    let j = spec.n_cities;
    let latitude: Vec<f64> = (0..j).map(|_| rng.random_range(lat0..lat1)).collect();
    let longitude: Vec<f64> = (0..j).map(|_| rng.random_range(lon0..lon1)).collect();
    let m = spec.n_covariates;
    let mut cities = CityTable {
        keys: (0..j)
            .map(|i| CityKey::new(&format!("city{i:05}"), Some("SY")))
            .collect(),
        latitude,
        longitude,
        covariate_names: (0..m).map(|i| format!("z{}", i + 1)).collect(),
        covariates: normal_vec(&mut rng, j * m, 1.0),
        scaling: None,
    };
    if m > 0 && j > 1 {
        cities.standardize().map_err(|e| SyntheticError::Spec(e.to_string()))?;
    }
    let graph = build_knn_graph(&cities.coordinates(), spec.k_neighbors)?;

    let n = spec.n_records;
    let exposure: Vec<f64> = match spec.exposure {
        ExposureSpec::LogNormal { mu, sigma } => {
            let d = Normal::new(mu, sigma).expect("validated");
            (0..n).map(|_| d.sample(&mut rng).exp()).collect()
        }
        ExposureSpec::Constant { value } => vec![value; n],
    };
    let pick = |rng: &mut ChaCha8Rng, i: usize, levels: usize| {
        if i < levels {
            i as u32
        } else {
            rng.random_range(0..levels as u32)
        }
    };
    let mut records = Vec::with_capacity(n);
    for (i, &alpha) in exposure.iter().enumerate() {
        let brand_id = pick(&mut rng, i, spec.n_brand);
        let category_id = pick(&mut rng, i, spec.n_category);
        let t = pick(&mut rng, i, spec.n_years);
        records.push(PolicyRecord {
            exposure: alpha,
            claim_count: 0,
            brand_id,
            category_id,
            city_id: rng.random_range(0..j as u32),
            vehicle_year: spec.year_floor + t as i32,
        });
    }

    let log_alpha: Vec<f64> = exposure.iter().map(|a| a.ln()).collect();
    let basis = exposure_basis(&log_alpha, spec.n_interior_knots, spec.spline_degree)?;
    let truth = match &spec.truth {
        TruthSpec::Prior => draw_truth(spec, basis.len(), &graph, &mut rng)?,
        TruthSpec::Fixed { parameters } => parameters.as_ref().clone(),
    };

    let mut dataset = Dataset {
        records,
        cities,
        brands: (0..spec.n_brand).map(|b| format!("brand{b:03}")).collect::<Levels<_>>(),
        categories: (0..spec.n_category)
            .map(|c| format!("type{c:02}"))
            .collect::<Levels<_>>(),
        year_floor: spec.year_floor,
        year_max: spec.year_floor + spec.n_years as i32 - 1,
        report: IngestReport {
            rows_read: n,
            rows_kept: n,
            n_brand: spec.n_brand,
            n_category: spec.n_category,
            n_city: j,
            year_floor: spec.year_floor,
            year_max: Some(spec.year_floor + spec.n_years as i32 - 1),
            ..Default::default()
        },
    };
    let options = ModelOptions {
        aggregate: false,
        ..Default::default()
    };
    let inputs: ModelInputs<f64> =
        ModelInputs::from_dataset(&dataset, &basis, graph.clone(), spec.priors.clone(), &options)?;
    let rates = inputs.predict_rates(&truth)?;
    for (r, &lam) in dataset.records.iter_mut().zip(&rates) {
        r.claim_count = if lam > 0.0 {
            let y: f64 = Poisson::new(lam)
                .map_err(|e| SyntheticError::Spec(format!("rate {lam}: {e}")))?
                .sample(&mut rng);
            if y > u32::MAX as f64 {
                return Err(SyntheticError::Spec(format!("simulated count {y} overflows")));
            }
            y as u32
        } else {
            0
        };
    }
    Ok(SyntheticData {
        dataset,
        truth,
        graph,
        basis,
        rates,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SyntheticError + '_ {
    move |source| SyntheticError::Io {
        path: path.into(),
        source,
    }
}

/// Writes the policy file in the default ingestion schema.
pub fn write_policies_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let label = |levels: &Levels<String>, i: u32| levels.decode(i).cloned().unwrap_or_default();
    writeln!(w, "exposure,claims,brand,vehicle_type,city,state,year").map_err(io_err(path))?;
    for r in &dataset.records {
        let city = dataset.cities.keys.decode(r.city_id).expect("valid city");
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.exposure,
            r.claim_count,
            label(&dataset.brands, r.brand_id),
            label(&dataset.categories, r.category_id),
            city.name,
            city.state.as_deref().unwrap_or(""),
            r.vehicle_year
        )
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the city covariate file in the default ingestion schema.
pub fn write_cities_csv(cities: &CityTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("city,state,latitude,longitude");
    for name in &cities.covariate_names {
        header.push(',');
        header.push_str(name);
    }
    writeln!(w, "{header}").map_err(io_err(path))?;
    for (j, key) in cities.keys.iter().enumerate() {
        let mut line = format!(
            "{},{},{},{}",
            key.name,
            key.state.as_deref().unwrap_or(""),
            cities.latitude[j],
            cities.longitude[j]
        );
        for z in cities.covariate_row(j) {
            line.push_str(&format!(",{z}"));
        }
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the ground truth as JSON.
pub fn write_truth_json(data: &SyntheticData, spec: &SyntheticSpec, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Truth<'a> {
        spec: &'a SyntheticSpec,
        parameters: &'a ParameterBlock<f64>,
        n_spline: usize,
        knots: &'a [f64],
    }
    let body = serde_json::to_string_pretty(&Truth {
        spec,
        parameters: &data.truth,
        n_spline: data.basis.len(),
        knots: data.basis.knots(),
    })
    .expect("serializable");
    std::fs::write(path, body).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::ModelDims;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_records: 4000,
            n_cities: 20,
            n_years: 6,
            seed: 3,
            ..Default::default()
        }
    }

    fn dims_of(spec: &SyntheticSpec, n_spline: usize) -> ModelDims {
        ModelDims {
            n_spline,
            factor_levels: vec![spec.n_brand, spec.n_category],
            n_covariates: spec.n_covariates,
            n_cities: spec.n_cities,
            n_years: spec.n_years,
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
        let mut other = small();
        other.seed = 4;
        assert_ne!(generate(&other).unwrap().dataset, a.dataset);
    }

    #[test]
    fn unit_rate_when_effects_vanish() {
        let mut spec = small();
        spec.n_records = 40_000;
        spec.exposure = ExposureSpec::Constant { value: 1.0 };
        let dims = dims_of(&spec, spec.n_interior_knots + spec.spline_degree + 1);
        spec.truth = TruthSpec::Fixed {
            parameters: Box::new(ParameterBlock::neutral(&dims)),
        };
        let data = generate(&spec).unwrap();
        assert!(data.rates.iter().all(|&l| (l - 1.0).abs() < 1e-12));
        let n = spec.n_records as f64;
        let mean = data.dataset.records.iter().map(|r| r.claim_count as f64).sum::<f64>() / n;
        assert!((mean - 1.0).abs() < 3.0 / n.sqrt(), "{mean}");
    }

    #[test]
    fn fixed_category_effect_doubles_rate() {
        let mut spec = small();
        spec.n_records = 60_000;
        let dims = dims_of(&spec, spec.n_interior_knots + spec.spline_degree + 1);
        let mut p = ParameterBlock::neutral(&dims);
        p.sigma_g = 0.0;
        p.sigma_v = vec![0.0, 0.0];
        p.sigma_eps = 0.0;
        p.sigma_xi = 0.0;
        p.v[1][2] = 2f64.ln();
        spec.truth = TruthSpec::Fixed {
            parameters: Box::new(p),
        };
        let data = generate(&spec).unwrap();
        let (mut y2, mut e2, mut yo, mut eo) = (0.0, 0.0, 0.0, 0.0);
        for r in &data.dataset.records {
            if r.category_id == 2 {
                y2 += r.claim_count as f64;
                e2 += r.exposure;
            } else {
                yo += r.claim_count as f64;
                eo += r.exposure;
            }
        }
        let ratio = (y2 / e2) / (yo / eo);
        assert!((ratio - 2.0).abs() < 0.15, "{ratio}");
    }

    #[test]
    fn simulated_mean_tracks_rates() {
        let data = generate(&small()).unwrap();
        let n = data.rates.len() as f64;
        let sum_lam: f64 = data.rates.iter().sum();
        let sum_y: f64 = data.dataset.records.iter().map(|r| r.claim_count as f64).sum();
        assert!(((sum_y - sum_lam) / n).abs() <= 3.0 * sum_lam.sqrt() / n);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small();
        spec.n_records = 0;
        assert!(matches!(generate(&spec), Err(SyntheticError::Spec(_))));
        let mut spec = small();
        spec.k_neighbors = spec.n_cities;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn csv_round_trip_through_ingestion() {
        use crate::data::{ingest_city_covariates, ingest_policies, CityColumns, ColumnMapping, IngestOptions};
        let data = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pp, cp) = (dir.path().join("p.csv"), dir.path().join("c.csv"));
        write_policies_csv(&data.dataset, &pp).unwrap();
        write_cities_csv(&data.dataset.cities, &cp).unwrap();
        let pol = ingest_policies(&pp, &ColumnMapping::default(), &IngestOptions::default()).unwrap();
        let cities = ingest_city_covariates(&cp, &CityColumns::default(), true).unwrap();
        let ds = Dataset::new(pol, cities).unwrap();
        assert_eq!(ds.records, data.dataset.records);
        assert_eq!(ds.brands, data.dataset.brands);
        assert_eq!(ds.n_years(), data.dataset.n_years());
        for (a, b) in ds.cities.covariates.iter().zip(&data.dataset.cities.covariates) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
