//! Policy and city-covariate ingestion.
//!
//! Policies are read from a headed CSV through a [`ColumnMapping`]. Rows are
//! filtered in a fixed order (vehicle year below the floor, zero exposure,
//! missing vehicle type) and each dropped row is charged to the first rule
//! it fails. Categorical levels get dense indices in first-appearance order.
//! City identity is the `(name, state)` pair; city ids in a [`Dataset`]
//! follow the row order of the [`CityTable`].

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::Read;
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("CSV error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}, line {line}: {message}")]
    Row { path: PathBuf, line: u64, message: String },
    #[error("{path}: duplicate city `{city}` (line {line})")]
    DuplicateCity { path: PathBuf, city: String, line: u64 },
    #[error("covariate column `{0}` is constant and cannot be standardized")]
    ConstantColumn(String),
    #[error("city `{0}` referenced by a policy has no row in the city table")]
    UnknownCity(String),
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Names of the policy CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMapping {
    pub exposure: String,
    pub claims: String,
    pub brand: String,
    pub vehicle_type: String,
    /// Raw model column, looked up in the vehicle map when one is supplied.
    pub model: Option<String>,
    pub city: String,
    pub state: Option<String>,
    pub year: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            exposure: "exposure".into(),
            claims: "claims".into(),
            brand: "brand".into(),
            vehicle_type: "vehicle_type".into(),
            model: None,
            city: "city".into(),
            state: Some("state".into()),
            year: "year".into(),
        }
    }
}

/// Names of the city covariate CSV columns. When `covariates` is `None`
/// every column other than the key and coordinate columns is a covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CityColumns {
    pub city: String,
    pub state: Option<String>,
    pub latitude: String,
    pub longitude: String,
    pub covariates: Option<Vec<String>>,
}

impl Default for CityColumns {
    fn default() -> Self {
        Self {
            city: "city".into(),
            state: Some("state".into()),
            latitude: "latitude".into(),
            longitude: "longitude".into(),
            covariates: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedRows {
    #[default]
    Abort,
    Drop,
}

/// Table-driven vehicle classification: raw model string to vehicle type,
/// optionally also to brand.
#[derive(Debug, Clone, Default)]
pub struct VehicleMap {
    entries: HashMap<String, (String, Option<String>)>,
}

impl VehicleMap {
    pub fn insert(&mut self, model: &str, vehicle_type: &str, brand: Option<&str>) {
        self.entries.insert(
            model.trim().to_string(),
            (vehicle_type.trim().to_string(), brand.map(|b| b.trim().to_string())),
        );
    }

    pub fn get(&self, model: &str) -> Option<(&str, Option<&str>)> {
        self.entries.get(model.trim()).map(|(t, b)| (t.as_str(), b.as_deref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a headed CSV with columns `model,vehicle_type[,brand]`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = open_csv(path)?;
        let headers = headers(&mut rdr, path)?;
        let model = column_index(&headers, "model", path)?;
        let vtype = column_index(&headers, "vehicle_type", path)?;
        let brand = headers.iter().position(|h| h == "brand");
        let mut map = Self::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|source| DataError::Csv {
                path: path.into(),
                source,
            })?;
            let b = brand.and_then(|i| rec.get(i)).filter(|s| !s.trim().is_empty());
            map.insert(&rec[model], &rec[vtype], b);
        }
        Ok(map)
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub year_floor: i32,
    pub malformed: MalformedRows,
    pub vehicle_map: Option<VehicleMap>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            year_floor: 1971,
            malformed: MalformedRows::Abort,
            vehicle_map: None,
        }
    }
}

/// Dense, insertion-ordered encoding of categorical levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Levels<K: Hash + Eq> {
    set: IndexSet<K>,
}

impl<K: Hash + Eq> Default for Levels<K> {
    fn default() -> Self {
        Self { set: IndexSet::new() }
    }
}

impl<K: Hash + Eq + Clone> Levels<K> {
    /// Index of `level`, assigning the next index on first sight.
    pub fn encode(&mut self, level: K) -> u32 {
        self.set.insert_full(level).0 as u32
    }

    pub fn index_of(&self, level: &K) -> Option<u32> {
        self.set.get_index_of(level).map(|i| i as u32)
    }

    pub fn decode(&self, index: u32) -> Option<&K> {
        self.set.get_index(index as usize)
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &K> {
        self.set.iter()
    }
}

impl<K: Hash + Eq> FromIterator<K> for Levels<K> {
    fn from_iter<I: IntoIterator<Item = K>>(iter: I) -> Self {
        Self {
            set: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CityKey {
    pub name: String,
    pub state: Option<String>,
}

impl CityKey {
    pub fn new(name: &str, state: Option<&str>) -> Self {
        Self {
            name: name.trim().to_string(),
            state: state.map(|s| s.trim().to_string()).filter(|s| !s.is_empty()),
        }
    }
}

impl std::fmt::Display for CityKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.state {
            Some(s) => write!(f, "{}, {}", self.name, s),
            None => f.write_str(&self.name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    /// Policy-years at risk, strictly positive.
    pub exposure: f64,
    pub claim_count: u32,
    pub brand_id: u32,
    pub category_id: u32,
    pub city_id: u32,
    pub vehicle_year: i32,
}

/// Row accounting for one ingestion. `rows_read` equals `rows_kept` plus
/// every drop counter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub dropped_before_year_floor: usize,
    pub dropped_zero_exposure: usize,
    pub dropped_missing_vehicle_type: usize,
    pub dropped_malformed: usize,
    pub n_brand: usize,
    pub n_category: usize,
    pub n_city: usize,
    pub year_floor: i32,
    pub year_max: Option<i32>,
}

impl IngestReport {
    pub fn total_dropped(&self) -> usize {
        self.dropped_before_year_floor
            + self.dropped_zero_exposure
            + self.dropped_missing_vehicle_type
            + self.dropped_malformed
    }
}

/// Encoded policies before they are joined to a city table. `city_id`
/// indexes `cities` here.
#[derive(Debug, Clone)]
pub struct PolicyTable {
    pub records: Vec<PolicyRecord>,
    pub brands: Levels<String>,
    pub categories: Levels<String>,
    pub cities: Levels<CityKey>,
    pub report: IngestReport,
}

fn open_csv(path: &Path) -> Result<csv::Reader<Box<dyn Read>>> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.into(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(Box::new(std::io::BufReader::new(file)) as Box<dyn Read>))
}

fn headers(rdr: &mut csv::Reader<Box<dyn Read>>, path: &Path) -> Result<Vec<String>> {
    Ok(rdr
        .headers()
        .map_err(|source| DataError::Csv {
            path: path.into(),
            source,
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect())
}

fn column_index(headers: &[String], name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::MissingColumn {
            path: path.into(),
            column: name.to_string(),
        })
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

enum RowOutcome {
    Keep(RawRow),
    PreFloor,
    ZeroExposure,
    MissingType,
}

struct RawRow {
    exposure: f64,
    claims: u32,
    brand: String,
    vehicle_type: String,
    city: CityKey,
    year: i32,
}

struct PolicyColumns {
    exposure: usize,
    claims: usize,
    brand: Option<usize>,
    vehicle_type: Option<usize>,
    model: Option<usize>,
    city: usize,
    state: Option<usize>,
    year: usize,
}

fn parse_year(s: &str) -> Result<i32, String> {
    let t = s.trim();
    t.parse::<i32>()
        .or_else(|_| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0 && v.abs() < 1e6)
                .map(|v| v as i32)
                .ok_or(())
        })
        .map_err(|_| format!("unparseable vehicle year `{s}`"))
}

fn parse_exposure(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("unparseable exposure `{s}`"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("invalid exposure `{s}`"));
    }
    Ok(v)
}

fn parse_count(s: &str) -> Result<u32, String> {
    let t = s.trim();
    if let Ok(v) = t.parse::<u32>() {
        return Ok(v);
    }
    match t.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => Ok(v as u32),
        _ => Err(format!("invalid claim count `{s}`")),
    }
}

fn classify_row(rec: &csv::StringRecord, cols: &PolicyColumns, opts: &IngestOptions) -> Result<RowOutcome, String> {
    let year = parse_year(&rec[cols.year])?;
    if year < opts.year_floor {
        return Ok(RowOutcome::PreFloor);
    }
    let exposure = parse_exposure(&rec[cols.exposure])?;
    if exposure == 0.0 {
        return Ok(RowOutcome::ZeroExposure);
    }
    let mapped_brand;
    let vehicle_type = match (&opts.vehicle_map, cols.model) {
        (Some(map), Some(model_col)) => match map.get(&rec[model_col]) {
            Some((vt, brand)) if !vt.is_empty() => {
                mapped_brand = brand.map(str::to_string);
                vt.to_string()
            }
            _ => return Ok(RowOutcome::MissingType),
        },
        _ => {
            mapped_brand = None;
            let vt = rec[cols.vehicle_type.expect("checked at header time")].trim();
            if vt.is_empty() {
                return Ok(RowOutcome::MissingType);
            }
            vt.to_string()
        }
    };
    let claims = parse_count(&rec[cols.claims])?;
    let brand = match mapped_brand {
        Some(b) => b,
        None => {
            let col = cols
                .brand
                .ok_or_else(|| "no brand column and the vehicle map has no brand".to_string())?;
            rec[col].trim().to_string()
        }
    };
    if brand.is_empty() {
        return Err("empty brand".into());
    }
    let city_name = rec[cols.city].trim();
    if city_name.is_empty() {
        return Err("empty city".into());
    }
    let city = CityKey::new(city_name, cols.state.map(|i| &rec[i]));
    Ok(RowOutcome::Keep(RawRow {
        exposure,
        claims,
        brand,
        vehicle_type,
        city,
        year,
    }))
}

/// Reads and filters the policy file.
pub fn ingest_policies(path: &Path, schema: &ColumnMapping, opts: &IngestOptions) -> Result<PolicyTable> {
    let mut rdr = open_csv(path)?;
    let hdr = headers(&mut rdr, path)?;
    let req = |name: &str| column_index(&hdr, name, path);
    let uses_map = opts.vehicle_map.is_some();
    let cols = PolicyColumns {
        exposure: req(&schema.exposure)?,
        claims: req(&schema.claims)?,
        brand: if uses_map {
            hdr.iter().position(|h| *h == schema.brand)
        } else {
            Some(req(&schema.brand)?)
        },
        vehicle_type: if uses_map {
            None
        } else {
            Some(req(&schema.vehicle_type)?)
        },
        model: if uses_map {
            let name = schema
                .model
                .as_deref()
                .ok_or_else(|| DataError::Invalid("a vehicle map requires `model` in the column mapping".into()))?;
            Some(req(name)?)
        } else {
            None
        },
        city: req(&schema.city)?,
        state: schema.state.as_deref().map(req).transpose()?,
        year: req(&schema.year)?,
    };

    let mut report = IngestReport {
        year_floor: opts.year_floor,
        ..Default::default()
    };
    let mut brands = Levels::default();
    let mut categories = Levels::default();
    let mut cities = Levels::default();
    let mut records = Vec::new();

    for rec in rdr.records() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: path.into(),
            source,
        })?;
        report.rows_read += 1;
        match classify_row(&rec, &cols, opts) {
            Ok(RowOutcome::PreFloor) => report.dropped_before_year_floor += 1,
            Ok(RowOutcome::ZeroExposure) => report.dropped_zero_exposure += 1,
            Ok(RowOutcome::MissingType) => report.dropped_missing_vehicle_type += 1,
            Ok(RowOutcome::Keep(row)) => {
                report.year_max = Some(report.year_max.map_or(row.year, |y| y.max(row.year)));
                records.push(PolicyRecord {
                    exposure: row.exposure,
                    claim_count: row.claims,
                    brand_id: brands.encode(row.brand),
                    category_id: categories.encode(row.vehicle_type),
                    city_id: cities.encode(row.city),
                    vehicle_year: row.year,
                });
            }
            Err(message) => match opts.malformed {
                MalformedRows::Abort => {
                    return Err(DataError::Row {
                        path: path.into(),
                        line: line_of(&rec),
                        message,
                    })
                }
                MalformedRows::Drop => {
                    log::debug!("{}:{}: dropped: {message}", path.display(), line_of(&rec));
                    report.dropped_malformed += 1;
                }
            },
        }
    }
    report.rows_kept = records.len();
    report.n_brand = brands.len();
    report.n_category = categories.len();
    report.n_city = cities.len();
    Ok(PolicyTable {
        records,
        brands,
        categories,
        cities,
        report,
    })
}

/// Per-column shift and scale applied by standardization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityTable {
    pub keys: Levels<CityKey>,
    pub latitude: Vec<f64>,
    pub longitude: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// Row-major `J x M`.
    pub covariates: Vec<f64>,
    pub scaling: Option<Vec<ColumnScaling>>,
}

impl CityTable {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_row(&self, j: usize) -> &[f64] {
        let m = self.n_covariates();
        &self.covariates[j * m..(j + 1) * m]
    }

    pub fn column(&self, m: usize) -> impl Iterator<Item = f64> + '_ {
        let stride = self.n_covariates();
        self.covariates.iter().skip(m).step_by(stride.max(1)).copied()
    }

    pub fn coordinates(&self) -> Vec<[f64; 2]> {
        self.latitude
            .iter()
            .zip(&self.longitude)
            .map(|(&la, &lo)| [la, lo])
            .collect()
    }

    /// Shifts and scales every covariate column to mean 0 and sample
    /// variance 1.
    pub fn standardize(&mut self) -> Result<()> {
        let m = self.n_covariates();
        let n = self.len();
        if n < 2 {
            return Err(DataError::Invalid("standardization needs at least two cities".into()));
        }
        let mut scaling = Vec::with_capacity(m);
        for col in 0..m {
            let mean = self.column(col).sum::<f64>() / n as f64;
            let ss: f64 = self.column(col).map(|v| (v - mean) * (v - mean)).sum();
            let sd = (ss / (n - 1) as f64).sqrt();
            if !(sd > 0.0) || sd <= 1e-12 * mean.abs().max(1.0) {
                return Err(DataError::ConstantColumn(self.covariate_names[col].clone()));
            }
            scaling.push(ColumnScaling { mean, sd });
        }
        for row in self.covariates.chunks_mut(m.max(1)) {
            for (v, s) in row.iter_mut().zip(&scaling) {
                *v = (*v - s.mean) / s.sd;
            }
        }
        self.scaling = Some(scaling);
        Ok(())
    }
}

/// Reads the city covariate file. Missing covariate cells are rejected.
pub fn ingest_city_covariates(path: &Path, columns: &CityColumns, standardize: bool) -> Result<CityTable> {
    let mut rdr = open_csv(path)?;
    let hdr = headers(&mut rdr, path)?;
    let req = |name: &str| column_index(&hdr, name, path);
    let city = req(&columns.city)?;
    let state = columns.state.as_deref().map(req).transpose()?;
    let lat = req(&columns.latitude)?;
    let lon = req(&columns.longitude)?;
    let cov_idx: Vec<usize> = match &columns.covariates {
        Some(names) => names.iter().map(|n| req(n)).collect::<Result<_>>()?,
        None => (0..hdr.len())
            .filter(|&i| i != city && Some(i) != state && i != lat && i != lon)
            .collect(),
    };
    let covariate_names = cov_idx.iter().map(|&i| hdr[i].clone()).collect();

    let mut table = CityTable {
        keys: Levels::default(),
        latitude: Vec::new(),
        longitude: Vec::new(),
        covariate_names,
        covariates: Vec::new(),
        scaling: None,
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: path.into(),
            source,
        })?;
        let line = line_of(&rec);
        let row_err = |message: String| DataError::Row {
            path: path.into(),
            line,
            message,
        };
        let key = CityKey::new(&rec[city], state.map(|i| &rec[i]));
        if key.name.is_empty() {
            return Err(row_err("empty city name".into()));
        }
        if table.keys.index_of(&key).is_some() {
            return Err(DataError::DuplicateCity {
                path: path.into(),
                city: key.to_string(),
                line,
            });
        }
        let num = |i: usize| -> Result<f64> {
            let cell = rec[i].trim();
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(row_err(format!(
                    "column `{}`: missing or non-numeric value `{cell}`",
                    hdr[i]
                ))),
            }
        };
        table.latitude.push(num(lat)?);
        table.longitude.push(num(lon)?);
        for &i in &cov_idx {
            table.covariates.push(num(i)?);
        }
        table.keys.encode(key);
    }
    if table.is_empty() {
        return Err(DataError::Empty);
    }
    if standardize {
        table.standardize()?;
    }
    Ok(table)
}

/// Policies joined to their city table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<PolicyRecord>,
    pub cities: CityTable,
    pub brands: Levels<String>,
    pub categories: Levels<String>,
    pub year_floor: i32,
    pub year_max: i32,
    pub report: IngestReport,
}

impl Dataset {
    /// Re-indexes policy cities onto the city table's row order.
    pub fn new(policies: PolicyTable, cities: CityTable) -> Result<Self> {
        if policies.records.is_empty() {
            return Err(DataError::Empty);
        }
        let remap: Vec<u32> = policies
            .cities
            .iter()
            .map(|k| {
                cities
                    .keys
                    .index_of(k)
                    .ok_or_else(|| DataError::UnknownCity(k.to_string()))
            })
            .collect::<Result<_>>()?;
        let mut records = policies.records;
        for r in &mut records {
            r.city_id = remap[r.city_id as usize];
        }
        let year_max = records.iter().map(|r| r.vehicle_year).max().unwrap_or(0);
        Ok(Self {
            records,
            cities,
            brands: policies.brands,
            categories: policies.categories,
            year_floor: policies.report.year_floor,
            year_max,
            report: policies.report,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_brand(&self) -> usize {
        self.brands.len()
    }

    pub fn n_category(&self) -> usize {
        self.categories.len()
    }

    pub fn n_city(&self) -> usize {
        self.cities.len()
    }

    /// Number of years in `[year_floor, year_max]`.
    pub fn n_years(&self) -> usize {
        (self.year_max - self.year_floor + 1).max(1) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (nb, nc, nj) = (self.n_brand(), self.n_category(), self.n_city());
        for (i, r) in self.records.iter().enumerate() {
            let ok = r.exposure > 0.0
                && r.exposure.is_finite()
                && (r.brand_id as usize) < nb
                && (r.category_id as usize) < nc
                && (r.city_id as usize) < nj
                && r.vehicle_year >= self.year_floor
                && r.vehicle_year <= self.year_max;
            if !ok {
                return Err(DataError::Invalid(format!("record {i} violates dataset invariants")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCount {
    pub level: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_records: usize,
    pub total_exposure: f64,
    pub total_claims: u64,
    pub zero_claim_fraction: f64,
    /// Index = claim count.
    pub claim_histogram: Vec<usize>,
    pub exposure_quantiles: BTreeMap<String, f64>,
    pub brand_counts: Vec<LevelCount>,
    pub category_counts: Vec<LevelCount>,
    pub year_counts: BTreeMap<i32, usize>,
}

const SUMMARY_QUANTILES: [f64; 9] = [0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 1.0];

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summarize(dataset: &Dataset) -> DatasetSummary {
    let n = dataset.len();
    let mut hist = Vec::<usize>::new();
    let mut brand = vec![0usize; dataset.n_brand()];
    let mut category = vec![0usize; dataset.n_category()];
    let mut years = BTreeMap::new();
    let mut zeros = 0usize;
    let mut total_claims = 0u64;
    for r in &dataset.records {
        let c = r.claim_count as usize;
        if hist.len() <= c {
            hist.resize(c + 1, 0);
        }
        hist[c] += 1;
        zeros += (c == 0) as usize;
        total_claims += c as u64;
        brand[r.brand_id as usize] += 1;
        category[r.category_id as usize] += 1;
        *years.entry(r.vehicle_year).or_insert(0) += 1;
    }
    let mut exposures: Vec<f64> = dataset.records.iter().map(|r| r.exposure).collect();
    exposures.sort_by(f64::total_cmp);
    let exposure_quantiles = if n == 0 {
        BTreeMap::new()
    } else {
        SUMMARY_QUANTILES
            .iter()
            .map(|&q| {
                (
                    format!("q{:02}", (q * 100.0).round() as u32),
                    quantile_sorted(&exposures, q),
                )
            })
            .collect()
    };
    let counts = |levels: &Levels<String>, counts: Vec<usize>| {
        levels
            .iter()
            .zip(counts)
            .map(|(l, count)| LevelCount {
                level: l.clone(),
                count,
            })
            .collect()
    };
    DatasetSummary {
        n_records: n,
        total_exposure: exposures.iter().sum(),
        total_claims,
        zero_claim_fraction: if n == 0 { 0.0 } else { zeros as f64 / n as f64 },
        claim_histogram: hist,
        exposure_quantiles,
        brand_counts: counts(&dataset.brands, brand),
        category_counts: counts(&dataset.categories, category),
        year_counts: years,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const CITIES: &str = "city,state,latitude,longitude,pop,rain\n\
                          A,SP,-23.5,-46.6,10,1\n\
                          B,SP,-22.9,-47.0,20,2\n\
                          C,RJ,-22.9,-43.2,30,3\n";

    #[test]
    fn zero_exposure_row_is_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.csv",
            "exposure,claims,brand,vehicle_type,city,state,year\n\
             0.5,0,VW,compact,A,SP,2005\n\
             0,1,Kia,sedan,B,SP,2001\n\
             1.0,2,VW,sedan,C,RJ,1999\n",
        );
        let t = ingest_policies(&p, &ColumnMapping::default(), &IngestOptions::default()).unwrap();
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.report.dropped_zero_exposure, 1);
        assert_eq!(t.report.rows_read, 3);
        assert_eq!(t.report.rows_kept + t.report.total_dropped(), t.report.rows_read);
    }

    #[test]
    fn filter_precedence_charges_first_rule() {
        let dir = tempfile::tempdir().unwrap();
        // Row 1 fails year and exposure and type: counted as year.
        // Row 2 fails exposure and type: counted as exposure.
        let p = write(
            dir.path(),
            "p.csv",
            "exposure,claims,brand,vehicle_type,city,state,year\n\
             0,0,VW,,A,SP,1960\n\
             0,0,VW,,A,SP,1990\n\
             0.3,0,VW,,A,SP,1990\n\
             0.3,0,VW,suv,A,SP,1990\n",
        );
        let t = ingest_policies(&p, &ColumnMapping::default(), &IngestOptions::default()).unwrap();
        let r = &t.report;
        assert_eq!(r.dropped_before_year_floor, 1);
        assert_eq!(r.dropped_zero_exposure, 1);
        assert_eq!(r.dropped_missing_vehicle_type, 1);
        assert_eq!(r.rows_kept, 1);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.csv",
            "exposure,claims,brand,city,state,year\n1,0,a,b,c,2000\n",
        );
        let err = ingest_policies(&p, &ColumnMapping::default(), &IngestOptions::default()).unwrap_err();
        match err {
            DataError::MissingColumn { column, .. } => assert_eq!(column, "vehicle_type"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_rows_abort_with_line_or_drop() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.csv",
            "exposure,claims,brand,vehicle_type,city,state,year\n\
             0.5,0,VW,compact,A,SP,2005\n\
             abc,0,VW,compact,A,SP,2005\n",
        );
        let err = ingest_policies(&p, &ColumnMapping::default(), &IngestOptions::default()).unwrap_err();
        match err {
            DataError::Row { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        let opts = IngestOptions {
            malformed: MalformedRows::Drop,
            ..Default::default()
        };
        let t = ingest_policies(&p, &ColumnMapping::default(), &opts).unwrap();
        assert_eq!(t.report.dropped_malformed, 1);
        assert_eq!(t.records.len(), 1);
    }

    #[test]
    fn vehicle_map_drives_type_and_brand() {
        let dir = tempfile::tempdir().unwrap();
        let map = write(
            dir.path(),
            "map.csv",
            "model,vehicle_type,brand\nGOL 1.0,compact,VW\nF-150,pickup,Ford\n",
        );
        let p = write(
            dir.path(),
            "p.csv",
            "exposure,claims,modelo,city,state,year\n\
             0.5,0,GOL 1.0,A,SP,2005\n\
             0.5,1,UNKNOWN,A,SP,2005\n\
             0.7,0,F-150,B,SP,2008\n",
        );
        let schema = ColumnMapping {
            model: Some("modelo".into()),
            ..Default::default()
        };
        let opts = IngestOptions {
            vehicle_map: Some(VehicleMap::from_csv(&map).unwrap()),
            ..Default::default()
        };
        let t = ingest_policies(&p, &schema, &opts).unwrap();
        assert_eq!(t.report.dropped_missing_vehicle_type, 1);
        assert_eq!(t.brands.decode(1).unwrap(), "Ford");
        assert_eq!(t.categories.decode(0).unwrap(), "compact");
    }

    #[test]
    fn levels_follow_first_appearance_and_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let brands: Vec<String> = (0..7).map(|i| format!("brand-{i}")).collect();
        let mut body = String::from("exposure,claims,brand,vehicle_type,city,state,year\n");
        let mut rows = Vec::new();
        for _ in 0..100 {
            let b = brands[rng.random_range(0..brands.len())].clone();
            let t = format!("type{}", rng.random_range(0..4));
            body.push_str(&format!("0.4,1,{b},{t},A,SP,2000\n"));
            rows.push((b, t));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", &body);
        let t = ingest_policies(&p, &ColumnMapping::default(), &IngestOptions::default()).unwrap();
        let mut expected: Vec<String> = Vec::new();
        for (b, _) in &rows {
            if !expected.contains(b) {
                expected.push(b.clone());
            }
        }
        let got: Vec<String> = t.brands.iter().cloned().collect();
        assert_eq!(got, expected);
        for (rec, (b, ty)) in t.records.iter().zip(&rows) {
            assert_eq!(t.brands.decode(rec.brand_id).unwrap(), b);
            assert_eq!(t.categories.decode(rec.category_id).unwrap(), ty);
        }
    }

    #[test]
    fn ingestion_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.csv",
            "exposure,claims,brand,vehicle_type,city,state,year\n\
             0.5,0,VW,compact,A,SP,2005\n1.5,3,Fiat,suv,C,RJ,2011\n",
        );
        let c = write(dir.path(), "c.csv", CITIES);
        let load = || {
            let t = ingest_policies(&p, &ColumnMapping::default(), &IngestOptions::default()).unwrap();
            let cities = ingest_city_covariates(&c, &CityColumns::default(), true).unwrap();
            serde_json::to_vec(&Dataset::new(t, cities).unwrap()).unwrap()
        };
        assert_eq!(load(), load());
    }

    #[test]
    fn city_standardization_and_join() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "c.csv", CITIES);
        let cities = ingest_city_covariates(&c, &CityColumns::default(), true).unwrap();
        assert_eq!(cities.n_covariates(), 2);
        let pop: Vec<f64> = cities.column(0).collect();
        for (got, want) in pop.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let p = write(
            dir.path(),
            "p.csv",
            "exposure,claims,brand,vehicle_type,city,state,year\n\
             0.5,0,VW,compact,C,RJ,2005\n1.5,3,Fiat,suv,A,SP,2011\n",
        );
        let t = ingest_policies(&p, &ColumnMapping::default(), &IngestOptions::default()).unwrap();
        let ds = Dataset::new(t, cities).unwrap();
        assert_eq!(ds.records[0].city_id, 2);
        assert_eq!(ds.records[1].city_id, 0);
        assert_eq!(ds.n_years(), 2011 - 1971 + 1);
        ds.validate().unwrap();
    }

    #[test]
    fn unknown_city_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "c.csv", CITIES);
        let p = write(
            dir.path(),
            "p.csv",
            "exposure,claims,brand,vehicle_type,city,state,year\n0.5,0,VW,compact,Z,SP,2005\n",
        );
        let t = ingest_policies(&p, &ColumnMapping::default(), &IngestOptions::default()).unwrap();
        let cities = ingest_city_covariates(&c, &CityColumns::default(), false).unwrap();
        assert!(matches!(Dataset::new(t, cities), Err(DataError::UnknownCity(_))));
    }

    #[test]
    fn duplicate_city_and_constant_column_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dup = write(
            dir.path(),
            "d.csv",
            "city,state,latitude,longitude,x\nA,SP,0,0,1\nA,SP,1,1,2\n",
        );
        assert!(matches!(
            ingest_city_covariates(&dup, &CityColumns::default(), false),
            Err(DataError::DuplicateCity { .. })
        ));
        let constant = write(
            dir.path(),
            "k.csv",
            "city,state,latitude,longitude,x,flat\nA,SP,0,0,1,5\nB,SP,1,1,2,5\n",
        );
        match ingest_city_covariates(&constant, &CityColumns::default(), true) {
            Err(DataError::ConstantColumn(c)) => assert_eq!(c, "flat"),
            other => panic!("unexpected {other:?}"),
        }
        let missing = write(dir.path(), "m.csv", "city,state,latitude,longitude,x\nA,SP,0,0,\n");
        assert!(matches!(
            ingest_city_covariates(&missing, &CityColumns::default(), false),
            Err(DataError::Row { line: 2, .. })
        ));
    }

    #[test]
    fn random_matrix_standardizes_to_zero_mean_unit_variance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut t = CityTable {
            keys: (0..50).map(|i| CityKey::new(&i.to_string(), None)).collect(),
            latitude: vec![0.0; 50],
            longitude: vec![0.0; 50],
            covariate_names: (0..4).map(|i| format!("z{i}")).collect(),
            covariates: (0..200).map(|_| rng.random_range(-10.0..50.0)).collect(),
            scaling: None,
        };
        t.standardize().unwrap();
        for m in 0..4 {
            let col: Vec<f64> = t.column(m).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 49.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    fn tiny_dataset(claims: &[u32]) -> Dataset {
        let records = claims
            .iter()
            .map(|&c| PolicyRecord {
                exposure: 1.0,
                claim_count: c,
                brand_id: 0,
                category_id: 0,
                city_id: 0,
                vehicle_year: 2000,
            })
            .collect();
        Dataset {
            records,
            cities: CityTable {
                keys: [CityKey::new("A", None)].into_iter().collect(),
                latitude: vec![0.0],
                longitude: vec![0.0],
                covariate_names: vec![],
                covariates: vec![],
                scaling: None,
            },
            brands: ["b".to_string()].into_iter().collect(),
            categories: ["c".to_string()].into_iter().collect(),
            year_floor: 1971,
            year_max: 2000,
            report: IngestReport::default(),
        }
    }

    #[test]
    fn summary_of_all_zero_claims() {
        let s = summarize(&tiny_dataset(&[0; 10]));
        assert_eq!(s.zero_claim_fraction, 1.0);
        assert_eq!(s.claim_histogram, vec![10]);
        assert_eq!(s.brand_counts[0].count, 10);
    }

    #[test]
    fn summary_zero_fraction_matches_poisson_mass() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Poisson};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let pois = Poisson::new(0.1).unwrap();
        let claims: Vec<u32> = (0..100_000).map(|_| pois.sample(&mut rng) as u32).collect();
        let s = summarize(&tiny_dataset(&claims));
        assert!((s.zero_claim_fraction - (-0.1f64).exp()).abs() < 0.01);
    }

    /// Runs against the real brvehins2-derived extract when it is available.
    #[test]
    #[ignore]
    fn real_data_drop_counts() {
        let Ok(path) = std::env::var("CLAIMFREQ_POLICIES") else {
            return;
        };
        let t = ingest_policies(Path::new(&path), &ColumnMapping::default(), &IngestOptions::default()).unwrap();
        assert_eq!(t.report.dropped_before_year_floor, 944);
        assert_eq!(t.report.dropped_zero_exposure, 8_346);
        assert_eq!(t.report.dropped_missing_vehicle_type, 141_004);
    }
}
