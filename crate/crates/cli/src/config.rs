//! Run configuration: one TOML file, with `--set key.path=value` overrides
//! applied before validation. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use claimfreq::data::{CityColumns, ColumnMapping, MalformedRows};
use claimfreq::posterior::{ModelOptions, PriorSettings};
use claimfreq::sampler::{SamplerConfig, SamplerKind, ScalingSettings};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub policies: Option<PathBuf>,
    pub cities: Option<PathBuf>,
    /// Optional model-to-vehicle-type table.
    pub vehicle_map: Option<PathBuf>,
    pub columns: ColumnMapping,
    pub city_columns: CityColumns,
    pub year_floor: i32,
    pub malformed: MalformedRows,
    pub standardize_covariates: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            policies: None,
            cities: None,
            vehicle_map: None,
            columns: ColumnMapping::default(),
            city_columns: CityColumns::default(),
            year_floor: 1971,
            malformed: MalformedRows::Abort,
            standardize_covariates: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplineConfig {
    pub n_interior_knots: usize,
    pub degree: usize,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            n_interior_knots: 7,
            degree: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialConfig {
    pub k_neighbors: usize,
    /// Directory for the adjacency graph cache; no caching when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub rhat_max: f64,
    pub ess_min: f64,
    /// Exit with status 2 when the convergence gate fails.
    pub fail_on_gate: bool,
    pub calibration_bins: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            rhat_max: 1.10,
            ess_min: 35.0,
            fail_on_gate: true,
            calibration_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repeats: usize,
    pub scaling: ScalingSettings,
    pub kinds: Vec<SamplerKind>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repeats: 100,
            scaling: ScalingSettings::default(),
            kinds: vec![SamplerKind::Rwm, SamplerKind::Mala, SamplerKind::Nuts],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; also seeds the sampler.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub spline: SplineConfig,
    pub spatial: SpatialConfig,
    pub priors: PriorSettings,
    pub model: ModelOptions,
    pub sampler: SamplerConfig,
    pub diagnostics: DiagnosticsConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("claimfreq-out"),
            data: DataConfig::default(),
            spline: SplineConfig::default(),
            spatial: SpatialConfig::default(),
            priors: PriorSettings::default(),
            model: ModelOptions::default(),
            sampler: SamplerConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override key `{key}`: `{part}` is not a table"))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Builds a config from TOML text and overrides.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if table
            .get("sampler")
            .and_then(|s| s.as_table())
            .is_some_and(|s| s.contains_key("seed"))
        {
            bail!("set the top-level `seed` instead of `sampler.seed`");
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| anyhow!("invalid config: {e}"))?;
        config.sampler.seed = config.seed;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base).with_context(|| format!("in config {}", path.display()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.data.policies,
            &mut self.data.cities,
            &mut self.data.vehicle_map,
            &mut self.spatial.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.priors.validate()?;
        if self.spline.degree < 1 || self.spline.n_interior_knots < 1 {
            bail!("spline needs degree >= 1 and at least one interior knot");
        }
        if self.spatial.k_neighbors < 1 {
            bail!("spatial.k_neighbors must be at least 1");
        }
        let d = &self.diagnostics;
        if !(d.rhat_max > 1.0) || !(d.ess_min >= 0.0) || d.calibration_bins < 1 {
            bail!("diagnostics thresholds need rhat_max > 1, ess_min >= 0 and calibration_bins >= 1");
        }
        if self.bench.repeats < 1 {
            bail!("bench.repeats must be at least 1");
        }
        Ok(())
    }

    /// Paths of the policy and city files; errors when either is unset.
    pub fn data_paths(&self) -> Result<(&Path, &Path)> {
        let p = self
            .data
            .policies
            .as_deref()
            .ok_or_else(|| anyhow!("data.policies is not set"))?;
        let c = self
            .data
            .cities
            .as_deref()
            .ok_or_else(|| anyhow!("data.cities is not set"))?;
        Ok((p, c))
    }

    /// SHA-256 of the resolved config in canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
