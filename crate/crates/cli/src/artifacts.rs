//! On-disk run artifacts: per-chain draw CSVs and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use claimfreq::data::IngestReport;
use claimfreq::posterior::ModelDescription;
use claimfreq::sampler::DrawStats;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const STAT_COLUMNS: [&str; 4] = ["energy", "tree_depth", "divergent", "step_size"];
const FORMAT_VERSION: u32 = 1;

pub fn chain_file_name(chain: usize) -> String {
    format!("chain-{}.csv", chain + 1)
}

/// Draws of one chain in constrained coordinates, one row per kept draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTable {
    pub rows: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    pub tree_depth: Vec<u32>,
    pub divergent: Vec<bool>,
    pub step_size: Vec<f64>,
}

impl ChainTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|&&d| d).count()
    }
}

/// CSV text of a chain. Floats use the shortest representation that parses
/// back to the same value.
pub fn chain_csv(names: &[String], rows: &[Vec<f64>], stats: &[DrawStats]) -> String {
    let mut out = String::new();
    out.push_str(&names.join(","));
    for c in STAT_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (row, s) in rows.iter().zip(stats) {
        for v in row {
            write!(out, "{v},").expect("string write");
        }
        writeln!(
            out,
            "{},{},{},{}",
            s.energy,
            s.tree_depth,
            u8::from(s.divergent),
            s.step_size
        )
        .expect("string write");
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a chain CSV written by [`chain_csv`], checking the header against
/// the expected parameter names.
pub fn read_chain_csv(path: &Path, names: &[String]) -> Result<ChainTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let header = rdr
        .headers()
        .with_context(|| format!("{}: unreadable header", path.display()))?
        .clone();
    let want: Vec<&str> = names.iter().map(String::as_str).chain(STAT_COLUMNS).collect();
    if header.iter().ne(want.iter().copied()) {
        bail!(
            "{}: columns do not match the manifest layout ({} columns, expected {})",
            path.display(),
            header.len(),
            want.len()
        );
    }
    let d = names.len();
    let mut table = ChainTable {
        rows: Vec::new(),
        energy: Vec::new(),
        tree_depth: Vec::new(),
        divergent: Vec::new(),
        step_size: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("{} line {line}: {e}", path.display())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |col: usize, field: &str| {
            anyhow!(
                "{} line {line}: cannot parse `{field}` in column `{}`",
                path.display(),
                want[col]
            )
        };
        let float = |col: usize| -> Result<f64> {
            let f = &rec[col];
            f.parse::<f64>().map_err(|_| bad(col, f))
        };
        let row = (0..d).map(float).collect::<Result<Vec<f64>>>()?;
        table.rows.push(row);
        table.energy.push(float(d)?);
        table
            .tree_depth
            .push(rec[d + 1].parse().map_err(|_| bad(d + 1, &rec[d + 1]))?);
        table.divergent.push(match &rec[d + 2] {
            "0" => false,
            "1" => true,
            other => return Err(bad(d + 2, other)),
        });
        table.step_size.push(float(d + 3)?);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub file: String,
    pub draws: usize,
    pub sha256: String,
    pub step_size: f64,
    pub warmup_divergences: usize,
    pub warmup_grad_evals: u64,
    pub sampling_grad_evals: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub model: ModelDescription,
    pub ingest: IngestReport,
    pub chains: Vec<ChainEntry>,
    pub versions: BTreeMap<String, String>,
    pub timings: Vec<StageTiming>,
}

impl Manifest {
    pub fn new(config: &RunConfig, model: ModelDescription, ingest: IngestReport) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("claimfreq".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("manifest_format".into(), FORMAT_VERSION.to_string());
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config.hash(),
            config: config.clone(),
            model,
            ingest,
            chains: Vec::new(),
            versions,
            timings: Vec::new(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            bail!("no {MANIFEST} in {}; is this a fit output directory?", dir.display());
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("{} is malformed", path.display()))?;
        if m.format_version != FORMAT_VERSION {
            bail!(
                "{} has format version {}, expected {FORMAT_VERSION}",
                path.display(),
                m.format_version
            );
        }
        if m.chains.is_empty() {
            bail!("{} lists no chains", path.display());
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }

    /// Loads every chain listed in the manifest, checking row counts and
    /// checksums.
    pub fn read_chains(&self, dir: &Path) -> Result<Vec<ChainTable>> {
        let names = self.model.layout.names();
        self.chains
            .iter()
            .map(|entry| {
                let path = dir.join(&entry.file);
                let table = read_chain_csv(&path, &names)?;
                if table.len() != entry.draws {
                    bail!(
                        "{} holds {} draws, the manifest lists {}",
                        path.display(),
                        table.len(),
                        entry.draws
                    );
                }
                let bytes = std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
                if sha256_hex(&bytes) != entry.sha256 {
                    bail!("{} does not match the checksum in the manifest", path.display());
                }
                Ok(table)
            })
            .collect()
    }
}
