//! City adjacency graph and the proper CAR prior on the spatial effect.
//!
//! The prior is `eta ~ N(0, (D - rho W)^{-1})` with `W` the symmetrised
//! k-nearest-neighbour adjacency and `D` its degree matrix. The eigenvalues
//! of `D^{-1/2} W D^{-1/2}` are computed once so that
//! `log det(D - rho W) = sum log D_jj + sum log(1 - rho lambda_k)` costs
//! O(J) per evaluation, and the quadratic form is summed over edges.

mod car;
mod factor;
pub mod knn;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use car::{car_grad, car_logpdf, car_logpdf_and_grad, CarParams};
pub use factor::{reverse_cuthill_mckee, sample_car_prior, EnvelopeCholesky};

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("need more than k = {k} cities, got {n}")]
    TooFewNodes { n: usize, k: usize },
    #[error("node {0} has no neighbours")]
    IsolatedNode(usize),
    #[error("edge ({0}, {1}) is out of range or a self loop")]
    BadEdge(u32, u32),
    #[error("precision D - rho W is not positive definite at rho = {rho} (1 - rho * {lambda} <= 0)")]
    NotPositiveDefinite { rho: f64, lambda: f64 },
    #[error("factorization failed at row {0}")]
    Factorization(usize),
    #[error("eta has length {got}, graph has {want} nodes")]
    Dimension { got: usize, want: usize },
    #[error("graph cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

/// Symmetric 0/1 adjacency stored as compressed rows, with degrees and the
/// cached spectrum of `D^{-1/2} W D^{-1/2}` (ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    degrees: Vec<u32>,
    eigenvalues: Vec<f64>,
    log_degree_sum: f64,
}

impl AdjacencyGraph {
    /// Builds the graph from undirected edges (either orientation, duplicates
    /// allowed) and computes the spectrum. The eigendecomposition is O(J^3).
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Result<Self, SpatialError> {
        let mut g = Self::structure(n, edges)?;
        g.eigenvalues = g.normalized_spectrum();
        Ok(g)
    }

    /// Builds the graph with a precomputed spectrum (e.g. from a cache file).
    pub fn from_edges_with_spectrum(
        n: usize,
        edges: &[(u32, u32)],
        eigenvalues: Vec<f64>,
    ) -> Result<Self, SpatialError> {
        let mut g = Self::structure(n, edges)?;
        if eigenvalues.len() != n {
            return Err(SpatialError::Dimension {
                got: eigenvalues.len(),
                want: n,
            });
        }
        g.eigenvalues = eigenvalues;
        Ok(g)
    }

    fn structure(n: usize, edges: &[(u32, u32)]) -> Result<Self, SpatialError> {
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a == b || a as usize >= n || b as usize >= n {
                return Err(SpatialError::BadEdge(a, b));
            }
            lists[a as usize].push(b);
            lists[b as usize].push(a);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        let mut degrees = Vec::with_capacity(n);
        offsets.push(0);
        for (j, mut l) in lists.into_iter().enumerate() {
            l.sort_unstable();
            l.dedup();
            if l.is_empty() {
                return Err(SpatialError::IsolatedNode(j));
            }
            degrees.push(l.len() as u32);
            neighbors.extend(l);
            offsets.push(neighbors.len());
        }
        let log_degree_sum = degrees.iter().map(|&d| (d as f64).ln()).sum();
        Ok(Self {
            offsets,
            neighbors,
            degrees,
            eigenvalues: Vec::new(),
            log_degree_sum,
        })
    }

    fn normalized_spectrum(&self) -> Vec<f64> {
        let n = self.len();
        let inv_sqrt: Vec<f64> = self.degrees.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
        let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            for &k in self.neighbors(j) {
                m[(j, k as usize)] = inv_sqrt[j] * inv_sqrt[k as usize];
            }
        }
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    #[inline]
    pub fn neighbors(&self, j: usize) -> &[u32] {
        &self.neighbors[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `sum_j log D_jj`.
    pub fn log_degree_sum(&self) -> f64 {
        self.log_degree_sum
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Undirected edges with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        (0..self.len())
            .flat_map(|j| {
                self.neighbors(j)
                    .iter()
                    .filter(move |&&k| (j as u32) < k)
                    .map(move |&k| (j as u32, k))
            })
            .collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors(a).binary_search(&(b as u32)).is_ok()
    }

    /// Dense `D - rho W`, for oracles and small problems.
    pub fn dense_precision(&self, rho: f64) -> nalgebra::DMatrix<f64> {
        let n = self.len();
        let mut q = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            q[(j, j)] = self.degrees[j] as f64;
            for &k in self.neighbors(j) {
                q[(j, k as usize)] = -rho;
            }
        }
        q
    }
}

/// Symmetrised k-nearest-neighbour graph by great-circle distance.
/// `coords` holds `[latitude, longitude]` in degrees.
pub fn build_knn_graph(coords: &[[f64; 2]], k: usize) -> Result<AdjacencyGraph, SpatialError> {
    let edges = knn_edges(coords, k)?;
    AdjacencyGraph::from_edges(coords.len(), &edges)
}

/// Directed k-NN pairs, before symmetrisation.
pub fn knn_edges(coords: &[[f64; 2]], k: usize) -> Result<Vec<(u32, u32)>, SpatialError> {
    let n = coords.len();
    if n <= k || k == 0 {
        return Err(SpatialError::TooFewNodes { n, k });
    }
    warn_duplicates(coords);
    let lists = knn::knn_lists(coords, k);
    Ok(lists
        .into_iter()
        .enumerate()
        .flat_map(|(i, l)| l.into_iter().map(move |j| (i as u32, j)))
        .collect())
}

fn warn_duplicates(coords: &[[f64; 2]]) {
    let mut sorted: Vec<(u64, u64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, c)| (c[0].to_bits(), c[1].to_bits(), i))
        .collect();
    sorted.sort_unstable();
    let dups = sorted
        .windows(2)
        .filter(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1)
        .count();
    if dups > 0 {
        log::warn!("{dups} cities share coordinates with another city; ties broken by index");
    }
}

/// Hex SHA-256 of the coordinates and `k`; keys the on-disk graph cache.
pub fn graph_content_hash(coords: &[[f64; 2]], k: usize) -> String {
    let mut h = Sha256::new();
    h.update((k as u64).to_le_bytes());
    h.update((coords.len() as u64).to_le_bytes());
    for c in coords {
        h.update(c[0].to_le_bytes());
        h.update(c[1].to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphCacheFile {
    hash: String,
    k: usize,
    n: usize,
    edges: Vec<(u32, u32)>,
    degrees: Vec<u32>,
    eigenvalues: Vec<f64>,
}

pub fn save_graph(path: &Path, graph: &AdjacencyGraph, hash: &str, k: usize) -> Result<(), SpatialError> {
    let file = GraphCacheFile {
        hash: hash.to_string(),
        k,
        n: graph.len(),
        edges: graph.edges(),
        degrees: graph.degrees.clone(),
        eigenvalues: graph.eigenvalues.clone(),
    };
    let err = |message: String| SpatialError::Cache {
        path: path.into(),
        message,
    };
    let body = serde_json::to_vec(&file).map_err(|e| err(e.to_string()))?;
    std::fs::write(path, body).map_err(|e| err(e.to_string()))
}

pub fn load_graph(path: &Path, expected_hash: &str) -> Result<AdjacencyGraph, SpatialError> {
    let err = |message: String| SpatialError::Cache {
        path: path.into(),
        message,
    };
    let body = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    let file: GraphCacheFile = serde_json::from_slice(&body).map_err(|e| err(e.to_string()))?;
    if file.hash != expected_hash {
        return Err(err("content hash mismatch".into()));
    }
    let g = AdjacencyGraph::from_edges_with_spectrum(file.n, &file.edges, file.eigenvalues)?;
    if g.degrees != file.degrees {
        return Err(err("degrees disagree with edge list".into()));
    }
    Ok(g)
}

/// Loads the graph from `cache_dir` when a file with the matching content
/// hash exists, otherwise builds it and writes the cache.
pub fn load_or_build_graph(
    coords: &[[f64; 2]],
    k: usize,
    cache_dir: Option<&Path>,
) -> Result<(AdjacencyGraph, String), SpatialError> {
    let hash = graph_content_hash(coords, k);
    if let Some(dir) = cache_dir {
        let path = dir.join(format!("graph-{}.json", &hash[..16]));
        if path.exists() {
            match load_graph(&path, &hash) {
                Ok(g) => return Ok((g, hash)),
                Err(e) => log::warn!("ignoring graph cache: {e}"),
            }
        }
        let g = build_knn_graph(coords, k)?;
        std::fs::create_dir_all(dir).map_err(|e| SpatialError::Cache {
            path: dir.into(),
            message: e.to_string(),
        })?;
        save_graph(&path, &g, &hash, k)?;
        return Ok((g, hash));
    }
    Ok((build_knn_graph(coords, k)?, hash))
}
