//! Sparse Cholesky of `D - rho W` for exact prior draws.
//!
//! Nodes are reordered by reverse Cuthill-McKee to shrink the profile, then
//! the matrix is factored in envelope (skyline) storage.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{AdjacencyGraph, SpatialError};

/// Reverse Cuthill-McKee ordering; `perm[new] = old`. Each connected
/// component starts from its lowest-degree node.
pub fn reverse_cuthill_mckee(graph: &AdjacencyGraph) -> Vec<usize> {
    let n = graph.len();
    let deg = graph.degrees();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut starts: Vec<usize> = (0..n).collect();
    starts.sort_by_key(|&j| (deg[j], j));
    let mut queue = VecDeque::new();
    for s in starts {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        queue.push_back(s);
        while let Some(j) = queue.pop_front() {
            order.push(j);
            let mut nb: Vec<usize> = graph
                .neighbors(j)
                .iter()
                .map(|&k| k as usize)
                .filter(|&k| !seen[k])
                .collect();
            nb.sort_by_key(|&k| (deg[k], k));
            for k in nb {
                seen[k] = true;
                queue.push_back(k);
            }
        }
    }
    order.reverse();
    order
}

/// Lower Cholesky factor of a permuted `D - rho W` in envelope storage.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn new(graph: &AdjacencyGraph, rho: f64) -> Result<Self, SpatialError> {
        let n = graph.len();
        let perm = reverse_cuthill_mckee(graph);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0usize; n];
        for i in 0..n {
            first[i] = graph
                .neighbors(perm[i])
                .iter()
                .map(|&k| inv[k as usize])
                .filter(|&c| c < i)
                .min()
                .unwrap_or(i);
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + (i - first[i] + 1));
        }
        let mut values = vec![0.0; start[n]];
        for i in 0..n {
            let old = perm[i];
            values[start[i] + i - first[i]] = graph.degrees()[old] as f64;
            for &k in graph.neighbors(old) {
                let c = inv[k as usize];
                if c < i {
                    values[start[i] + c - first[i]] = -rho;
                }
            }
        }
        let mut f = Self {
            perm,
            first,
            start,
            values,
        };
        f.factor()?;
        Ok(f)
    }

    fn factor(&mut self) -> Result<(), SpatialError> {
        let n = self.first.len();
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let lo = fi.max(fj);
                let mut s = self.values[self.start[i] + j - fi];
                for k in lo..j {
                    s -= self.values[self.start[i] + k - fi] * self.values[self.start[j] + k - fj];
                }
                if j < i {
                    s /= self.values[self.start[j] + j - fj];
                } else {
                    if !(s > 0.0) {
                        return Err(SpatialError::Factorization(self.perm[i]));
                    }
                    s = s.sqrt();
                }
                self.values[self.start[i] + j - fi] = s;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// Number of stored entries in the profile.
    pub fn profile_size(&self) -> usize {
        self.values.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    fn diag(&self, i: usize) -> f64 {
        self.values[self.start[i] + i - self.first[i]]
    }

    /// `log det(D - rho W)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.len()).map(|i| self.diag(i).ln()).sum::<f64>()
    }

    /// Solves `L' x = z` in place, in permuted coordinates.
    pub fn solve_lt(&self, x: &mut [f64]) {
        for i in (0..self.len()).rev() {
            x[i] /= self.diag(i);
            let fi = self.first[i];
            let xi = x[i];
            for k in fi..i {
                x[k] -= self.values[self.start[i] + k - fi] * xi;
            }
        }
    }

    /// Draws `eta ~ N(0, (D - rho W)^{-1})` in the original node order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.solve_lt(&mut z);
        let mut out = vec![0.0; self.len()];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = z[new];
        }
        out
    }
}

/// One exact draw from the CAR prior.
pub fn sample_car_prior<R: Rng + ?Sized>(
    graph: &AdjacencyGraph,
    rho: f64,
    rng: &mut R,
) -> Result<Vec<f64>, SpatialError> {
    Ok(EnvelopeCholesky::new(graph, rho)?.sample(rng))
}
