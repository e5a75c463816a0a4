use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Diagonal,
    /// Full covariance; costs `O(d^2)` per leapfrog step.
    Dense,
}

/// Euclidean metric given by its inverse, the estimated posterior covariance.
#[derive(Debug, Clone)]
pub(crate) enum Metric<T> {
    Diagonal(Vec<T>),
    Dense {
        inv: DMatrix<f64>,
        /// Lower Cholesky factor of `inv`.
        chol: DMatrix<f64>,
    },
}

impl<T: Scalar> Metric<T> {
    pub fn unit(kind: MetricKind, d: usize) -> Self {
        match kind {
            MetricKind::Diagonal => Metric::Diagonal(vec![T::ONE; d]),
            MetricKind::Dense => Metric::Dense {
                inv: DMatrix::identity(d, d),
                chol: DMatrix::identity(d, d),
            },
        }
    }

    /// Metric from a covariance estimate: `d` variances or a row-major
    /// `d x d` matrix. `None` when the matrix is not positive definite.
    pub fn from_covariance(d: usize, cov: &[f64]) -> Option<Self> {
        if cov.len() == d {
            return Some(Metric::Diagonal(cov.iter().map(|&v| T::lit(v)).collect()));
        }
        let inv = DMatrix::from_row_slice(d, d, cov);
        let chol = inv.clone().cholesky()?.unpack();
        Some(Metric::Dense { inv, chol })
    }

    /// `M^{-1} p`.
    pub fn velocity(&self, p: &[T], out: &mut [T]) {
        match self {
            Metric::Diagonal(m) => {
                for ((o, &p), &m) in out.iter_mut().zip(p).zip(m) {
                    *o = m * p;
                }
            }
            Metric::Dense { inv, .. } => {
                let v = inv * DVector::from_iterator(p.len(), p.iter().map(|v| v.as_f64()));
                out.iter_mut().zip(v.iter()).for_each(|(o, &v)| *o = T::lit(v));
            }
        }
    }

    pub fn kinetic(&self, p: &[T]) -> f64 {
        match self {
            Metric::Diagonal(m) => p
                .iter()
                .zip(m)
                .map(|(&p, &m)| 0.5 * m.as_f64() * p.as_f64() * p.as_f64())
                .sum(),
            Metric::Dense { inv, .. } => {
                let p = DVector::from_iterator(p.len(), p.iter().map(|v| v.as_f64()));
                0.5 * p.dot(&(inv * &p))
            }
        }
    }

    /// Draws `p ~ N(0, M)`.
    pub fn sample_momentum(&self, p: &mut [T], rng: &mut ChaCha8Rng) {
        match self {
            Metric::Diagonal(m) => {
                for (p, &m) in p.iter_mut().zip(m) {
                    *p = T::standard_normal(rng) / m.sqrt();
                }
            }
            Metric::Dense { chol, .. } => {
                let z = DVector::from_iterator(p.len(), (0..p.len()).map(|_| f64::standard_normal(rng)));
                // L^T p = z gives Cov(p) = (L L^T)^{-1}
                let x = chol
                    .tr_solve_lower_triangular(&z)
                    .expect("Cholesky factor has a positive diagonal");
                p.iter_mut().zip(x.iter()).for_each(|(o, &v)| *o = T::lit(v));
            }
        }
    }

    /// Diagonal of `M^{-1}`.
    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Metric::Diagonal(m) => m.iter().map(|v| v.as_f64()).collect(),
            Metric::Dense { inv, .. } => inv.diagonal().iter().copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::chain_rng;

    fn dense(cov: &[f64]) -> Metric<f64> {
        Metric::from_covariance(2, cov).unwrap()
    }

    #[test]
    fn dense_momentum_has_inverse_covariance() {
        let m = dense(&[2.0, 0.6, 0.6, 0.5]);
        let mut rng = chain_rng(9, 0);
        let n = 200_000;
        let mut s = [0.0; 3];
        let mut p = [0.0; 2];
        for _ in 0..n {
            m.sample_momentum(&mut p, &mut rng);
            s[0] += p[0] * p[0];
            s[1] += p[0] * p[1];
            s[2] += p[1] * p[1];
        }
        // inverse of [[2, .6], [.6, .5]]
        let det = 2.0 * 0.5 - 0.36;
        let want = [0.5 / det, -0.6 / det, 2.0 / det];
        for (got, want) in s.iter().map(|v| v / n as f64).zip(want) {
            assert!((got - want).abs() < 0.02 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn kinetic_and_velocity_agree() {
        let m = dense(&[2.0, 0.6, 0.6, 0.5]);
        let p = [0.3, -1.2];
        let mut v = [0.0; 2];
        m.velocity(&p, &mut v);
        assert!((v[0] - (2.0 * 0.3 - 0.6 * 1.2)).abs() < 1e-12);
        assert!((m.kinetic(&p) - 0.5 * (p[0] * v[0] + p[1] * v[1])).abs() < 1e-12);
        let d = Metric::<f64>::from_covariance(2, &[2.0, 0.5]).unwrap();
        assert!((d.kinetic(&p) - 0.5 * (2.0 * 0.09 + 0.5 * 1.44)).abs() < 1e-12);
        assert_eq!(m.diagonal(), vec![2.0, 0.5]);
    }

    #[test]
    fn indefinite_covariance_is_refused() {
        assert!(Metric::<f64>::from_covariance(2, &[1.0, 2.0, 2.0, 1.0]).is_none());
    }
}
