//! Clamped B-spline basis for the exposure adjustment `g(alpha)`.
//!
//! Interior knots sit at evenly spaced percentiles of the log exposures and
//! the boundary knots are repeated `degree + 1` times. Evaluation uses the
//! Cox-de Boor triangle, producing only the `degree + 1` functions that are
//! nonzero on the span containing `x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::quantile_sorted;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("cannot build a basis from an empty input")]
    Empty,
    #[error("all inputs are identical; the knot span is degenerate")]
    Degenerate,
    #[error("degree must be at least 1")]
    BadDegree,
    #[error("at least one interior knot is required")]
    NoInteriorKnots,
    #[error("invalid knot vector: {0}")]
    BadKnots(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis<T> {
    degree: usize,
    knots: Vec<T>,
}

impl<T: Scalar> SplineBasis<T> {
    /// Places interior knots at the `i / (n + 1)` percentiles of `log_exposures`.
    /// Percentiles that coincide with each other or with a boundary are
    /// collapsed, which lowers the basis size.
    pub fn build(log_exposures: &[f64], n_interior_knots: usize, degree: usize) -> Result<Self, SplineError> {
        if log_exposures.is_empty() {
            return Err(SplineError::Empty);
        }
        if degree < 1 {
            return Err(SplineError::BadDegree);
        }
        if n_interior_knots < 1 {
            return Err(SplineError::NoInteriorKnots);
        }
        let mut sorted = log_exposures.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if !(hi > lo) {
            return Err(SplineError::Degenerate);
        }
        let mut interior: Vec<f64> = (1..=n_interior_knots)
            .map(|i| quantile_sorted(&sorted, i as f64 / (n_interior_knots + 1) as f64))
            .filter(|&q| q > lo && q < hi)
            .collect();
        interior.dedup();

        let mut knots = Vec::with_capacity(interior.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat_n(lo, degree + 1));
        knots.extend(interior);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Self::from_knots(degree, knots.into_iter().map(T::lit).collect())
    }

    /// Basis on an explicit nondecreasing knot vector.
    pub fn from_knots(degree: usize, knots: Vec<T>) -> Result<Self, SplineError> {
        if degree < 1 {
            return Err(SplineError::BadDegree);
        }
        if knots.len() < 2 * (degree + 1) {
            return Err(SplineError::BadKnots(format!(
                "{} knots cannot support degree {degree}",
                knots.len()
            )));
        }
        if knots.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(SplineError::BadKnots("knots must be nondecreasing".into()));
        }
        if !(knots[knots.len() - 1] > knots[0]) {
            return Err(SplineError::Degenerate);
        }
        Ok(Self { degree, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// Number of basis functions `L`.
    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain(&self) -> (T, T) {
        (self.knots[self.degree], self.knots[self.len()])
    }

    pub fn cast<U: Scalar>(&self) -> SplineBasis<U> {
        SplineBasis {
            degree: self.degree,
            knots: self.knots.iter().map(|k| U::lit(k.as_f64())).collect(),
        }
    }

    /// Span index `mu` with `knots[mu] <= x < knots[mu + 1]`, the right end
    /// of the domain belonging to the last nonempty span.
    fn span(&self, x: T) -> usize {
        let p = self.degree;
        let n = self.len();
        if x >= self.knots[n] {
            return n - 1;
        }
        // first index in [p, n) whose knot exceeds x, minus one
        let slice = &self.knots[p..=n];
        let upper = slice.partition_point(|&k| k <= x);
        (p + upper - 1).min(n - 1)
    }

    /// Values of the nonzero basis functions at `x` (clamped to the
    /// domain). Returns the index of the first one; `out` must hold
    /// `degree + 1` entries.
    pub fn eval_nonzero(&self, x: T, out: &mut [T]) -> usize {
        let p = self.degree;
        debug_assert_eq!(out.len(), p + 1);
        let (lo, hi) = self.domain();
        let x = x.max(lo).min(hi);
        let mu = self.span(x);
        let t = &self.knots;

        let mut left = [T::ZERO; 16];
        let mut right = [T::ZERO; 16];
        let mut left_v;
        let mut right_v;
        let (left, right): (&mut [T], &mut [T]) = if p < 16 {
            (&mut left[..=p], &mut right[..=p])
        } else {
            left_v = vec![T::ZERO; p + 1];
            right_v = vec![T::ZERO; p + 1];
            (&mut left_v[..], &mut right_v[..])
        };

        out[0] = T::ONE;
        for j in 1..=p {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = T::ZERO;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > T::ZERO { out[r] / denom } else { T::ZERO };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        mu - p
    }

    /// Full `L`-vector of basis values at `x`.
    pub fn evaluate(&self, x: T) -> Vec<T> {
        let mut local = vec![T::ZERO; self.degree + 1];
        let first = self.eval_nonzero(x, &mut local);
        let mut full = vec![T::ZERO; self.len()];
        full[first..first + local.len()].copy_from_slice(&local);
        full
    }

    pub fn design_matrix(&self, xs: &[T]) -> DesignMatrix<T> {
        let w = self.degree + 1;
        let mut first = Vec::with_capacity(xs.len());
        let mut values = vec![T::ZERO; xs.len() * w];
        for (row, &x) in values.chunks_mut(w).zip(xs) {
            first.push(self.eval_nonzero(x, row) as u32);
        }
        DesignMatrix {
            n_basis: self.len(),
            width: w,
            first,
            values,
        }
    }
}

/// Row-sparse `N x L` basis matrix: each row stores its first nonzero
/// column and `degree + 1` consecutive values.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<T> {
    n_basis: usize,
    width: usize,
    first: Vec<u32>,
    values: Vec<T>,
}

impl<T: Scalar> DesignMatrix<T> {
    pub fn n_rows(&self) -> usize {
        self.first.len()
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    /// First nonzero column of every row.
    pub fn first_columns(&self) -> &[u32] {
        &self.first
    }

    /// Nonzero values, `width` per row.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn row(&self, i: usize) -> (usize, &[T]) {
        (
            self.first[i] as usize,
            &self.values[i * self.width..(i + 1) * self.width],
        )
    }

    /// `B c` for row `i`.
    #[inline]
    pub fn row_dot(&self, i: usize, coef: &[T]) -> T {
        let (f, vals) = self.row(i);
        vals.iter().zip(&coef[f..]).map(|(&b, &c)| b * c).sum()
    }

    pub fn mul_vec(&self, coef: &[T]) -> Vec<T> {
        assert_eq!(coef.len(), self.n_basis);
        (0..self.n_rows()).map(|i| self.row_dot(i, coef)).collect()
    }

    /// Dense row `i`, mostly for tests and exports.
    pub fn dense_row(&self, i: usize) -> Vec<T> {
        let (f, vals) = self.row(i);
        let mut out = vec![T::ZERO; self.n_basis];
        out[f..f + vals.len()].copy_from_slice(vals);
        out
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut first = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len() * self.width);
        for &r in rows {
            let (f, v) = self.row(r);
            first.push(f as u32);
            values.extend_from_slice(v);
        }
        Self {
            n_basis: self.n_basis,
            width: self.width,
            first,
            values,
        }
    }
}
