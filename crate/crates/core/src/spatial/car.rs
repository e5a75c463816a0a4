use super::{AdjacencyGraph, SpatialError};
use crate::scalar::Scalar;

/// Autocorrelation and spatial field of the CAR prior.
#[derive(Debug, Clone, Copy)]
pub struct CarParams<'a, T> {
    pub rho: T,
    pub eta: &'a [T],
}

fn check<T: Scalar>(graph: &AdjacencyGraph, p: &CarParams<'_, T>) -> Result<(), SpatialError> {
    if p.eta.len() != graph.len() {
        return Err(SpatialError::Dimension {
            got: p.eta.len(),
            want: graph.len(),
        });
    }
    Ok(())
}

/// `sum_k log(1 - rho lambda_k)` and, optionally, its derivative in rho.
fn spectral_terms<T: Scalar>(graph: &AdjacencyGraph, rho: T, with_grad: bool) -> Result<(T, T), SpatialError> {
    let mut logdet = T::ZERO;
    let mut dlogdet = T::ZERO;
    for &lambda in graph.eigenvalues() {
        let l = T::lit(lambda);
        let a = T::ONE - rho * l;
        if !(a > T::ZERO) {
            return Err(SpatialError::NotPositiveDefinite {
                rho: rho.as_f64(),
                lambda,
            });
        }
        logdet += a.ln();
        if with_grad {
            dlogdet -= l / a;
        }
    }
    Ok((logdet, dlogdet))
}

/// Returns `(eta' D eta, eta' W eta)` summed over edges.
fn quadratic_parts<T: Scalar>(graph: &AdjacencyGraph, eta: &[T]) -> (T, T) {
    let mut diag = T::ZERO;
    let mut offd = T::ZERO;
    for (j, &e) in eta.iter().enumerate() {
        let nb: T = graph.neighbors(j).iter().map(|&k| eta[k as usize]).sum();
        diag += T::lit(graph.degrees()[j] as f64) * e * e;
        offd += e * nb;
    }
    (diag, offd)
}

/// Log density of `eta ~ N(0, (D - rho W)^{-1})`.
pub fn car_logpdf<T: Scalar>(graph: &AdjacencyGraph, params: CarParams<'_, T>) -> Result<T, SpatialError> {
    check(graph, &params)?;
    let (logdet, _) = spectral_terms(graph, params.rho, false)?;
    let (qd, qw) = quadratic_parts(graph, params.eta);
    let n = T::from_count(graph.len());
    Ok(
        -T::HALF * n * T::TAU().ln() + T::HALF * (T::lit(graph.log_degree_sum()) + logdet)
            - T::HALF * (qd - params.rho * qw),
    )
}

/// Gradients of [`car_logpdf`] with respect to `eta` and `rho`.
pub fn car_grad<T: Scalar>(graph: &AdjacencyGraph, params: CarParams<'_, T>) -> Result<(Vec<T>, T), SpatialError> {
    let mut g = vec![T::ZERO; graph.len()];
    let (_, grho) = car_logpdf_and_grad(graph, params, &mut g)?;
    Ok((g, grho))
}

/// Value and gradient in one pass. The eta gradient `-(D - rho W) eta` is
/// added into `grad_eta`; returns `(value, d value / d rho)`.
pub fn car_logpdf_and_grad<T: Scalar>(
    graph: &AdjacencyGraph,
    params: CarParams<'_, T>,
    grad_eta: &mut [T],
) -> Result<(T, T), SpatialError> {
    check(graph, &params)?;
    let CarParams { rho, eta } = params;
    let (logdet, dlogdet) = spectral_terms(graph, rho, true)?;
    let mut qd = T::ZERO;
    let mut qw = T::ZERO;
    for (j, &e) in eta.iter().enumerate() {
        let nb: T = graph.neighbors(j).iter().map(|&k| eta[k as usize]).sum();
        let d = T::lit(graph.degrees()[j] as f64);
        qd += d * e * e;
        qw += e * nb;
        grad_eta[j] += -(d * e - rho * nb);
    }
    let n = T::from_count(graph.len());
    let value =
        -T::HALF * n * T::TAU().ln() + T::HALF * (T::lit(graph.log_degree_sum()) + logdet) - T::HALF * (qd - rho * qw);
    let grad_rho = T::HALF * dlogdet + T::HALF * qw;
    Ok((value, grad_rho))
}
