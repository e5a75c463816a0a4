use super::{chain_rng, Result, SamplerError};
use crate::posterior::LogDensity;
use crate::scalar::Scalar;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const START_RADIUS: f64 = 0.1;
const MAX_FAILURES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome<T> {
    pub point: Vec<T>,
    pub start_value: f64,
    pub final_value: f64,
    pub steps: usize,
}

/// Adam ascent from a uniform start in `[-0.1, 0.1]^d`.
pub fn optimize_init<T: Scalar, D: LogDensity<T>>(
    logp: &D,
    n_steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<T>> {
    let mut rng = chain_rng(seed, 0);
    let start: Vec<T> = (0..logp.dim())
        .map(|_| T::lit(START_RADIUS * (2.0 * T::uniform(&mut rng).as_f64() - 1.0)))
        .collect();
    Ok(optimize_from(logp, &start, n_steps, learning_rate)?.point)
}

/// Adam ascent on `logp` from `start`. A step landing on a non-finite value
/// is undone and the learning rate halved; 100 such steps in a row abort.
pub fn optimize_from<T: Scalar, D: LogDensity<T>>(
    logp: &D,
    start: &[T],
    n_steps: usize,
    learning_rate: f64,
) -> Result<OptimizeOutcome<T>> {
    let d = start.len();
    let mut x: Vec<f64> = start.iter().map(|v| v.as_f64()).collect();
    let mut xt: Vec<T> = start.to_vec();
    let mut g = vec![T::ZERO; d];
    let start_value = logp.logp_grad(&xt, &mut g).as_f64();
    if !start_value.is_finite() {
        return Err(SamplerError::NonFiniteInit { chain: 0 });
    }
    let mut value = start_value;
    let mut grad: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
    let mut m = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut lr = learning_rate;
    let mut failures = 0;
    let mut trial = vec![0.0; d];
    for step in 1..=n_steps {
        let b1 = 1.0 - BETA1.powi(step as i32);
        let b2 = 1.0 - BETA2.powi(step as i32);
        for i in 0..d {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
        }
        loop {
            for i in 0..d {
                trial[i] = x[i] + lr * (m[i] / b1) / ((v[i] / b2).sqrt() + ADAM_EPS);
            }
            xt.iter_mut().zip(&trial).for_each(|(t, &s)| *t = T::lit(s));
            let val = logp.logp_grad(&xt, &mut g).as_f64();
            if val.is_finite() && g.iter().all(|g| g.is_finite()) {
                failures = 0;
                x.copy_from_slice(&trial);
                value = val;
                grad.iter_mut().zip(&g).for_each(|(a, &b)| *a = b.as_f64());
                break;
            }
            failures += 1;
            if failures >= MAX_FAILURES {
                return Err(SamplerError::OptimizerDiverged { step });
            }
            lr *= 0.5;
        }
    }
    Ok(OptimizeOutcome {
        point: x.iter().map(|&v| T::lit(v)).collect(),
        start_value,
        final_value: value,
        steps: n_steps,
    })
}
