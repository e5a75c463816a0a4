use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::adapt::DualAveraging;
use super::{DrawStats, Kernel};
use crate::posterior::LogDensity;
use crate::scalar::Scalar;

pub(crate) const MALA_TARGET: f64 = 0.574;

/// Optimal random-walk acceptance interpolated between 0.44 at d = 1 and
/// 0.234 as d grows.
pub(crate) fn rwm_target(d: usize) -> f64 {
    0.234 + (0.44 - 0.234) / d.max(1) as f64
}

/// Metropolis-Hastings with an isotropic Gaussian proposal, optionally
/// shifted along the gradient (MALA).
pub(crate) struct Metropolis<'a, T, D> {
    logp: &'a D,
    langevin: bool,
    pub q: Vec<T>,
    g: Vec<T>,
    value: f64,
    pub eps: f64,
    da: DualAveraging,
    n_evals: u64,
    proposal: Vec<T>,
    proposal_grad: Vec<T>,
}

impl<'a, T: Scalar, D: LogDensity<T>> Metropolis<'a, T, D> {
    fn new(logp: &'a D, start: Vec<T>, langevin: bool, target: f64, eps: f64) -> Self {
        let d = start.len();
        let mut g = vec![T::ZERO; d];
        let value = logp.logp_grad(&start, &mut g).as_f64();
        Self {
            logp,
            langevin,
            q: start,
            g,
            value,
            eps,
            da: DualAveraging::new(target, eps),
            n_evals: 1,
            proposal: vec![T::ZERO; d],
            proposal_grad: vec![T::ZERO; d],
        }
    }

    pub fn mala(logp: &'a D, start: Vec<T>) -> Self {
        let d = start.len().max(1) as f64;
        Self::new(logp, start, true, MALA_TARGET, 1.65 * d.powf(-1.0 / 6.0))
    }

    pub fn rwm(logp: &'a D, start: Vec<T>) -> Self {
        let d = start.len();
        Self::new(logp, start, false, rwm_target(d), 2.38 / (d.max(1) as f64).sqrt())
    }

    /// Log proposal density of `to` given a point with gradient `grad`,
    /// up to a constant shared by both directions.
    fn log_q(&self, to: &[T], from: &[T], grad: &[T]) -> f64 {
        let drift = 0.5 * self.eps * self.eps;
        let ss: f64 = to
            .iter()
            .zip(from)
            .zip(grad)
            .map(|((&t, &f), &g)| {
                let r = t.as_f64() - f.as_f64() - drift * g.as_f64();
                r * r
            })
            .sum();
        -ss / (2.0 * self.eps * self.eps)
    }
}

impl<T: Scalar, D: LogDensity<T>> Kernel<T> for Metropolis<'_, T, D> {
    fn transition(&mut self, rng: &mut ChaCha8Rng, adapt: bool) -> DrawStats {
        let eps = T::lit(self.eps);
        let drift = if self.langevin { T::HALF * eps * eps } else { T::ZERO };
        for ((x, &q), &g) in self.proposal.iter_mut().zip(&self.q).zip(&self.g) {
            *x = q + drift * g + eps * T::standard_normal(rng);
        }
        let v = self.logp.logp_grad(&self.proposal, &mut self.proposal_grad);
        self.n_evals += 1;
        let finite = v.is_finite() && (!self.langevin || self.proposal_grad.iter().all(|g| g.is_finite()));
        let log_alpha = if finite {
            let mut a = v.as_f64() - self.value;
            if self.langevin {
                a += self.log_q(&self.q, &self.proposal, &self.proposal_grad)
                    - self.log_q(&self.proposal, &self.q, &self.g);
            }
            a
        } else {
            f64::NEG_INFINITY
        };
        let accept_stat = log_alpha.min(0.0).exp();
        let eps_used = self.eps;
        if finite && rng.random::<f64>().ln() < log_alpha {
            std::mem::swap(&mut self.q, &mut self.proposal);
            std::mem::swap(&mut self.g, &mut self.proposal_grad);
            self.value = v.as_f64();
        }
        if adapt {
            self.eps = self.da.learn(accept_stat);
        }
        DrawStats {
            energy: -self.value,
            tree_depth: 0,
            divergent: !finite,
            step_size: eps_used,
            accept_stat,
            n_grad: 1,
        }
    }

    fn end_warmup(&mut self) {
        self.eps = self.da.final_step_size();
    }

    fn position(&self) -> &[T] {
        &self.q
    }

    fn step_size(&self) -> f64 {
        self.eps
    }

    fn inverse_metric(&self) -> Vec<f64> {
        vec![1.0; self.q.len()]
    }

    fn grad_evals(&self) -> u64 {
        self.n_evals
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::chain_rng;

    struct Flat(usize);

    impl LogDensity<f64> for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn logp_grad(&self, _: &[f64], g: &mut [f64]) -> f64 {
            g.fill(0.0);
            0.0
        }
    }

    #[test]
    fn zero_gradient_mala_matches_rwm() {
        let target = Flat(3);
        let mut a = Metropolis::mala(&target, vec![0.0; 3]);
        let mut b = Metropolis::rwm(&target, vec![0.0; 3]);
        a.eps = 0.7;
        b.eps = 0.7;
        let mut ra = chain_rng(9, 0);
        let mut rb = chain_rng(9, 0);
        for _ in 0..50 {
            let sa = a.transition(&mut ra, false);
            let sb = b.transition(&mut rb, false);
            assert_eq!(a.q, b.q);
            assert_eq!(sa.accept_stat, 1.0);
            assert_eq!(sb.accept_stat, 1.0);
        }
    }

    #[test]
    fn rwm_targets() {
        assert!((rwm_target(1) - 0.44).abs() < 1e-12);
        assert!((rwm_target(20) - 0.234).abs() < 0.011);
    }

    #[test]
    fn nonfinite_proposal_is_rejected() {
        struct Wall;
        impl LogDensity<f64> for Wall {
            fn dim(&self) -> usize {
                1
            }
            fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
                g[0] = 0.0;
                if x[0] > 0.0 {
                    f64::NEG_INFINITY
                } else {
                    0.0
                }
            }
        }
        let mut k = Metropolis::rwm(&Wall, vec![-1e-9]);
        let mut rng = chain_rng(2, 0);
        for _ in 0..100 {
            k.transition(&mut rng, false);
            assert!(k.q[0] <= 0.0);
        }
    }
}
