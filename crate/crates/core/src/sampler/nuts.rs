use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::adapt::{DualAveraging, WindowedVariance};
use super::metric::{Metric, MetricKind};
use super::{DrawStats, Kernel, Result, SamplerConfig, SamplerError};
use crate::posterior::LogDensity;
use crate::scalar::Scalar;

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone)]
pub(crate) struct Point<T> {
    pub q: Vec<T>,
    pub p: Vec<T>,
    pub g: Vec<T>,
    pub logp: f64,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    acc.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
}

fn sum<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// Generalized no-U-turn condition on momentum sums.
fn criterion<T: Scalar>(p_sharp_minus: &[T], p_sharp_plus: &[T], rho: &[T]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Multinomial NUTS with a diagonal or dense Euclidean metric.
pub(crate) struct Nuts<'a, T, D> {
    logp: &'a D,
    pub z: Point<T>,
    metric: Metric<T>,
    velocity: Vec<T>,
    pub eps: f64,
    max_depth: usize,
    da: DualAveraging,
    window: WindowedVariance,
    n_grad: u64,
    divergent: bool,
    chain: usize,
}

impl<'a, T: Scalar, D: LogDensity<T>> Nuts<'a, T, D> {
    pub fn new(logp: &'a D, start: Vec<T>, config: &SamplerConfig, rng: &mut ChaCha8Rng, chain: usize) -> Result<Self> {
        let mut nuts = Self::with_step_size(
            logp,
            start,
            1.0,
            config.max_tree_depth,
            config.target_accept,
            config.n_warmup,
            chain,
        )?;
        nuts.set_metric_kind(config.metric);
        nuts.init_stepsize(rng)?;
        nuts.da.restart(nuts.eps);
        Ok(nuts)
    }

    pub fn with_step_size(
        logp: &'a D,
        start: Vec<T>,
        eps: f64,
        max_depth: usize,
        target: f64,
        n_warmup: usize,
        chain: usize,
    ) -> Result<Self> {
        let d = start.len();
        let mut g = vec![T::ZERO; d];
        let v = logp.logp_grad(&start, &mut g);
        if !v.is_finite() {
            return Err(SamplerError::NonFiniteInit { chain });
        }
        Ok(Self {
            logp,
            z: Point {
                q: start,
                p: vec![T::ZERO; d],
                g,
                logp: v.as_f64(),
            },
            metric: Metric::unit(MetricKind::Diagonal, d),
            velocity: vec![T::ZERO; d],
            eps,
            max_depth,
            da: DualAveraging::new(target, eps),
            window: WindowedVariance::new(d, n_warmup, false),
            n_grad: 1,
            divergent: false,
            chain,
        })
    }

    fn set_metric_kind(&mut self, kind: MetricKind) {
        let d = self.z.q.len();
        self.metric = Metric::unit(kind, d);
        self.window = WindowedVariance::new(d, self.window.n_warmup(), kind == MetricKind::Dense);
    }

    pub fn leapfrog(&mut self, z: &mut Point<T>, eps: f64) {
        let e = T::lit(eps);
        let half = e * T::HALF;
        z.p.iter_mut().zip(&z.g).for_each(|(p, &g)| *p += half * g);
        self.metric.velocity(&z.p, &mut self.velocity);
        z.q.iter_mut().zip(&self.velocity).for_each(|(q, &v)| *q += e * v);
        let v = self.logp.logp_grad(&z.q, &mut z.g);
        self.n_grad += 1;
        z.logp = if v.is_finite() { v.as_f64() } else { f64::NEG_INFINITY };
        z.p.iter_mut().zip(&z.g).for_each(|(p, &g)| *p += half * g);
    }

    pub fn hamiltonian(&self, z: &Point<T>) -> f64 {
        let h = -z.logp + self.metric.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[T]) -> Vec<T> {
        let mut out = vec![T::ZERO; p.len()];
        self.metric.velocity(p, &mut out);
        out
    }

    fn sample_momentum(&self, z: &mut Point<T>, rng: &mut ChaCha8Rng) {
        self.metric.sample_momentum(&mut z.p, rng);
    }

    /// Doubles or halves the step size until one leapfrog step crosses an
    /// acceptance probability of 0.8.
    fn init_stepsize(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let start = self.z.clone();
        let target = 0.8f64.ln();
        let mut direction = 0.0;
        let outcome = loop {
            let mut z = start.clone();
            self.sample_momentum(&mut z, rng);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.eps);
            let delta = h0 - self.hamiltonian(&z);
            if direction == 0.0 {
                direction = if delta > target { 1.0 } else { -1.0 };
            } else if (direction > 0.0 && !(delta > target)) || (direction < 0.0 && !(delta < target)) {
                break Ok(());
            }
            self.eps = if direction > 0.0 {
                2.0 * self.eps
            } else {
                0.5 * self.eps
            };
            if self.eps > 1e7 {
                break Err("step size grew without bound; the target may be improper");
            }
            if self.eps == 0.0 {
                break Err("step size shrank to zero; the density is not finite near the start");
            }
        };
        self.z = start;
        outcome.map_err(|reason| SamplerError::StepSize {
            chain: self.chain,
            reason: reason.to_string(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point<T>,
        z_propose: &mut Point<T>,
        p_sharp_beg: &mut Vec<T>,
        p_sharp_end: &mut Vec<T>,
        rho: &mut [T],
        p_beg: &mut Vec<T>,
        p_end: &mut Vec<T>,
        h0: f64,
        sign: f64,
        n_leapfrog: &mut u64,
        log_sum_weight: &mut f64,
        sum_metro_prob: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.eps);
            *n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            *sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            add_into(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }
        let d = rho.len();

        let mut p_sharp_left_end = vec![T::ZERO; d];
        let mut p_left_end = vec![T::ZERO; d];
        let mut rho_left = vec![T::ZERO; d];
        let mut lsw_left = f64::NEG_INFINITY;
        let valid_left = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_left_end,
            &mut rho_left,
            p_beg,
            &mut p_left_end,
            h0,
            sign,
            n_leapfrog,
            &mut lsw_left,
            sum_metro_prob,
            rng,
        );
        if !valid_left {
            return false;
        }

        let mut z_propose_right = z.clone();
        let mut p_sharp_right_beg = vec![T::ZERO; d];
        let mut p_right_beg = vec![T::ZERO; d];
        let mut rho_right = vec![T::ZERO; d];
        let mut lsw_right = f64::NEG_INFINITY;
        let valid_right = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_right,
            &mut p_sharp_right_beg,
            p_sharp_end,
            &mut rho_right,
            &mut p_right_beg,
            p_end,
            h0,
            sign,
            n_leapfrog,
            &mut lsw_right,
            sum_metro_prob,
            rng,
        );
        if !valid_right {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_left, lsw_right);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_right > lsw_subtree || rng.random::<f64>() < (lsw_right - lsw_subtree).exp() {
            *z_propose = z_propose_right;
        }

        let rho_subtree = sum(&rho_left, &rho_right);
        add_into(rho, &rho_subtree);
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext = sum(&rho_left, &p_right_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_right_beg, &rho_ext);
        let rho_ext = sum(&rho_right, &p_left_end);
        persist &= criterion(&p_sharp_left_end, p_sharp_end, &rho_ext);
        persist
    }
}

impl<T: Scalar, D: LogDensity<T>> Kernel<T> for Nuts<'_, T, D> {
    fn transition(&mut self, rng: &mut ChaCha8Rng, adapt: bool) -> DrawStats {
        let mut z = self.z.clone();
        self.sample_momentum(&mut z, rng);
        let d = z.q.len();
        let eps_used = self.eps;

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let ps = self.p_sharp(&z.p);
        let mut p_fwd_fwd = z.p.clone();
        let mut ps_fwd_fwd = ps.clone();
        let mut p_fwd_bck = z.p.clone();
        let mut ps_fwd_bck = ps.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut ps_bck_fwd = ps.clone();
        let mut p_bck_bck = z.p.clone();
        let mut ps_bck_bck = ps;

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let h0 = self.hamiltonian(&z);
        let mut n_leapfrog = 0u64;
        let mut sum_metro_prob = 0.0;
        let mut depth = 0;
        self.divergent = false;

        while depth < self.max_depth {
            let mut rho_fwd = vec![T::ZERO; d];
            let mut rho_bck = vec![T::ZERO; d];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                ps_bck_fwd.clone_from(&ps_fwd_bck);
                self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut ps_fwd_bck,
                    &mut ps_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut n_leapfrog,
                    &mut lsw_subtree,
                    &mut sum_metro_prob,
                    rng,
                )
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                ps_fwd_bck.clone_from(&ps_bck_fwd);
                self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut ps_bck_fwd,
                    &mut ps_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut n_leapfrog,
                    &mut lsw_subtree,
                    &mut sum_metro_prob,
                    rng,
                )
            };
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
                z_sample.clone_from(&z_propose);
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            rho = sum(&rho_bck, &rho_fwd);
            let mut persist = criterion(&ps_bck_bck, &ps_fwd_fwd, &rho);
            let rho_ext = sum(&rho_bck, &p_fwd_bck);
            persist &= criterion(&ps_bck_bck, &ps_fwd_bck, &rho_ext);
            let rho_ext = sum(&rho_fwd, &p_bck_fwd);
            persist &= criterion(&ps_bck_fwd, &ps_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }

        let accept_stat = if n_leapfrog > 0 {
            sum_metro_prob / n_leapfrog as f64
        } else {
            0.0
        };
        let energy = self.hamiltonian(&z_sample);
        self.z = z_sample;

        if adapt {
            self.eps = self.da.learn(accept_stat);
            let q: Vec<f64> = self.z.q.iter().map(|v| v.as_f64()).collect();
            let update = self.window.learn(&q).and_then(|c| Metric::from_covariance(q.len(), &c));
            if let Some(metric) = update {
                self.metric = metric;
                let before = self.eps;
                if self.init_stepsize(rng).is_err() {
                    self.eps = before;
                }
                self.da.restart(self.eps);
            }
        }

        DrawStats {
            energy,
            tree_depth: depth as u32,
            divergent: self.divergent,
            step_size: eps_used,
            accept_stat,
            n_grad: n_leapfrog as u32,
        }
    }

    fn end_warmup(&mut self) {
        self.eps = self.da.final_step_size();
    }

    fn position(&self) -> &[T] {
        &self.z.q
    }

    fn step_size(&self) -> f64 {
        self.eps
    }

    fn inverse_metric(&self) -> Vec<f64> {
        self.metric.diagonal()
    }

    fn grad_evals(&self) -> u64 {
        self.n_grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::chain_rng;

    /// Independent Gaussian with per-coordinate scales.
    struct Diag(Vec<f64>);

    impl LogDensity<f64> for Diag {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let mut v = 0.0;
            for ((gi, &xi), &s) in g.iter_mut().zip(x).zip(&self.0) {
                *gi = -xi / (s * s);
                v -= 0.5 * xi * xi / (s * s);
            }
            v
        }
    }

    fn kernel(target: &Diag, eps: f64) -> Nuts<'_, f64, Diag> {
        let start = vec![0.3; target.0.len()];
        Nuts::with_step_size(target, start, eps, 10, 0.8, 0, 0).unwrap()
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = Diag(vec![1.0, 0.5, 2.0, 0.1]);
        let mut k = kernel(&target, 0.05);
        let mut rng = chain_rng(3, 0);
        let mut z = k.z.clone();
        k.sample_momentum(&mut z, &mut rng);
        let start = z.clone();
        for _ in 0..50 {
            k.leapfrog(&mut z, 0.05);
        }
        z.p.iter_mut().for_each(|p| *p = -*p);
        for _ in 0..50 {
            k.leapfrog(&mut z, 0.05);
        }
        for (a, b) in z.q.iter().zip(&start.q) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in z.p.iter().zip(&start.p) {
            assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        let target = Diag(vec![1.0, 0.7, 1.5, 0.9, 1.2]);
        let mut errors = Vec::new();
        for eps in [0.1, 0.05, 0.025] {
            let mut k = kernel(&target, eps);
            let mut rng = chain_rng(5, 0);
            let mut z = k.z.clone();
            k.sample_momentum(&mut z, &mut rng);
            let h0 = k.hamiltonian(&z);
            let steps = (1.0 / eps).round() as usize;
            let mut worst: f64 = 0.0;
            for _ in 0..steps {
                k.leapfrog(&mut z, eps);
                worst = worst.max((k.hamiltonian(&z) - h0).abs());
            }
            errors.push(worst);
        }
        for w in errors.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((1.8..2.2).contains(&order), "order {order}");
        }
    }

    #[test]
    fn step_size_search_brackets_acceptance() {
        let target = Diag(vec![0.01; 3]);
        let mut k = kernel(&target, 1.0);
        let mut rng = chain_rng(1, 0);
        k.init_stepsize(&mut rng).unwrap();
        assert!(k.eps < 0.1 && k.eps > 1e-4, "{}", k.eps);
        assert_eq!(k.z.q, vec![0.3; 3]);
    }

    #[test]
    fn flat_target_fails_step_size_search() {
        struct Flat;
        impl LogDensity<f64> for Flat {
            fn dim(&self) -> usize {
                2
            }
            fn logp_grad(&self, _: &[f64], g: &mut [f64]) -> f64 {
                g.fill(0.0);
                0.0
            }
        }
        let config = SamplerConfig::default();
        let mut rng = chain_rng(1, 0);
        let r = Nuts::new(&Flat, vec![0.0; 2], &config, &mut rng, 4);
        assert!(matches!(r, Err(SamplerError::StepSize { chain: 4, .. })));
    }

    #[test]
    fn huge_step_diverges() {
        let target = Diag(vec![1e-3; 2]);
        let mut k = kernel(&target, 10.0);
        let mut rng = chain_rng(1, 0);
        let s = k.transition(&mut rng, false);
        assert!(s.divergent);
        assert_eq!(s.tree_depth, 0);
        assert_eq!(k.z.q, vec![0.3; 2]);
    }
}
