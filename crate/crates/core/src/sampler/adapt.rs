/// Nesterov dual averaging of `log(step_size)` toward a target acceptance.
#[derive(Debug, Clone)]
pub(crate) struct DualAveraging {
    target: f64,
    mu: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(target: f64, step_size: f64) -> Self {
        let mut da = Self {
            target,
            mu: 0.0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        };
        da.restart(step_size);
        da
    }

    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        let a = if accept_stat.is_nan() {
            0.0
        } else {
            accept_stat.min(1.0)
        };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    /// Averaged step size used after warmup.
    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford running variance per coordinate, or full covariance.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    dense: bool,
}

impl Welford {
    fn new(d: usize, dense: bool) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; if dense { d * d } else { d }],
            dense,
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        if self.dense {
            let d = x.len();
            let before: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
            self.mean.iter_mut().zip(&before).for_each(|(m, b)| *m += b / n);
            for i in 0..d {
                let after = x[i] - self.mean[i];
                for j in 0..d {
                    self.m2[i * d + j] += after * before[j];
                }
            }
            return;
        }
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Covariance shrunk toward `1e-3 * I`.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        let d = self.mean.len();
        let shrink = 1e-3 * (5.0 / (n + 5.0));
        let mut out: Vec<f64> = self.m2.iter().map(|s| (n / (n + 5.0)) * s / (n - 1.0)).collect();
        if self.dense {
            (0..d).for_each(|i| out[i * d + i] += shrink);
        } else {
            out.iter_mut().for_each(|v| *v += shrink);
        }
        out
    }

    fn restart(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Expanding-window schedule for metric adaptation: an initial
/// fast window (15% of warmup), doubling slow windows, and a terminal fast
/// window (10% of warmup) where only the step size adapts.
#[derive(Debug, Clone)]
pub(crate) struct WindowedVariance {
    n_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    estimator: Welford,
    enabled: bool,
}

const BASE_WINDOW: usize = 25;

impl WindowedVariance {
    pub fn new(d: usize, n_warmup: usize, dense: bool) -> Self {
        let init_buffer = (0.15 * n_warmup as f64) as usize;
        let term_buffer = (0.1 * n_warmup as f64) as usize;
        let room = n_warmup.saturating_sub(init_buffer + term_buffer);
        let window_size = BASE_WINDOW.min(room);
        let enabled = n_warmup >= 20 && window_size > 0;
        Self {
            n_warmup,
            init_buffer,
            term_buffer,
            window_size,
            next_window: (init_buffer + window_size).saturating_sub(1),
            counter: 0,
            estimator: Welford::new(d, dense),
            enabled,
        }
    }

    pub fn n_warmup(&self) -> usize {
        self.n_warmup
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.n_warmup - self.term_buffer
            && self.counter != self.n_warmup
    }

    fn window_ends(&self) -> bool {
        self.counter == self.next_window && self.counter != self.n_warmup
    }

    fn advance_window(&mut self) {
        let last = self.n_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.n_warmup - self.term_buffer {
            self.next_window = last;
        }
    }

    /// Feeds one warmup position. At the end of a slow window returns the
    /// regularized covariance estimate: `d` variances, or a row-major
    /// `d x d` matrix when dense.
    pub fn learn(&mut self, x: &[f64]) -> Option<Vec<f64>> {
        if !self.enabled {
            self.counter += 1;
            return None;
        }
        if self.in_window() {
            self.estimator.add(x);
        }
        let mut estimate = None;
        if self.window_ends() {
            self.advance_window();
            estimate = Some(self.estimator.regularized());
            self.estimator.restart();
        }
        self.counter += 1;
        estimate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_ends_for_thousand_warmup() {
        let mut w = WindowedVariance::new(1, 1000, false);
        let mut ends = Vec::new();
        for i in 0..1000 {
            if w.learn(&[i as f64 % 7.0]).is_some() {
                ends.push(i);
            }
        }
        assert_eq!(ends, [174, 224, 324, 899]);
    }

    #[test]
    fn short_warmup_skips_metric() {
        let mut w = WindowedVariance::new(2, 10, false);
        assert!((0..10).all(|i| w.learn(&[i as f64, 0.0]).is_none()));
    }

    #[test]
    fn regularized_variance() {
        let mut w = WindowedVariance::new(1, 100, false);
        let m = (0..40)
            .find_map(|i| w.learn(&[if i % 2 == 0 { 1.0 } else { -1.0 }]))
            .unwrap();
        // first window holds samples 15..=39, 25 alternating values
        let var = 25.0 / 24.0 * (1.0 - 1.0 / 625.0);
        let want = 25.0 / 30.0 * var + 1e-3 * 5.0 / 30.0;
        assert!((m[0] - want).abs() < 1e-12, "{} vs {want}", m[0]);
    }

    #[test]
    fn dense_estimate_matches_two_pass_covariance() {
        let xs: Vec<[f64; 2]> = (0..25)
            .map(|i| [(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos() + 0.1 * i as f64])
            .collect();
        let mut w = WindowedVariance::new(2, 100, true);
        let mut got = None;
        for i in 0..40 {
            let x = if i < 15 { [9.0, 9.0] } else { xs[i - 15] };
            if let Some(e) = w.learn(&x) {
                got = Some(e);
            }
        }
        let got = got.unwrap();
        let mean = [0, 1].map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / 25.0);
        for a in 0..2 {
            for b in 0..2 {
                let cov = xs.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum::<f64>() / 24.0;
                let want = 25.0 / 30.0 * cov + if a == b { 1e-3 * 5.0 / 30.0 } else { 0.0 };
                assert!((got[a * 2 + b] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dual_averaging_moves_toward_target() {
        let mut da = DualAveraging::new(0.8, 1.0);
        let mut eps = 1.0;
        for _ in 0..200 {
            eps = da.learn(0.2);
        }
        assert!(eps < 1.0);
        let mut da = DualAveraging::new(0.8, 1.0);
        for _ in 0..200 {
            eps = da.learn(1.0);
        }
        assert!(eps > 1.0 && da.final_step_size() > 1.0);
    }
}
