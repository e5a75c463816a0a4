use rayon::prelude::*;

use super::inputs::ModelInputs;
use super::{ParameterBlock, PosteriorError, Result};
use crate::scalar::{logistic, softplus, Scalar};
use crate::spatial::{car_logpdf_and_grad, CarParams};

/// A differentiable log density on `R^d`.
pub trait LogDensity<T: Scalar>: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density and writes its gradient into `grad`. A
    /// non-finite value or gradient marks the point as outside the support.
    fn logp_grad(&self, x: &[T], grad: &mut [T]) -> T;

    fn logp(&self, x: &[T]) -> T {
        let mut g = vec![T::ZERO; self.dim()];
        self.logp_grad(x, &mut g)
    }
}

impl<T: Scalar, D: LogDensity<T> + ?Sized> LogDensity<T> for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn logp_grad(&self, x: &[T], grad: &mut [T]) -> T {
        (**self).logp_grad(x, grad)
    }
}

/// The model posterior over unconstrained coordinates.
pub type Posterior<T> = ModelInputs<T>;

impl<T: Scalar> LogDensity<T> for ModelInputs<T> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn logp_grad(&self, x: &[T], grad: &mut [T]) -> T {
        self.evaluate(x, grad)
    }
}

/// Value and analytic gradient of the log posterior at unconstrained
/// `theta`, without the `log(y!)` constant. Non-finite values are returned
/// as-is for the caller to reject.
pub fn log_posterior<T: Scalar>(theta: &[T], inputs: &ModelInputs<T>) -> Result<(T, Vec<T>)> {
    if theta.len() != inputs.dim() {
        return Err(PosteriorError::Dimension {
            got: theta.len(),
            want: inputs.dim(),
        });
    }
    let mut grad = vec![T::ZERO; theta.len()];
    let v = inputs.evaluate(theta, &mut grad);
    Ok((v, grad))
}

/// Poisson log-likelihood including `log(y!)`.
pub fn log_likelihood<T: Scalar>(p: &ParameterBlock<T>, inputs: &ModelInputs<T>) -> Result<T> {
    let eta = inputs.cell_log_rates(p)?;
    let mut total = T::ZERO;
    for (c, &e) in eta.iter().enumerate() {
        total += inputs.y[c] * e - inputs.weight[c] * e.exp();
    }
    Ok(total - T::lit(inputs.log_factorial_sum))
}

/// Per-cell partial sums: the likelihood value followed by the residual
/// accumulators for spline, factor levels, cities and years.
struct Partial<T> {
    value: T,
    acc: Vec<T>,
}

fn pairwise<T: Scalar>(mut parts: Vec<Partial<T>>) -> Partial<T> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.value += b.value;
                for (x, y) in a.acc.iter_mut().zip(&b.acc) {
                    *x += *y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("at least one partition")
}

struct Effects<T> {
    c: Vec<T>,
    v: Vec<T>,
    u: Vec<T>,
    s: Vec<T>,
}

impl<T: Scalar> ModelInputs<T> {
    fn effects_from(&self, p: &ParameterBlock<T>) -> Effects<T> {
        let eps = p.epsilon();
        Effects {
            c: p.c.clone(),
            v: p.v.concat(),
            u: self.city_effect(&p.gamma, &eps),
            s: p.time_effect(),
        }
    }

    fn city_effect(&self, gamma: &[T], eps: &[T]) -> Vec<T> {
        let m = gamma.len();
        eps.iter()
            .enumerate()
            .map(|(j, &e)| {
                let z = &self.covariates[j * m..(j + 1) * m];
                e + z.iter().zip(gamma).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect()
    }

    #[inline]
    fn cell_eta(&self, i: usize, e: &Effects<T>) -> T {
        let p = self.factor_offsets.len();
        let mut eta =
            self.log_alpha[i] + e.u[self.city[i] as usize] + e.s[self.year[i] as usize] + self.design.row_dot(i, &e.c);
        for &l in &self.levels[i * p..(i + 1) * p] {
            eta += e.v[l as usize];
        }
        eta
    }

    /// Log rate per unit weight for every cell.
    pub(crate) fn cell_log_rates(&self, p: &ParameterBlock<T>) -> Result<Vec<T>> {
        p.check_dims(self.dims())?;
        let e = self.effects_from(p);
        Ok((0..self.n_cells()).map(|i| self.cell_eta(i, &e)).collect())
    }

    /// Expected claim count `lambda_i` of every record.
    pub fn predict_rates(&self, p: &ParameterBlock<T>) -> Result<Vec<T>> {
        let eta = self.cell_log_rates(p)?;
        let lam: Vec<T> = eta.iter().map(|e| e.exp()).collect();
        let mut out = Vec::with_capacity(self.n_records());
        for (i, &c) in self.record_cell.iter().enumerate() {
            let l = lam[c as usize];
            if !l.is_finite() {
                return Err(PosteriorError::Overflow {
                    record: i,
                    log_rate: eta[c as usize].as_f64(),
                });
            }
            out.push(l);
        }
        Ok(out)
    }

    fn partial(&self, lo: usize, hi: usize, e: &Effects<T>) -> Partial<T> {
        let d = self.dims();
        let (nl, nv, nj) = (d.n_spline, e.v.len(), d.n_cities);
        let (ov, os) = (nl, nl + nv + nj);
        let mut acc = vec![T::ZERO; os + d.n_years];
        let p = self.factor_offsets.len();
        let w = self.design.width();
        let first = &self.design.first_columns()[lo..hi];
        let basis = &self.design.values()[lo * w..hi * w];
        let levels = &self.levels[lo * p..hi * p];
        let city = &self.city[lo..hi];
        let year = &self.year[lo..hi];

        // gather: linear predictor of every cell
        let mut r: Vec<T> = self.log_alpha[lo..hi].to_vec();
        for (k, eta) in r.iter_mut().enumerate() {
            let f = first[k] as usize;
            let mut sum = e.u[city[k] as usize] + e.s[year[k] as usize];
            for (&b, &c) in basis[k * w..(k + 1) * w].iter().zip(&e.c[f..f + w]) {
                sum += b * c;
            }
            for &l in &levels[k * p..(k + 1) * p] {
                sum += e.v[l as usize];
            }
            *eta += sum;
        }

        // value, then residuals y - lambda in place
        let mut value = T::ZERO;
        for ((eta, &y), &wt) in r.iter_mut().zip(&self.y[lo..hi]).zip(&self.weight[lo..hi]) {
            let lam = wt * eta.exp();
            value += y * *eta - lam;
            *eta = y - lam;
        }

        // scatter
        let (acc_c, rest) = acc.split_at_mut(ov);
        let (acc_v, rest) = rest.split_at_mut(nv);
        let (acc_u, acc_s) = rest.split_at_mut(nj);
        for (k, &rk) in r.iter().enumerate() {
            let f = first[k] as usize;
            for (a, &b) in acc_c[f..f + w].iter_mut().zip(&basis[k * w..(k + 1) * w]) {
                *a += rk * b;
            }
            for &l in &levels[k * p..(k + 1) * p] {
                acc_v[l as usize] += rk;
            }
            acc_u[city[k] as usize] += rk;
            acc_s[year[k] as usize] += rk;
        }
        Partial { value, acc }
    }

    fn likelihood_partials(&self, e: &Effects<T>) -> Partial<T> {
        let run = |&(lo, hi): &(usize, usize)| self.partial(lo, hi, e);
        let parts: Vec<Partial<T>> = match &self.pool {
            None => self.partitions.iter().map(run).collect(),
            Some(pool) => pool.install(|| self.partitions.par_iter().map(run).collect()),
        };
        pairwise(parts)
    }

    pub(crate) fn evaluate(&self, x: &[T], grad: &mut [T]) -> T {
        let s = self.layout.slots();
        let d = self.dims().clone();
        let np = d.n_factors();
        let pr = &self.priors;
        let half_log_2pi = T::HALF * T::TAU().ln();
        let scale_var = T::lit(pr.scale_sd * pr.scale_sd);
        let half_normal_const = T::HALF * T::lit(2.0 / std::f64::consts::PI).ln() - T::lit(pr.scale_sd).ln();
        grad.iter_mut().for_each(|g| *g = T::ZERO);

        let sigma_g = x[s.sigma_g].exp();
        let sigma_v: Vec<T> = x[s.sigma_v..s.sigma_v + np].iter().map(|v| v.exp()).collect();
        let sigma_eps = x[s.sigma_eps].exp();
        let sigma_xi = x[s.sigma_xi].exp();
        let phi = logistic(x[s.phi]);
        let rho = logistic(x[s.rho]);

        let c_raw = &x[s.spline..s.spline + d.n_spline];
        let nv: usize = d.factor_levels.iter().sum();
        let v_raw = &x[s.factors..s.factors + nv];
        let gamma = &x[s.covariates..s.covariates + d.n_covariates];
        let delta = &x[s.delta..s.delta + d.n_cities];
        let eta_sp = &x[s.eta..s.eta + d.n_cities];
        let xi_raw = &x[s.xi..s.xi + d.n_increments()];

        let c: Vec<T> = scaled(c_raw, sigma_g, s.noncentered_spline);
        let mut v = Vec::with_capacity(nv);
        for (k, &lv) in d.factor_levels.iter().enumerate() {
            let o = self.factor_offsets[k];
            v.extend(scaled(&v_raw[o..o + lv], sigma_v[k], s.noncentered_factors));
        }
        let a = sigma_eps * (T::ONE - phi).sqrt();
        let b = sigma_eps * phi.sqrt();
        let eps: Vec<T> = delta.iter().zip(eta_sp).map(|(&dd, &ee)| a * dd + b * ee).collect();
        let u = self.city_effect(gamma, &eps);
        let xi = scaled(xi_raw, sigma_xi, s.noncentered_increments);
        let mut st = Vec::with_capacity(d.n_years);
        let mut run = T::ZERO;
        st.push(run);
        for &r in &xi {
            run += r;
            st.push(run);
        }
        let effects = Effects { c, v, u, s: st };

        let lik = self.likelihood_partials(&effects);
        let mut value = lik.value;
        let (ov, ou, os) = (d.n_spline, d.n_spline + nv, d.n_spline + nv + d.n_cities);
        let acc_c = &lik.acc[..ov];
        let acc_v = &lik.acc[ov..ou];
        let acc_u = &lik.acc[ou..os];
        let acc_s = &lik.acc[os..];

        let std_normal =
            |z: &[T]| -> T { z.iter().map(|&v| -T::HALF * v * v).sum::<T>() - T::from_count(z.len()) * half_log_2pi };
        let scale_prior = |sig: T, log_sig: T| half_normal_const - sig * sig / (T::lit(2.0) * scale_var) + log_sig;
        let scale_grad = |sig: T| T::ONE - sig * sig / scale_var;

        // spline
        let block = NormalBlock {
            raw: c_raw,
            effect: &effects.c,
            acc: acc_c,
            scale: sigma_g,
            noncentered: s.noncentered_spline,
        };
        let (bv, dlog) = block.prior_and_grad(&mut grad[s.spline..s.spline + d.n_spline]);
        value += bv + scale_prior(sigma_g, x[s.sigma_g]);
        grad[s.sigma_g] = dlog + scale_grad(sigma_g);

        // categorical predictors
        for (k, &lv) in d.factor_levels.iter().enumerate() {
            let o = self.factor_offsets[k];
            let block = NormalBlock {
                raw: &v_raw[o..o + lv],
                effect: &effects.v[o..o + lv],
                acc: &acc_v[o..o + lv],
                scale: sigma_v[k],
                noncentered: s.noncentered_factors,
            };
            let (bv, dlog) = block.prior_and_grad(&mut grad[s.factors + o..s.factors + o + lv]);
            value += bv + scale_prior(sigma_v[k], x[s.sigma_v + k]);
            grad[s.sigma_v + k] = dlog + scale_grad(sigma_v[k]);
        }

        // covariates
        let gsd = T::lit(pr.gamma_sd);
        let m = d.n_covariates;
        for (mm, &g) in gamma.iter().enumerate() {
            let zu: T = (0..d.n_cities).map(|j| self.covariates[j * m + mm] * acc_u[j]).sum();
            grad[s.covariates + mm] = zu - g / (gsd * gsd);
            value += -T::HALF * (g / gsd) * (g / gsd) - gsd.ln() - half_log_2pi;
        }

        // city noise and spatial field
        value += std_normal(delta);
        let sqrt_phi = phi.sqrt();
        let sqrt_1m = (T::ONE - phi).sqrt();
        let mut dlog_eps = T::ZERO;
        let mut dphi = T::ZERO;
        for j in 0..d.n_cities {
            grad[s.delta + j] = a * acc_u[j] - delta[j];
            grad[s.eta + j] = b * acc_u[j];
            dlog_eps += acc_u[j] * eps[j];
            dphi += acc_u[j] * (eta_sp[j] * (T::ONE - phi) * sqrt_phi - delta[j] * phi * sqrt_1m);
        }
        value += scale_prior(sigma_eps, x[s.sigma_eps]);
        grad[s.sigma_eps] = dlog_eps + scale_grad(sigma_eps);
        let [pa, pb] = pr.phi_beta.map(T::lit);
        grad[s.phi] = T::HALF * sigma_eps * dphi + pa * (T::ONE - phi) - pb * phi;
        value += beta_logit(x[s.phi], pa, pb);

        let car = car_logpdf_and_grad(
            &self.graph,
            CarParams { rho, eta: eta_sp },
            &mut grad[s.eta..s.eta + d.n_cities],
        );
        let [ra, rb] = pr.rho_beta.map(T::lit);
        match car {
            Ok((cv, crho)) => {
                value += cv;
                grad[s.rho] = crho * rho * (T::ONE - rho) + ra * (T::ONE - rho) - rb * rho;
            }
            Err(_) => return T::neg_infinity(),
        }
        value += beta_logit(x[s.rho], ra, rb);

        // random walk: dS_t / dxi_s = 1 for t > s
        let mut acc_xi = vec![T::ZERO; d.n_increments()];
        let mut suffix = T::ZERO;
        for q in (0..d.n_increments()).rev() {
            suffix += acc_s[q + 1];
            acc_xi[q] = suffix;
        }
        let block = NormalBlock {
            raw: xi_raw,
            effect: &xi,
            acc: &acc_xi,
            scale: sigma_xi,
            noncentered: s.noncentered_increments,
        };
        let (bv, dlog_xi) = block.prior_and_grad(&mut grad[s.xi..s.xi + d.n_increments()]);
        value += bv + scale_prior(sigma_xi, x[s.sigma_xi]);
        grad[s.sigma_xi] = dlog_xi + scale_grad(sigma_xi);

        value
    }
}

fn scaled<T: Scalar>(raw: &[T], scale: T, noncentered: bool) -> Vec<T> {
    if noncentered {
        raw.iter().map(|&r| scale * r).collect()
    } else {
        raw.to_vec()
    }
}

/// A block of `N(0, scale^2)` effects, sampled directly or as
/// `scale * N(0, 1)`.
struct NormalBlock<'a, T> {
    raw: &'a [T],
    effect: &'a [T],
    /// Likelihood derivative with respect to each effect.
    acc: &'a [T],
    scale: T,
    noncentered: bool,
}

impl<T: Scalar> NormalBlock<'_, T> {
    /// Prior log density of the sampled coordinates, writing their full
    /// gradient into `grad`; also returns the derivative in `log scale`.
    fn prior_and_grad(&self, grad: &mut [T]) -> (T, T) {
        let half_log_2pi = T::HALF * T::TAU().ln();
        let n = T::from_count(self.raw.len());
        let mut value = -n * half_log_2pi;
        let mut dlog = T::ZERO;
        if self.noncentered {
            for (((g, &r), &e), &a) in grad.iter_mut().zip(self.raw).zip(self.effect).zip(self.acc) {
                *g = self.scale * a - r;
                value -= T::HALF * r * r;
                dlog += a * e;
            }
        } else {
            let inv_var = (self.scale * self.scale).recip();
            for ((g, &c), &a) in grad.iter_mut().zip(self.raw).zip(self.acc) {
                let z2 = c * c * inv_var;
                *g = a - c * inv_var;
                value -= T::HALF * z2;
                dlog += z2;
            }
            value -= n * self.scale.ln();
            dlog -= n;
        }
        (value, dlog)
    }
}

/// Beta(a, b) log density of `logistic(u)` plus the log-Jacobian.
fn beta_logit<T: Scalar>(u: T, a: T, b: T) -> T {
    let ln_beta = T::lit(statrs::function::beta::ln_beta(a.as_f64(), b.as_f64()));
    -a * softplus(-u) - b * softplus(u) - ln_beta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::{
        log_jacobian, to_constrained, to_unconstrained, BlockForm, ModelOptions, Parameterization, PriorSettings,
    };
    use crate::synthetic::{generate, SyntheticData, SyntheticSpec};
    use rand::{Rng, SeedableRng};
    use statrs::distribution::{Beta as BetaDist, Continuous, Normal};

    fn fixture(n: usize, j: usize, seed: u64) -> SyntheticData {
        generate(&SyntheticSpec {
            n_records: n,
            n_cities: j,
            n_brand: 6,
            n_category: 4,
            n_covariates: 2,
            n_years: 7,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn inputs(data: &SyntheticData, aggregate: bool, workers: usize) -> ModelInputs<f64> {
        inputs_with(data, aggregate, workers, None)
    }

    fn inputs_with(data: &SyntheticData, aggregate: bool, workers: usize, form: Option<BlockForm>) -> ModelInputs<f64> {
        let parameterization = form.map_or_else(Parameterization::default, Parameterization::uniform);
        ModelInputs::from_dataset(
            &data.dataset,
            &data.basis,
            data.graph.clone(),
            PriorSettings::default(),
            &ModelOptions {
                aggregate,
                workers,
                parameterization,
            },
        )
        .unwrap()
    }

    fn random_point(dim: usize, seed: u64, spread: f64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| rng.random_range(-spread..spread)).collect()
    }

    /// Joint log density written directly in constrained space, row by row,
    /// with a dense multivariate normal for the spatial field.
    fn naive_log_joint(data: &SyntheticData, p: &ParameterBlock<f64>) -> f64 {
        let ds = &data.dataset;
        let m = ds.cities.n_covariates();
        let eps = p.epsilon();
        let s = p.time_effect();
        let mut total = 0.0;
        for r in &ds.records {
            let la = r.exposure.ln();
            let g: f64 = data.basis.evaluate(la).iter().zip(&p.c).map(|(b, c)| b * c).sum();
            let j = r.city_id as usize;
            let z = &ds.cities.covariates[j * m..(j + 1) * m];
            let u: f64 = z.iter().zip(&p.gamma).map(|(a, b)| a * b).sum::<f64>() + eps[j];
            let log_lam = la
                + g
                + p.v[0][r.brand_id as usize]
                + p.v[1][r.category_id as usize]
                + u
                + s[(r.vehicle_year - ds.year_floor) as usize];
            total += r.claim_count as f64 * log_lam - log_lam.exp();
        }
        let normal = |x: &[f64], sd: f64| -> f64 {
            let d = Normal::new(0.0, sd).unwrap();
            x.iter().map(|&v| d.ln_pdf(v)).sum()
        };
        let half_normal = |s: f64| Normal::new(0.0, 1.0).unwrap().ln_pdf(s) + 2f64.ln();
        total += normal(&p.c, p.sigma_g) + half_normal(p.sigma_g);
        for (v, &sd) in p.v.iter().zip(&p.sigma_v) {
            total += normal(v, sd) + half_normal(sd);
        }
        total += normal(&p.gamma, 1.0) + normal(&p.delta, 1.0);
        total += normal(&p.xi, p.sigma_xi) + half_normal(p.sigma_xi);
        total += half_normal(p.sigma_eps);
        total += BetaDist::new(1.0, 1.0).unwrap().ln_pdf(p.phi);
        total += BetaDist::new(2.0, 2.0).unwrap().ln_pdf(p.rho);
        let q = data.graph.dense_precision(p.rho);
        let chol = nalgebra::Cholesky::new(q.clone()).unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let e = nalgebra::DVector::from_column_slice(&p.eta);
        let jn = p.eta.len() as f64;
        total += -0.5 * jn * (2.0 * std::f64::consts::PI).ln() + 0.5 * logdet - 0.5 * (q * &e).dot(&e);
        total
    }

    #[test]
    fn single_zero_claim_record_at_unit_rate() {
        let mut data = fixture(200, 10, 1);
        data.dataset.records.truncate(1);
        data.dataset.records[0].exposure = 1.0;
        data.dataset.records[0].claim_count = 0;
        data.dataset.year_max = data.dataset.records[0].vehicle_year;
        let inp = inputs(&data, true, 1);
        let p = ParameterBlock::neutral(inp.dims());
        assert_eq!(log_likelihood(&p, &inp).unwrap(), -1.0);
    }

    #[test]
    fn doubling_exposure_shifts_likelihood() {
        let data = fixture(500, 10, 2);
        let inp = inputs(&data, true, 1);
        let mut p = ParameterBlock::neutral(inp.dims());
        p.v[0][1] = 0.3;
        p.eta[2] = -0.4;
        p.xi[0] = 0.2;
        let base = log_likelihood(&p, &inp).unwrap();
        let lam = inp.predict_rates(&p).unwrap();
        let mut doubled = data.clone();
        for r in &mut doubled.dataset.records {
            r.exposure *= 2.0;
        }
        let inp2 = inputs(&doubled, true, 1);
        let shifted = log_likelihood(&p, &inp2).unwrap();
        let want: f64 = data
            .dataset
            .records
            .iter()
            .zip(&lam)
            .map(|(r, l)| r.claim_count as f64 * 2f64.ln() - l)
            .sum();
        assert!((shifted - base - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn value_matches_naive_joint_density() {
        let data = fixture(800, 15, 3);
        let forms = [None, Some(BlockForm::Centered), Some(BlockForm::NonCentered)];
        for (aggregate, form) in [(true, forms[0]), (false, forms[0]), (true, forms[1]), (true, forms[2])] {
            let inp = inputs_with(&data, aggregate, 1, form);
            for seed in 0..5 {
                let x = random_point(inp.dim(), seed, 1.0);
                let p = to_constrained(inp.layout(), &x).unwrap();
                let want = naive_log_joint(&data, &p) + log_jacobian(inp.layout(), &x).unwrap();
                let got = inp.logp(&x);
                assert!((got - want).abs() < 1e-8 * want.abs(), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = fixture(600, 12, 4);
        let h = 1e-5;
        let forms = [None, Some(BlockForm::Centered), Some(BlockForm::NonCentered)];
        for (seed, form) in forms.into_iter().enumerate() {
            let inp = inputs_with(&data, true, 1, form);
            let x = random_point(inp.dim(), 10 + seed as u64, 0.8);
            let (_, g) = log_posterior(&x, &inp).unwrap();
            for i in 0..x.len() {
                let mut a = x.clone();
                a[i] += h;
                let mut b = x.clone();
                b[i] -= h;
                let fd = (inp.logp(&a) - inp.logp(&b)) / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
                assert!(rel < 1e-6, "coordinate {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn evaluation_is_bit_reproducible_across_workers() {
        let data = fixture(9000, 20, 5);
        let one = inputs(&data, false, 1);
        let three = inputs(&data, false, 3);
        assert!(one.partitions.len() > 1);
        let x = random_point(one.dim(), 7, 0.5);
        let (v1, g1) = log_posterior(&x, &one).unwrap();
        let (v1b, g1b) = log_posterior(&x, &one).unwrap();
        let (v3, g3) = log_posterior(&x, &three).unwrap();
        assert_eq!(v1.to_bits(), v1b.to_bits());
        assert_eq!(v1.to_bits(), v3.to_bits());
        assert!(g1.iter().zip(&g1b).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g3).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn aggregation_preserves_value() {
        let mut data = fixture(300, 8, 6);
        // repeated policies with their own claim counts
        let base = data.dataset.records.clone();
        for k in 1..10 {
            data.dataset
                .records
                .extend(base.iter().map(|r| crate::data::PolicyRecord {
                    claim_count: (r.claim_count + k) % 4,
                    ..*r
                }));
        }
        let agg = inputs(&data, true, 1);
        let raw = inputs(&data, false, 1);
        assert!(agg.n_cells() < raw.n_cells() / 2);
        let x = random_point(agg.dim(), 8, 0.7);
        let (va, ga) = log_posterior(&x, &agg).unwrap();
        let (vr, gr) = log_posterior(&x, &raw).unwrap();
        assert!((va - vr).abs() < 1e-9 * vr.abs());
        for (a, b) in ga.iter().zip(&gr) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
        }
        let p = to_constrained(agg.layout(), &x).unwrap();
        let (la, lr) = (agg.predict_rates(&p).unwrap(), raw.predict_rates(&p).unwrap());
        assert_eq!(la.len(), lr.len());
        assert!(la.iter().zip(&lr).all(|(a, b)| (a - b).abs() < 1e-12 * b));
    }

    #[test]
    fn city_noise_is_linear_in_its_scale() {
        let data = fixture(300, 10, 7);
        let inp = inputs(&data, true, 1);
        let x = random_point(inp.dim(), 9, 1.0);
        let p = to_constrained(inp.layout(), &x).unwrap();
        let mut q = p.clone();
        q.sigma_eps *= 2.5;
        let (ep, eq) = (p.epsilon(), q.epsilon());
        for (a, b) in ep.iter().zip(&eq) {
            assert!((b - 2.5 * a).abs() < 1e-12 * (1.0 + a.abs()));
        }
        // log rates differ exactly by the change in eps of each record's city
        let (lp, lq) = (inp.cell_log_rates(&p).unwrap(), inp.cell_log_rates(&q).unwrap());
        for c in 0..inp.n_cells() {
            let j = inp.city[c] as usize;
            assert!((lq[c] - lp[c] - 1.5 * ep[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn rates_follow_effects() {
        let data = fixture(400, 10, 8);
        let inp = inputs(&data, true, 1);
        let mut p = ParameterBlock::neutral(inp.dims());
        let base = inp.predict_rates(&p).unwrap();
        for (l, r) in base.iter().zip(&data.dataset.records) {
            assert!((l - r.exposure).abs() < 1e-12 * r.exposure);
        }
        p.v[0][3] = 2f64.ln();
        let bumped = inp.predict_rates(&p).unwrap();
        for ((a, b), r) in base.iter().zip(&bumped).zip(&data.dataset.records) {
            let want = if r.brand_id == 3 { 2.0 * a } else { *a };
            assert!((b - want).abs() < 1e-12 * want);
        }
        p.xi[0] = 800.0;
        assert!(matches!(inp.predict_rates(&p), Err(PosteriorError::Overflow { .. })));
    }

    #[test]
    fn single_precision_tracks_double() {
        let data = fixture(500, 10, 9);
        let d64 = inputs(&data, true, 1);
        let d32: ModelInputs<f32> = ModelInputs::from_dataset(
            &data.dataset,
            &data.basis,
            data.graph.clone(),
            PriorSettings::default(),
            &ModelOptions::default(),
        )
        .unwrap();
        let x = random_point(d64.dim(), 11, 0.5);
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let v64 = d64.logp(&x);
        let v32 = d32.logp(&x32) as f64;
        assert!((v64 - v32).abs() < 1e-4 * v64.abs());
    }

    #[test]
    fn round_trip_through_unconstrained() {
        let data = fixture(300, 10, 10);
        let inp = inputs(&data, true, 1);
        let x = to_unconstrained(inp.layout(), &data.truth).unwrap();
        let back = to_constrained(inp.layout(), &x).unwrap();
        for (a, b) in back.flatten().iter().zip(data.truth.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
