use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use claimfreq::data::{ingest_policies, ColumnMapping, IngestOptions, Levels, MalformedRows};
use claimfreq::diagnostics::{ess, split_rhat};
use claimfreq::posterior::{to_constrained, LogDensity, ModelInputs, ModelOptions};
use claimfreq::sampler::{nuts_sample, InitStrategy, SamplerConfig};
use claimfreq::spatial::{build_knn_graph, car_logpdf, CarParams};
use claimfreq::spline::SplineBasis;
use claimfreq::synthetic::{generate, SyntheticData, SyntheticSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
struct Row {
    year: i32,
    exposure: f64,
    vehicle_type: Option<u8>,
    malformed: bool,
}

fn row() -> impl Strategy<Value = Row> {
    (
        1960..1990i32,
        prop_oneof![Just(0.0), 0.01..2.0f64],
        proptest::option::weighted(0.8, 0..4u8),
        proptest::bool::weighted(0.1),
    )
        .prop_map(|(year, exposure, vehicle_type, malformed)| Row {
            year,
            exposure,
            vehicle_type,
            malformed,
        })
}

fn write_rows(path: &Path, rows: &[Row]) {
    let mut s = String::from("exposure,claims,brand,vehicle_type,city,state,year\n");
    for (i, r) in rows.iter().enumerate() {
        let vt = r.vehicle_type.map(|v| format!("type{v}")).unwrap_or_default();
        let claims = if r.malformed {
            "many".to_string()
        } else {
            (i % 3).to_string()
        };
        writeln!(
            s,
            "{},{claims},brand{},{vt},city{},SP,{}",
            r.exposure,
            i % 5,
            i % 7,
            r.year
        )
        .unwrap();
    }
    std::fs::write(path, s).unwrap();
}

fn posterior_fixture() -> &'static (SyntheticData, ModelInputs<f64>) {
    static FIXTURE: OnceLock<(SyntheticData, ModelInputs<f64>)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let spec = SyntheticSpec {
            n_records: 400,
            n_cities: 12,
            n_brand: 4,
            n_category: 3,
            n_covariates: 2,
            n_years: 4,
            k_neighbors: 3,
            n_interior_knots: 2,
            seed: 5,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let inputs = ModelInputs::from_dataset(
            &data.dataset,
            &data.basis,
            data.graph.clone(),
            spec.priors.clone(),
            &ModelOptions::default(),
        )
        .unwrap();
        (data, inputs)
    })
}

fn chains(seed: u64, n_chains: usize, len: usize, phi: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_chains)
        .map(|_| {
            let mut x = 0.0;
            (0..len)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    x = phi * x + (1.0 - phi * phi).sqrt() * z;
                    x
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn level_encoding_round_trips(words in proptest::collection::vec("[a-z]{0,6}", 1..40)) {
        let mut levels = Levels::default();
        let ids: Vec<u32> = words.iter().map(|w| levels.encode(w.clone())).collect();
        for (w, &id) in words.iter().zip(&ids) {
            prop_assert_eq!(levels.decode(id), Some(w));
            prop_assert_eq!(levels.index_of(w), Some(id));
        }
        prop_assert!(ids.iter().all(|&id| (id as usize) < levels.len()));
    }

    #[test]
    fn drop_counts_partition_the_rows(rows in proptest::collection::vec(row(), 1..60)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_rows(&path, &rows);
        let opts = IngestOptions { malformed: MalformedRows::Drop, ..Default::default() };
        let floor = opts.year_floor;
        let pre = rows.iter().filter(|r| r.year < floor).count();
        let zero = rows.iter().filter(|r| r.year >= floor && r.exposure == 0.0).count();
        let untyped = rows.iter().filter(|r| r.year >= floor && r.exposure > 0.0 && r.vehicle_type.is_none()).count();
        let bad = rows
            .iter()
            .filter(|r| r.year >= floor && r.exposure > 0.0 && r.vehicle_type.is_some() && r.malformed)
            .count();
        match ingest_policies(&path, &ColumnMapping::default(), &opts) {
            Ok(t) => {
                let r = &t.report;
                prop_assert_eq!(r.rows_read, rows.len());
                prop_assert_eq!(r.rows_read, r.rows_kept + r.total_dropped());
                prop_assert_eq!(r.dropped_before_year_floor, pre);
                prop_assert_eq!(r.dropped_zero_exposure, zero);
                prop_assert_eq!(r.dropped_missing_vehicle_type, untyped);
                prop_assert_eq!(r.dropped_malformed, bad);
                prop_assert_eq!(t.records.len(), r.rows_kept);
            }
            // a file with nothing left is refused
            Err(_) => prop_assert_eq!(pre + zero + untyped + bad, rows.len()),
        }
    }

    #[test]
    fn spline_coefficient_gradient_is_the_basis(
        n_knots in 1..8usize,
        degree in 1..4usize,
        u in 0.0..1.0f64,
        coef in proptest::collection::vec(-3.0..3.0f64, 12),
    ) {
        let xs: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 4.0).collect();
        let basis = SplineBasis::build(&xs, n_knots, degree).unwrap();
        let (lo, hi) = basis.domain();
        let x = lo + u * (hi - lo);
        let c = &coef[..basis.len()];
        let b = basis.evaluate(x);
        let g = |c: &[f64]| basis.design_matrix(&[x]).row_dot(0, c);
        for l in 0..basis.len() {
            let h = 1e-6;
            let mut up = c.to_vec();
            let mut dn = c.to_vec();
            up[l] += h;
            dn[l] -= h;
            let fd = (g(&up) - g(&dn)) / (2.0 * h);
            prop_assert!((fd - b[l]).abs() <= 1e-8 * b[l].abs().max(1.0), "l={l}: fd {fd} vs {}", b[l]);
        }
    }

    #[test]
    fn car_density_is_concave_in_eta(
        seed in any::<u64>(),
        n in 3..80usize,
        k in 1..5usize,
        rho in 0.01..0.99f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-30.0..0.0), rng.random_range(-60.0..-30.0)]).collect();
        let graph = build_knn_graph(&coords, k.min(n - 1)).unwrap();
        let eta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let zero = vec![0.0; n];
        let at = |e: &[f64]| car_logpdf(&graph, CarParams { rho, eta: e }).unwrap();
        // log p(0) - log p(eta) = eta' (D - rho W) eta / 2
        prop_assert!(at(&zero) - at(&eta) > 0.0);
        let half: Vec<f64> = eta.iter().map(|e| 0.5 * e).collect();
        prop_assert!(at(&half) >= 0.5 * (at(&zero) + at(&eta)));
    }

    #[test]
    fn rhat_is_invariant_to_affine_maps(seed in any::<u64>(), a in prop_oneof![-10.0..-0.1f64, 0.1..10.0f64], b in -100.0..100.0f64) {
        let x = chains(seed, 4, 60, 0.5);
        let y: Vec<Vec<f64>> = x.iter().map(|c| c.iter().map(|v| a * v + b).collect()).collect();
        let rx = split_rhat(&x.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
        let ry = split_rhat(&y.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
        prop_assert!((rx - ry).abs() < 1e-9 * rx, "{rx} vs {ry}");
    }

    #[test]
    fn ess_of_positively_correlated_chains_is_bounded(seed in any::<u64>(), phi in 0.0..0.95f64) {
        let x = chains(seed, 4, 500, phi);
        let e = ess(&x.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
        prop_assert!(e > 0.0 && e <= 1.1 * 2000.0, "ess {e}");
    }

    #[test]
    fn log_posterior_is_deterministic(x in proptest::collection::vec(-1.5..1.5f64, 64)) {
        let (_, inputs) = posterior_fixture();
        let theta: Vec<f64> = x.iter().cycle().take(inputs.dim()).copied().collect();
        let mut g1 = vec![0.0; inputs.dim()];
        let mut g2 = vec![0.0; inputs.dim()];
        let v1 = inputs.logp_grad(&theta, &mut g1);
        let v2 = inputs.logp_grad(&theta, &mut g2);
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        prop_assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rates_see_the_city_noise_only_through_epsilon(
        x in proptest::collection::vec(-1.0..1.0f64, 64),
        t in 0.2..5.0f64,
    ) {
        let (_, inputs) = posterior_fixture();
        let theta: Vec<f64> = x.iter().cycle().take(inputs.dim()).copied().collect();
        let p = to_constrained(inputs.layout(), &theta).unwrap();
        let mut q = p.clone();
        q.sigma_eps *= t;
        q.delta.iter_mut().for_each(|d| *d /= t);
        q.eta.iter_mut().for_each(|e| *e /= t);
        let a = inputs.predict_rates(&p).unwrap();
        let b = inputs.predict_rates(&q).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            prop_assert!((ra - rb).abs() <= 1e-12 * ra.max(1.0), "{ra} vs {rb}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulated_claims_track_their_rates(seed in any::<u64>()) {
        let spec = SyntheticSpec { n_records: 3000, n_cities: 15, seed, ..Default::default() };
        let data = generate(&spec).unwrap();
        let n = data.rates.len() as f64;
        let total: f64 = data.rates.iter().sum();
        let y: f64 = data.dataset.records.iter().map(|r| f64::from(r.claim_count)).sum();
        prop_assert!((y - total).abs() / n <= 3.0 * total.sqrt() / n, "mean y {} vs mean rate {}", y / n, total / n);
    }

    #[test]
    fn nuts_is_a_function_of_its_seed(seed in any::<u64>()) {
        struct Normal;
        impl LogDensity<f64> for Normal {
            fn dim(&self) -> usize {
                3
            }
            fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
                for (g, x) in g.iter_mut().zip(x) {
                    *g = -x;
                }
                -0.5 * x.iter().map(|v| v * v).sum::<f64>()
            }
        }
        let config = SamplerConfig {
            n_warmup: 50,
            n_samples: 30,
            thin: 1,
            n_chains: 2,
            init: InitStrategy::Random,
            seed,
            ..Default::default()
        };
        let a = nuts_sample(&Normal, &config, &[0.0; 3]).unwrap();
        let b = nuts_sample(&Normal, &config, &[0.0; 3]).unwrap();
        for (ca, cb) in a.chains.iter().zip(&b.chains) {
            prop_assert!(ca.draws.iter().zip(&cb.draws).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
