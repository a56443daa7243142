mod common;

use dtdl::dictionary::{self, project_columns};
use dtdl::disaggregate::disaggregate_dataset;
use dtdl::lstm::{self, LstmAeParams};
use dtdl::metrics::disagg_accuracy;
use dtdl::signal::{make_windows, split_dataset};
use dtdl::sparse::{self, soft_threshold};
use dtdl::{gradcheck, synth_household, Dictionary, DisaggregationOptions, HyperParams, SyntheticSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn soft_threshold_is_the_l1_prox(v in -10.0f64..10.0, t in 0.0f64..5.0) {
        let s = soft_threshold(v, t);
        prop_assert!(s.abs() <= v.abs());
        prop_assert!(s == 0.0 || s.signum() == v.signum());
        // The prox minimizes 0.5 (x - v)^2 + t |x|; compare against nearby points.
        let obj = |x: f64| 0.5 * (x - v).powi(2) + t * x.abs();
        for dx in [-1e-3, 1e-3, -0.5, 0.5] {
            prop_assert!(obj(s) <= obj(s + dx) + 1e-12);
        }
    }

    #[test]
    fn window_counts_and_split_sizes(t in 40usize..400, omega in 2usize..12) {
        let signal: Vec<f64> = (0..t).map(|x| (x % 7) as f64).collect();
        let ds = make_windows(&[signal], omega).unwrap();
        prop_assert_eq!(ds.windows(), t / omega);
        let k = ds.windows();
        if k >= 6 {
            let boundary = k / 2;
            let split = split_dataset(&ds, boundary).unwrap();
            prop_assert_eq!(split.train.windows(), boundary * 4 / 5);
            prop_assert_eq!(split.train.windows() + split.validation.windows(), boundary);
            prop_assert_eq!(split.test.windows(), k - boundary);
            prop_assert_eq!(split.test.first_window(), boundary);
        }
    }

    #[test]
    fn projection_lands_in_the_unit_ball_and_is_idempotent(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_matrix(rows, cols, &mut rng) * 3.0;
        let p = project_columns(&d);
        for c in p.column_iter() {
            prop_assert!(c.norm() <= 1.0 + 1e-12);
        }
        prop_assert!((project_columns(&p) - &p).amax() < 1e-15);
    }

    #[test]
    fn closed_form_matches_normal_equations(seed in 0u64..10_000, d in 1usize..5, n in 1usize..5, cols in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_matrix(d, cols, &mut rng);
        let a = random_matrix(n, cols, &mut rng);
        let phi: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let got = dictionary::closed_form_d(&f, &a, &phi).unwrap();
        let to_rows = |m: &DMatrix<f64>| -> common::Mat {
            (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
        };
        let want = common::normal_equation_d(&to_rows(&f), &to_rows(&a), &phi);
        for r in 0..d {
            for c in 0..n {
                prop_assert!((got[(r, c)] - want[r][c]).abs() < 1e-8 * (1.0 + want[r][c].abs()));
            }
        }
    }

    #[test]
    fn incoherence_is_nonnegative_and_vanishes_for_one_device(seed in 0u64..10_000, d in 1usize..6, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let one = Dictionary::new(random_matrix(d, n, &mut rng), vec![n]).unwrap();
        prop_assert_eq!(dictionary::incoherence_value(&one), 0.0);
        let two = Dictionary::new(random_matrix(d, 2 * n, &mut rng), vec![n, n]).unwrap();
        prop_assert!(dictionary::incoherence_value(&two) >= 0.0);
    }

    #[test]
    fn lasso_satisfies_the_subgradient_conditions(seed in 0u64..10_000, d in 2usize..6, per in 1usize..4, l1 in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let atoms = project_columns(&random_matrix(d, 2 * per, &mut rng));
        let dict = Dictionary::new(atoms.clone(), vec![per, per]).unwrap();
        let f = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let res = sparse::lasso_code(&f, &dict, l1, &sparse::lasso_options()).unwrap();
        prop_assume!(res.converged);
        // Gradient of ||f - D a||^2 is -2 D^T (f - D a).
        let g = -2.0 * atoms.transpose() * (&f - &atoms * &res.code);
        for (a, gi) in res.code.iter().zip(g.iter()) {
            if a.abs() > 1e-9 {
                prop_assert!((gi + l1 * a.signum()).abs() < 1e-4, "active {} {}", a, gi);
            } else {
                prop_assert!(gi.abs() <= l1 + 1e-4, "inactive {}", gi);
            }
        }
    }

    #[test]
    fn lstm_states_stay_bounded(seed in 0u64..10_000, m in 1usize..6, omega in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = common::random_params(m, 3.0, &mut rng);
        let snippet: Vec<f64> = (0..omega).map(|_| rng.random_range(0.0..1.0)).collect();
        let pass = lstm::forward(&params, &snippet);
        prop_assert_eq!(pass.reconstruction.len(), omega);
        prop_assert_eq!(pass.tape.len(), 2 * omega);
        prop_assert!(pass.feature.iter().all(|h| h.abs() < 1.0));
    }

    #[test]
    fn parameter_flattening_round_trips(seed in 0u64..10_000, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = common::random_params(m, 1.0, &mut rng);
        let flat = params.flatten();
        prop_assert_eq!(flat.len(), 4 * m + 4 * m * m + 4 * m + m + 1);
        prop_assert_eq!(LstmAeParams::unflatten(m, &flat).unwrap(), params);
        prop_assert!(LstmAeParams::unflatten(m, &flat[1..]).is_err());
    }

    #[test]
    fn perfect_estimates_score_100(seed in 0u64..10_000, k in 1usize..6, l in 1usize..4, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| (0..l).map(|_| (0..w).map(|_| rng.random_range(0.0..100.0)).collect()).collect())
            .collect();
        let agg: Vec<Vec<f64>> = truth
            .iter()
            .map(|win| (0..w).map(|t| win.iter().map(|d| d[t]).sum()).collect())
            .collect();
        prop_assume!(agg.iter().flatten().sum::<f64>() > 0.0);
        let acc = disagg_accuracy(&truth, &truth, &agg).unwrap();
        prop_assert!((acc - 100.0).abs() < 1e-9);
        let scaled: Vec<Vec<Vec<f64>>> = truth
            .iter()
            .map(|win| win.iter().map(|d| d.iter().map(|x| x * 1.5).collect()).collect())
            .collect();
        prop_assert!(disagg_accuracy(&scaled, &truth, &agg).unwrap() <= 100.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn analytic_gradients_agree_with_differences(seed in 0u64..1_000_000) {
        for check in gradcheck::run_suite(seed, 2) {
            prop_assert!(check.passed, "{:?}", check);
        }
    }

    #[test]
    fn off_devices_get_zero_and_estimates_are_nonnegative(seed in 0u64..1000, tau in 0.0f64..1.0) {
        let mut spec = SyntheticSpec::reference();
        spec.duration = 40 * 6;
        spec.seed = seed;
        let ds = synth_household(&spec).unwrap().windowed(6).unwrap();
        let hp = HyperParams {
            omega: 6,
            m: 3,
            atoms_per_device: 2,
            max_outer_iters: 1,
            lambda1: 0.003,
            seed,
            ..HyperParams::default()
        };
        let model = dtdl::train(&ds, &hp).unwrap();
        let opts = DisaggregationOptions { tau_rel: tau, ..DisaggregationOptions::default() };
        let report = disaggregate_dataset(&model, &ds, &opts).unwrap();
        for w in &report.windows {
            for (est, on) in w.estimates.iter().zip(&w.on) {
                prop_assert!(est.iter().all(|x| *x >= 0.0 && x.is_finite()));
                if !on {
                    prop_assert!(est.iter().all(|x| *x == 0.0));
                }
            }
        }
    }
}
