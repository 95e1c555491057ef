use labelshift::calibrate::{Population, ScoreSet};
use labelshift::data::{Dataset, Unit};
use labelshift::estimators::*;
use proptest::prelude::*;

fn score_set(v: Vec<f64>) -> ScoreSet {
    ScoreSet::raw(v, Population::ValidationMissing).unwrap()
}

fn scores_strategy(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..0.999, min..max)
}

fn labelled(labels: &[u8]) -> Dataset {
    Dataset::new(labels.iter().map(|&y| Unit::observed(vec![y], y).unwrap()).collect()).unwrap()
}

fn reversed<T: Clone>(v: &[T]) -> Vec<T> {
    v.iter().rev().cloned().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn em_ascends_and_matches_grid(s in scores_strategy(10, 500), p0 in 0.1f64..0.9) {
        let set = score_set(s);
        let fit = em_label_shift(&set, p0, &EmSettings::default()).unwrap();
        for w in fit.trajectory.windows(2) {
            let before = log_likelihood(w[0], &set, p0);
            let after = log_likelihood(w[1], &set, p0);
            prop_assert!(after >= before - 1e-12, "{before} -> {after}");
        }
        let oracle = grid_mle(&set, p0, 1e-6).unwrap();
        prop_assert!((fit.pi_hat - oracle).abs() <= 1e-4, "em {} grid {}", fit.pi_hat, oracle);
    }

    #[test]
    fn likelihood_is_concave(s in scores_strategy(1, 50), p0 in 0.05f64..0.95) {
        let set = score_set(s);
        let h = 0.01;
        for i in 1..100 {
            let pi = i as f64 * h;
            let second = log_likelihood(pi + h, &set, p0) - 2.0 * log_likelihood(pi, &set, p0)
                + log_likelihood(pi - h, &set, p0);
            prop_assert!(second <= 1e-10);
        }
    }

    #[test]
    fn adapted_scores_are_self_consistent(s in scores_strategy(10, 200), p0 in 0.1f64..0.9) {
        let set = score_set(s);
        let fit = em_label_shift(&set, p0, &EmSettings { tol: 1e-12, max_iter: 100_000, ..EmSettings::default() }).unwrap();
        prop_assume!(fit.converged && fit.pi_hat > 1e-3 && fit.pi_hat < 1.0 - 1e-3);
        let adapted = adapt_scores(&set, p0, fit.pi_hat).unwrap();
        prop_assert!((adapted.mean() - fit.pi_hat).abs() < 1e-6);
        let again = em_label_shift(&adapted, fit.pi_hat, &EmSettings::default()).unwrap();
        prop_assert!((again.pi_hat - fit.pi_hat).abs() < 1e-6);
    }

    #[test]
    fn normalized_ipw_is_scale_invariant(
        rows in prop::collection::vec((0u8..2, 0.01f64..10.0), 1..100),
        c in 0.001f64..1000.0,
    ) {
        let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let w: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
        let opts = IpwOptions::default();
        let a = ipw_from_weights(&labels, &w, &opts).unwrap();
        let b = ipw_from_weights(&labels, &scaled, &opts).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let clipped = IpwOptions { clip_quantile: Some(0.9), ..opts };
        let a = ipw_from_weights(&labels, &w, &clipped).unwrap();
        let b = ipw_from_weights(&labels, &scaled, &clipped).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn estimators_ignore_unit_order(
        rows in prop::collection::vec((0u8..2, 0.01f64..0.99, 0.01f64..0.99), 2..100),
        p0 in 0.1f64..0.9,
    ) {
        let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let e: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let obs = labelled(&labels);
        let obs_rev = labelled(&reversed(&labels));
        let e_fwd = ScoreSet::raw(e.clone(), Population::ValidationObserved).unwrap();
        let e_rev = ScoreSet::raw(reversed(&e), Population::ValidationObserved).unwrap();
        let opts = IpwOptions::default();

        prop_assert_eq!(estimate_cc(&obs).unwrap(), estimate_cc(&obs_rev).unwrap());
        let d1 = estimate_direct(&score_set(s.clone())).unwrap();
        let d2 = estimate_direct(&score_set(reversed(&s))).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-12);
        let i1 = estimate_ipw(&obs, &e_fwd, &opts).unwrap();
        let i2 = estimate_ipw(&obs_rev, &e_rev, &opts).unwrap();
        prop_assert!((i1 - i2).abs() < 1e-12);
        let m1 = em_label_shift(&score_set(s.clone()), p0, &EmSettings::default()).unwrap().pi_hat;
        let m2 = em_label_shift(&score_set(reversed(&s)), p0, &EmSettings::default()).unwrap().pi_hat;
        prop_assert!((m1 - m2).abs() < 1e-10);
    }

    #[test]
    fn complementing_labels_complements_estimates(
        rows in prop::collection::vec((0u8..2, 0.01f64..0.99, 0.01f64..0.99), 2..100),
        p0 in 0.1f64..0.9,
    ) {
        let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let s_c: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let e = ScoreSet::raw(rows.iter().map(|r| r.2).collect(), Population::ValidationObserved).unwrap();
        let opts = IpwOptions::default();

        prop_assert!((estimate_cc(&labelled(&labels)).unwrap() + estimate_cc(&labelled(&flipped)).unwrap() - 1.0).abs() < 1e-12);
        let d = estimate_direct(&score_set(s.clone())).unwrap() + estimate_direct(&score_set(s_c.clone())).unwrap();
        prop_assert!((d - 1.0).abs() < 1e-12);
        let i = estimate_ipw(&labelled(&labels), &e, &opts).unwrap() + estimate_ipw(&labelled(&flipped), &e, &opts).unwrap();
        prop_assert!((i - 1.0).abs() < 1e-12);
        let tight = EmSettings { tol: 1e-13, max_iter: 100_000, ..EmSettings::default() };
        let a = em_label_shift(&score_set(s), p0, &tight).unwrap();
        let b = em_label_shift(&score_set(s_c), 1.0 - p0, &tight).unwrap();
        prop_assume!(a.converged && b.converged);
        prop_assert!((a.pi_hat + b.pi_hat - 1.0).abs() < 1e-6, "{} {}", a.pi_hat, b.pi_hat);
        let mom = estimate_mom(0.3, 0.7, 0.45).unwrap().value;
        let mom_c = estimate_mom(0.7, 0.3, 0.45).unwrap().value;
        prop_assert!((mom + mom_c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_is_order_independent_and_reproducible(s in scores_strategy(2, 60), seed in any::<u64>()) {
        let set = score_set(s);
        let proc = |draw: &[Vec<usize>]| estimate_direct(&set.select(&draw[0]));
        let a = bootstrap_estimate(labelshift::data::Method::Direct, &[set.len()], 50, seed, proc).unwrap();
        let b = bootstrap_estimate(labelshift::data::Method::Direct, &[set.len()], 50, seed, proc).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.ci_low <= a.ci_high);
        prop_assert!((0.0..=1.0).contains(&a.ci_low) && (0.0..=1.0).contains(&a.ci_high));
    }
}
