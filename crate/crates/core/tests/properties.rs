use proptest::prelude::*;

use clustrial::dataset::{read_csv, write_csv, CsvSchema, OutcomeFamily, PatientRecord, TrialDataset, WeightScheme};
use clustrial::estimators::{aipw_center, pool, Estimand};
use clustrial::rng::derive_seed;
use clustrial::variance::{approximate_df, db_heterogeneity, dl_heterogeneity, hierarchical_closed_form, reml_heterogeneity};

fn meta() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|k| (prop::collection::vec(-5.0..5.0f64, k), prop::collection::vec(0.01..3.0f64, k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pooling_weights_sum_to_one(sizes in prop::collection::vec(1usize..200, 1..60)) {
        for scheme in [WeightScheme::EqualCenters, WeightScheme::EqualPatients] {
            let w = scheme.weights_for_sizes(&sizes);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn df_decreases_between_bounds(sizes in prop::collection::vec(1usize..100, 2..40), r1 in 0.0..1.0f64, r2 in 0.0..1.0f64) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let total: usize = sizes.iter().sum();
        let a = approximate_df(&sizes, lo);
        let b = approximate_df(&sizes, hi);
        prop_assert!(a >= b - 1e-9);
        prop_assert!(b >= (sizes.len() - 1) as f64 - 1e-9);
        prop_assert!(a <= (total - 1) as f64 + 1e-9);
    }

    #[test]
    fn heterogeneity_is_shift_invariant_and_scales((tau, s2) in meta(), shift in -10.0..10.0f64, scale in 0.2..5.0f64) {
        let shifted: Vec<f64> = tau.iter().map(|t| t + shift).collect();
        let scaled: Vec<f64> = tau.iter().map(|t| t * scale).collect();
        let s2_scaled: Vec<f64> = s2.iter().map(|v| v * scale * scale).collect();
        let mean = tau.iter().sum::<f64>() / tau.len() as f64;

        let dl = dl_heterogeneity(&tau, &s2).unwrap().sigma2_u;
        prop_assert!(dl >= 0.0);
        prop_assert!((dl_heterogeneity(&shifted, &s2).unwrap().sigma2_u - dl).abs() <= 1e-9 * (1.0 + dl));
        prop_assert!((dl_heterogeneity(&scaled, &s2_scaled).unwrap().sigma2_u - dl * scale * scale).abs() <= 1e-8 * (1.0 + dl * scale * scale));

        let reml = reml_heterogeneity(&tau, &s2).unwrap().sigma2_u;
        prop_assert!(reml >= 0.0);
        prop_assert!((reml_heterogeneity(&shifted, &s2).unwrap().sigma2_u - reml).abs() <= 1e-6 * (1.0 + reml));

        let db = db_heterogeneity(&tau, &s2, mean).unwrap();
        prop_assert!(db.sigma2_u >= 0.0);
        prop_assert_eq!(db.sigma2_u, db.pre_truncation.unwrap().max(0.0));
        let db_shift = db_heterogeneity(&shifted, &s2, mean + shift).unwrap().pre_truncation.unwrap();
        prop_assert!((db_shift - db.pre_truncation.unwrap()).abs() <= 1e-9 * (1.0 + db.pre_truncation.unwrap().abs()));
    }

    #[test]
    fn aipw_with_perfect_predictions_is_their_mean(
        rows in prop::collection::vec((0u8..2, -3.0..3.0f64, -3.0..3.0f64, 0.05..0.95f64), 1..40)
    ) {
        // Y equals the prediction for the observed arm, so residual terms vanish.
        let a: Vec<f64> = rows.iter().map(|r| f64::from(r.0)).collect();
        let m1: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let m0: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let p: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let y: Vec<f64> = rows.iter().map(|r| if r.0 == 1 { r.1 } else { r.2 }).collect();
        let c = aipw_center("c", &a, &y, &p, &m1, &m0).unwrap();
        let n = rows.len() as f64;
        prop_assert!((c.tau1_hat - m1.iter().sum::<f64>() / n).abs() < 1e-10);
        prop_assert!((c.tau0_hat - m0.iter().sum::<f64>() / n).abs() < 1e-10);
        prop_assert!((c.value(Estimand::Ate) - (c.tau1_hat - c.tau0_hat)).abs() < 1e-12);
    }

    #[test]
    fn pooled_value_lies_within_center_range(values in prop::collection::vec((-5.0..5.0f64, 1usize..10), 1..20)) {
        let centers: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(j, &(v, n))| {
                let ones = vec![1.0; n];
                let half = vec![0.5; n];
                let y = vec![v; n];
                aipw_center(&format!("c{j}"), &ones, &y, &half, &y, &y).unwrap()
            })
            .collect();
        let lo = values.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
        let hi = values.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
        for scheme in [WeightScheme::EqualCenters, WeightScheme::EqualPatients] {
            let p = pool(centers.clone(), scheme, Estimand::CounterfactualMeanTreated).unwrap();
            prop_assert!(p.value >= lo - 1e-12 && p.value <= hi + 1e-12);
        }
    }

    #[test]
    fn closed_form_reduces_to_residual_over_n(sizes in prop::collection::vec(prop::collection::vec(1usize..20, 1..5), 1..10), s2 in 0.1..5.0f64) {
        let omega = vec![1.0; sizes.len()];
        let n: usize = sizes.iter().flatten().sum();
        let v = hierarchical_closed_form(&omega, &sizes, 0.0, 0.0, s2);
        prop_assert!((v - s2 / n as f64).abs() < 1e-12);
        // adding variance at any level can only increase the variance
        prop_assert!(hierarchical_closed_form(&omega, &sizes, 0.3, 0.2, s2) >= v);
    }

    #[test]
    fn derived_seeds_are_pure_and_path_sensitive(master in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assert_eq!(derive_seed(master, &[a, b]), derive_seed(master, &[a, b]));
        if a != b {
            prop_assert_ne!(derive_seed(master, &[a, b]), derive_seed(master, &[b, a]));
        }
        prop_assert_ne!(derive_seed(master, &[a]), derive_seed(master, &[a, 0]));
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec((0usize..4, 0u8..2, -100.0..100.0f64, -10.0..10.0f64), 2..40)) {
        let records: Vec<PatientRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(c, a, y, x))| PatientRecord {
                patient_id: format!("p{i}"),
                center_id: format!("site{}", if i < 2 { i } else { c }),
                cluster_id: None,
                treatment: a,
                covariates: vec![x],
                outcome: y,
            })
            .collect();
        let data = TrialDataset::new(records, OutcomeFamily::Gaussian, vec!["x".into()]).unwrap();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::canonical(&data), OutcomeFamily::Gaussian).unwrap();
        prop_assert_eq!(back.records(), data.records());
        prop_assert_eq!(back.center_ids(), data.center_ids());
    }
}
