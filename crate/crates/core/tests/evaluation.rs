use proptest::prelude::*;

use oncosynth::evaluate::{box_stats, compare, evaluate_cohort, histogram, kaplan_meier, CohortCase, EvalOptions};
use oncosynth::obds::Gender;
use oncosynth_oracles::{fixtures, order_stats, product_limit};

proptest! {
    #[test]
    fn box_stats_match_order_statistics(values in prop::collection::vec(-1e4f64..1e4, 1..200)) {
        let b = box_stats(&values).unwrap();
        let o = order_stats(&values);
        prop_assert_eq!((b.q1, b.median, b.q3), (o.q1, o.median, o.q3));
        prop_assert_eq!((b.lower_fence, b.upper_fence), (o.lower_fence, o.upper_fence));
        prop_assert_eq!(b.outlier_fraction, o.outlier_fraction);
        prop_assert!(b.min <= b.q1 && b.q1 <= b.median && b.median <= b.q3 && b.q3 <= b.max);
    }

    #[test]
    fn kaplan_meier_matches_product_limit(obs in prop::collection::vec((0i64..60, any::<bool>()), 1..10)) {
        let curve = kaplan_meier(&obs);
        for (t, s) in product_limit(&obs) {
            prop_assert!((curve.at(t) - s).abs() <= 1e-12, "t={} {} vs {}", t, curve.at(t), s);
        }
        for w in curve.points.windows(2) {
            prop_assert!(w[1].survival <= w[0].survival);
        }
    }

    #[test]
    fn histogram_counts_every_value(values in prop::collection::vec(0f64..110.0, 1..300), width in 0.5f64..20.0) {
        let bins = histogram(&values, width);
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), values.len());
    }

    #[test]
    fn cohort_frequencies_are_distributions(index in 0u64..10_000, size in 1usize..=50) {
        let spec = fixtures::random_spec(index, size);
        let cases: Vec<CohortCase> = fixtures::timelines(&spec).iter().filter_map(CohortCase::from_timeline).collect();
        let s = evaluate_cohort(&cases, &EvalOptions::default()).unwrap();
        prop_assert!((s.tumor_frequencies.values().sum::<f64>() - 1.0).abs() <= 1e-9);
        for p in s.pathways.values() {
            prop_assert!((p.values().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for (loc, sv) in &s.survival {
            prop_assert_eq!(sv.deceased + sv.censored, s.age[loc].box_stats.n);
        }
        let r = compare(&s, &s, None);
        prop_assert_eq!(r.max_frequency_deviation_pp, 0.0);
        prop_assert!(r.flagged.is_empty());
    }
}

#[test]
fn per_gender_selection() {
    let spec = fixtures::random_spec(17, 50);
    let cases: Vec<CohortCase> = fixtures::timelines(&spec).iter().filter_map(CohortCase::from_timeline).collect();
    let men = cases.iter().filter(|c| c.gender == Gender::Male).count();
    if men > 0 {
        let s = evaluate_cohort(&cases, &EvalOptions { gender: Some(Gender::Male), ..Default::default() }).unwrap();
        assert_eq!(s.cases, men);
    }
}
