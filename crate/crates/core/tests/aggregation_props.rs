use fedpeft::aggregation::{
    clip_to, geomed_objective, optimality_residual, smoothed_gradient, AggOutput, AggReport, AggregationError,
    Aggregator, AggregatorName, AggregatorSpec, UpdateEntry, UpdateSet,
};
use fedpeft::peft::FlatUpdate;
use proptest::prelude::*;

fn set_strategy() -> impl Strategy<Value = Vec<(u64, Vec<f64>)>> {
    (3usize..9, 1usize..7).prop_flat_map(|(n, dim)| {
        proptest::collection::vec((1u64..50, proptest::collection::vec(-5.0f64..5.0, dim)), n)
    })
}

fn build(items: &[(u64, Vec<f64>)]) -> UpdateSet {
    UpdateSet::from_weighted(items.iter().map(|(w, v)| (*w, FlatUpdate(v.clone()))).collect()).unwrap()
}

fn try_run(name: AggregatorName, set: &UpdateSet) -> Result<FlatUpdate, AggregationError> {
    Aggregator::new(AggregatorSpec::named(name))?.aggregate(set, 0).map(|o| o.update)
}

fn run(name: AggregatorName, set: &UpdateSet) -> AggOutput {
    Aggregator::new(AggregatorSpec::named(name)).unwrap().aggregate(set, 0).unwrap()
}

fn sort_median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn mean_matches_weighted_sum(items in set_strategy()) {
        let set = build(&items);
        let out = run(AggregatorName::Mean, &set).update;
        let total: u64 = items.iter().map(|(w, _)| w).sum();
        for (j, got) in out.0.iter().enumerate() {
            let want: f64 = items.iter().map(|(w, v)| *w as f64 * v[j]).sum::<f64>() / total as f64;
            prop_assert!((got - want).abs() <= 1e-12, "coordinate {j}: {got} vs {want}");
        }
    }

    #[test]
    fn median_is_sort_median_and_bounded(items in set_strategy()) {
        let set = build(&items);
        let out = run(AggregatorName::Median, &set).update;
        for (j, got) in out.0.iter().enumerate() {
            let column: Vec<f64> = items.iter().map(|(_, v)| v[j]).collect();
            let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= *got && *got <= hi);
            prop_assert_eq!(*got, sort_median(column));
        }
    }

    #[test]
    fn geomed_dominates_inputs(items in set_strategy()) {
        let set = build(&items);
        let out = run(AggregatorName::Geomed, &set);
        let points: Vec<&[f64]> = items.iter().map(|(_, v)| v.as_slice()).collect();
        let g = geomed_objective(&out.update.0, &points);
        for p in &points {
            prop_assert!(g <= geomed_objective(p, &points) + 1e-10);
        }
        if let AggReport::Geomed { converged: true, .. } = out.report {
            prop_assert!(optimality_residual(&out.update.0, &points) <= 1e-6);
        }
    }

    #[test]
    fn geomed_gradient_vanishes_off_the_inputs(
        pts in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 5),
    ) {
        let set = UpdateSet::from_weighted(pts.iter().map(|p| (1, FlatUpdate(p.clone()))).collect()).unwrap();
        let y = run(AggregatorName::Geomed, &set).update;
        let points: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let nearest = points
            .iter()
            .map(|p| p.iter().zip(&y.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        prop_assume!(nearest > 1e-6);
        let g = smoothed_gradient(&y.0, &points);
        prop_assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-6);
    }

    #[test]
    fn every_rule_ignores_input_order(items in set_strategy(), rotate in 0usize..8) {
        let set = build(&items);
        let n = items.len();
        let mut entries: Vec<UpdateEntry> = set.entries().to_vec();
        entries.rotate_left(rotate % n);
        entries.reverse();
        let shuffled = UpdateSet::new(entries).unwrap();
        for name in AggregatorName::ALL {
            // DnC may flag every client of a small set; the error must agree too.
            let (a, b) = (try_run(name, &set), try_run(name, &shuffled));
            prop_assert_eq!(format!("{a:?}"), format!("{b:?}"), "{}", name.as_str());
        }
    }

    #[test]
    fn unanimous_input_is_a_fixed_point(v in proptest::collection::vec(-5.0f64..5.0, 1..6), weights in proptest::collection::vec(1u64..20, 3..7)) {
        let set = UpdateSet::from_weighted(weights.iter().map(|&w| (w, FlatUpdate(v.clone()))).collect()).unwrap();
        for name in AggregatorName::ALL {
            prop_assert_eq!(&run(name, &set).update.0, &v, "{}", name.as_str());
        }
    }

    #[test]
    fn clipping_contract(x in proptest::collection::vec(-5.0f64..5.0, 1..8), tau in 0.01f64..10.0) {
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let c = clip_to(&x, tau);
        let n = norm(&x);
        if n <= tau {
            prop_assert_eq!(&c, &x);
        } else {
            prop_assert!((norm(&c) - tau).abs() <= 1e-12 * tau.max(1.0));
            let s = tau / n;
            for (a, b) in c.iter().zip(&x) {
                prop_assert!((a - s * b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn clipped_clustering_output_is_within_tau(items in set_strategy()) {
        let set = build(&items);
        let out = run(AggregatorName::Clippedclustering, &set);
        let AggReport::Clipped { tau, .. } = out.report else { panic!("report kind") };
        prop_assert!(out.update.norm() <= tau * (1.0 + 1e-12));
    }
}
