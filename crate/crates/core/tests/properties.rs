//! Property tests over the public API.

use std::collections::BTreeSet;

use proptest::prelude::*;
use trace_core::backbone::Site;
use trace_core::data::{NormStats, SeriesDataset};
use trace_core::metrics::{mcnemar, ContingencyTable};
use trace_core::optim::{one_cycle_lr, FINAL_DIV, INITIAL_DIV};
use trace_core::pruner::toy::{site, LinearGates};
use trace_core::pruner::{dsic_importance, prune_round, sample_mask, GatedObjective, PruneSchedule};
use trace_core::rng::seeded;
use trace_core::shapley::shapley_from_values;

proptest! {
    #[test]
    fn schedule_masks_down_to_keep_count(n in 1usize..200, p in 0.01f64..0.9, budget in 0.0f64..0.99) {
        let s = PruneSchedule { p, budget, max_rounds: 10_000, ..PruneSchedule::default() };
        let plan = s.plan(n);
        let keep = s.keep_count(n);
        prop_assert_eq!(plan.iter().sum::<usize>(), n - keep);
        let mut u = n;
        for &c in &plan {
            prop_assert!(c >= 1);
            prop_assert!(c <= (p * u as f64).ceil() as usize);
            u -= c;
        }
        prop_assert!(s.budget_met(u, n));
    }

    #[test]
    fn one_cycle_stays_in_range(total in 1usize..5000, frac in 0.0f64..=1.0, lr in 1e-6f64..1.0) {
        let step = (frac * total as f64) as usize;
        let v = one_cycle_lr(step, total, lr).unwrap();
        prop_assert!(v <= lr * (1.0 + 1e-12));
        prop_assert!(v >= lr / FINAL_DIV.max(INITIAL_DIV) * (1.0 - 1e-12));
    }

    #[test]
    fn mcnemar_is_symmetric_and_bounded(b in 0u64..5000, c in 0u64..5000) {
        prop_assume!(b + c > 0);
        let x = mcnemar(&ContingencyTable { a: 3, b, c, d: 9 }).unwrap();
        let y = mcnemar(&ContingencyTable { a: 3, b: c, c: b, d: 9 }).unwrap();
        prop_assert_eq!(x.chi2, y.chi2);
        prop_assert!((0.0..=1.0).contains(&x.p_value));
        if b == c {
            prop_assert_eq!(x.p_value, 1.0);
        }
    }

    #[test]
    fn shapley_efficiency(n in 1usize..=8, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let v: Vec<f64> = (0..1usize << n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let phi = shapley_from_values(n, &v).unwrap();
        prop_assert!((phi.iter().sum::<f64>() - (v[(1 << n) - 1] - v[0])).abs() < 1e-9);
    }

    #[test]
    fn trials_leave_toy_model_untouched(u in prop::collection::vec(-2.0f64..2.0, 2..20), p in 0.05f64..0.95, m in 1usize..40, seed in any::<u64>()) {
        let mut model = LinearGates::new(0.1, u.clone());
        model.mask_sites(&BTreeSet::from([site(0)])).unwrap();
        let before = model.clone();
        let batch = vec![(1.0, 0.5), (-0.5, 0.2)];
        let t = dsic_importance(&mut model, &[&batch], p, m, &mut seeded(seed)).unwrap();
        prop_assert_eq!(&model, &before);
        prop_assert_eq!(t.trials.len(), m);
        prop_assert_eq!(t.mean[&site(0)], 0.0);
    }

    #[test]
    fn sampled_masks_have_fixed_size(n in 1usize..50, p in 0.0f64..1.0, seed in any::<u64>()) {
        let sites: Vec<Site> = (0..n).map(site).collect();
        let m = sample_mask(&mut seeded(seed), p, &sites).unwrap();
        prop_assert!(m.iter().all(|s| sites.contains(s)));
        prop_assert_eq!(m.len(), (p * n as f64).round() as usize);
    }

    #[test]
    fn prune_round_takes_the_lowest(scores in prop::collection::vec(0.0f64..1.0, 1..30), k in 0usize..30) {
        let sites: Vec<Site> = (0..scores.len()).map(site).collect();
        let k = k.min(sites.len());
        let table = sites.iter().copied().zip(scores.iter().copied()).collect();
        let pruned = prune_round(&table, &sites, k).unwrap();
        prop_assert_eq!(pruned.len(), k);
        let worst_kept = sites.iter().filter(|s| !pruned.contains(s)).map(|s| table[s]).fold(f64::INFINITY, f64::min);
        for s in &pruned {
            prop_assert!(table[s] <= worst_kept);
        }
    }

    #[test]
    fn normalization_round_trips(values in prop::collection::vec(-1e3f64..1e3, 6..60)) {
        let n = values.len() / 3 * 3;
        let ds = SeriesDataset::new("p", "h", 3, values[..n].to_vec()).unwrap();
        let stats = NormStats::fit(&ds).unwrap();
        let back = stats.inverse(&stats.normalize(&ds).unwrap()).unwrap();
        for (a, b) in back.values().iter().zip(ds.values()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
