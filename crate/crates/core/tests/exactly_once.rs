//! Duplicate and reordered delivery leaves order-independent statistics
//! unchanged and counts exact.

mod support;

use proptest::prelude::*;

use ensemble_core::field_stats::Statistic;
use ensemble_core::server::{ApplyOutcome, RankState};

use support::{deliver_noisy, max_rel_diff, messages};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn duplicates_and_reordering_are_invisible(data_seed in any::<u64>(), order_seed in any::<u64>()) {
        // 20 simulations x 50 timesteps = 1000 messages
        let layout = support::toy_layout(20, 50, 6, 1);
        let msgs = messages(&layout, data_seed);
        let mut reference = RankState::new(&layout, 0).unwrap();
        for (sim, chunk) in &msgs {
            reference.apply(*sim, chunk).unwrap();
        }
        let (noisy, extra) = deliver_noisy(&layout, &msgs, order_seed);
        prop_assert!(noisy.is_complete());
        prop_assert_eq!(noisy.duplicates_discarded(), extra);
        let counts = noisy.field("dye").unwrap().snapshot_statistic(Statistic::Count, 0).unwrap();
        prop_assert!(counts.iter().all(|&c| c == 20.0));
        let worst = max_rel_diff(&reference, &noisy, layout.n_timesteps);
        prop_assert!(worst <= 1e-9, "relative difference {worst}");
    }
}

#[test]
fn quantiles_see_each_value_once() {
    // same arrival order with and without duplicates gives identical
    // quantile trajectories
    let layout = support::toy_layout(10, 4, 3, 1);
    let msgs = messages(&layout, 3);
    let mut once = RankState::new(&layout, 0).unwrap();
    let mut twice = RankState::new(&layout, 0).unwrap();
    for (sim, chunk) in &msgs {
        once.apply(*sim, chunk).unwrap();
        twice.apply(*sim, chunk).unwrap();
        assert_eq!(twice.apply(*sim, chunk).unwrap(), ApplyOutcome::Duplicate);
    }
    let q = Statistic::Quantile(0.5);
    for t in 0..4 {
        assert_eq!(
            once.field("dye").unwrap().snapshot_statistic(q, t).unwrap(),
            twice.field("dye").unwrap().snapshot_statistic(q, t).unwrap()
        );
    }
}
