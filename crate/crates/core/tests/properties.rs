mod common;

use proptest::prelude::*;

use symdyn::envs::wrap_angle;
use symdyn::sr::Standardizer;
use symdyn::{Dataset, EnvKind};

use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn printed_trees_parse_back(seed in any::<u64>(), d in 1usize..5) {
        generated_tree_parses_back(seed, d)?;
    }

    #[test]
    fn smooth_trees_parse_back(tree in smooth_tree()) {
        smooth_tree_parses_back(&tree)?;
    }

    #[test]
    fn constant_gradients_match_central_differences(tree in smooth_tree(), x0 in -1.0f64..1.0, x1 in -1.0f64..1.0) {
        constant_gradients_match(&tree, [x0, x1])?;
    }

    #[test]
    fn network_gradients_match_central_differences(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..6, 1..3),
        rows in 1usize..4,
    ) {
        network_gradients_match(seed, &widths, rows)?;
    }

    #[test]
    fn replay_buffer_keeps_newest_in_order(cap in 1usize..20, n in 0usize..60) {
        replay_buffer_is_fifo(cap, n)?;
    }

    #[test]
    fn observers_round_trip_on_reachable_states(seed in any::<u64>(), steps in 0usize..30) {
        observers_round_trip(seed, steps)?;
    }

    #[test]
    fn pendulum_state_stays_in_range(theta in -10.0f64..10.0, omega in -20.0f64..20.0, u in -5.0f64..5.0) {
        let next = EnvKind::Pendulum.step_state(&[wrap_angle(theta), omega], &[u]);
        prop_assert!(next[1].abs() <= 8.0);
        prop_assert!(next[0] > -std::f64::consts::PI && next[0] <= std::f64::consts::PI);
    }

    #[test]
    fn car_speed_never_negative_for_any_inputs(
        v in 0.0f64..2.0,
        actions in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..100),
    ) {
        car_speed_stays_valid(v, &actions)?;
    }

    #[test]
    fn standardizer_round_trips(lo in -100.0f64..100.0, span in 1e-3f64..100.0, t in 0.0f64..1.0) {
        let hi = lo + span;
        let data = Dataset::from_columns(vec![vec![lo, hi]], vec![hi, lo]).unwrap();
        let s = Standardizer::fit(&data);
        let x = lo + t * span;
        let z = s.standardize_input(0, x);
        prop_assert!((-1.0..=1.0).contains(&z));
        prop_assert!((s.destandardize_input(0, z) - x).abs() <= 1e-9 * x.abs().max(1.0));
        prop_assert!((s.standardize_input(0, lo) + 1.0).abs() < 1e-12);
        prop_assert!((s.standardize_input(0, hi) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn car_speed_never_negative_over_many_sequences() {
    car_speed_over_sequences(100_000, 0).unwrap();
}

#[test]
fn full_runs_repeat_byte_for_byte() {
    full_runs_are_deterministic().unwrap();
}
