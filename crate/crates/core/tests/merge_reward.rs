mod common;

use proptest::prelude::*;
use repairlab::action::{action_value, ACTION_COUNT, ACTION_VALUES};
use repairlab::repair::merge;
use repairlab::train::step_reward;

#[test]
fn invariants_hold_on_random_inputs() {
    common::merge_reward_suite(100_000, 11).unwrap();
}

proptest! {
    #[test]
    fn final_command_never_exceeds_ads(
        a in 0..ACTION_COUNT, index in 0..ACTION_COUNT, y in 0.0..=1.0f64, lambda in 0.0..=1.0f64,
    ) {
        let a_ads = ACTION_VALUES[a];
        let d = merge(a_ads, y, index, lambda);
        prop_assert!(d.a_final <= a_ads);
        prop_assert!(d.a_final == a_ads || d.a_final == action_value(index));
    }

    #[test]
    fn reward_falls_as_repair_departs(
        y in 0.0..=1.0f64, a in 0..ACTION_COUNT, i in 0..ACTION_COUNT, j in 0..ACTION_COUNT,
    ) {
        let a_ads = ACTION_VALUES[a];
        let (near, far) = if (a_ads - action_value(i)).abs() <= (a_ads - action_value(j)).abs() { (i, j) } else { (j, i) };
        prop_assert!(step_reward(y, a_ads, action_value(near), false) >= step_reward(y, a_ads, action_value(far), false));
    }

    #[test]
    fn violation_costs_exactly_the_penalty(y in 0.0..=1.0f64, a in 0..ACTION_COUNT, i in 0..ACTION_COUNT) {
        let a_ads = ACTION_VALUES[a];
        let clean = step_reward(y, a_ads, action_value(i), false);
        let hit = step_reward(y, a_ads, action_value(i), true);
        prop_assert!((clean - hit - 10.0).abs() < 1e-12);
    }
}
