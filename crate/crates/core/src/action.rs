//! The discrete throttle/brake action space shared by the driving policy,
//! the repair heads and the baselines.

use serde::{Deserialize, Serialize};

/// Ordered from mildest (index 0, `0.8` throttle) to strongest (index 9, `-1.0` full brake).
pub const ACTION_VALUES: [f64; 10] = [0.8, 0.6, 0.4, 0.2, 0.0, -0.2, -0.4, -0.6, -0.8, -1.0];

pub const ACTION_COUNT: usize = ACTION_VALUES.len();

/// Index of the strongest repair action.
pub const STRONGEST: usize = ACTION_COUNT - 1;

/// Index of the mildest repair action.
pub const MILDEST: usize = 0;

pub fn action_value(index: usize) -> f64 {
    ACTION_VALUES[index]
}

/// Nearest action index to a command; equidistant commands snap to the
/// more conservative (larger) index.
pub fn nearest_index(command: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &v) in ACTION_VALUES.iter().enumerate() {
        let d = (v - command).abs();
        if d <= best_d + 1e-12 {
            best = i;
            best_d = best_d.min(d);
        }
    }
    best
}

pub fn snap(command: f64) -> f64 {
    ACTION_VALUES[nearest_index(command)]
}

pub fn is_action(command: f64) -> bool {
    ACTION_VALUES.contains(&command)
}

/// Output of a repair plug-in for one simulator step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairDecision {
    /// Safety-critical score when the plug-in has a learned monitor.
    pub y_safe_hat: Option<f64>,
    pub repair_index: usize,
    /// `ACTION_VALUES[repair_index]`.
    pub a_hat: f64,
    pub a_final: f64,
    pub intervened: bool,
    /// Whether the plug-in's safety trigger fired (before the conservativeness check).
    pub flagged: bool,
}

impl RepairDecision {
    /// A decision that leaves the ADS command untouched.
    pub fn pass_through(a_ads: f64) -> Self {
        Self {
            y_safe_hat: None,
            repair_index: MILDEST,
            a_hat: ACTION_VALUES[MILDEST],
            a_final: a_ads,
            intervened: false,
            flagged: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_shape() {
        assert_eq!(ACTION_COUNT, 10);
        for w in ACTION_VALUES.windows(2) {
            assert!(w[0] > w[1]);
            assert!((w[0] - w[1] - 0.2).abs() < 1e-12);
        }
        assert_eq!(action_value(STRONGEST), -1.0);
        assert_eq!(action_value(MILDEST), 0.8);
    }

    #[test]
    fn snapping() {
        assert_eq!(snap(0.05), 0.0);
        assert_eq!(snap(3.0), 0.8);
        assert_eq!(snap(-7.0), -1.0);
        // tie between 0.2 and 0.0 goes to the brake side
        assert_eq!(nearest_index(0.1), 4);
        for &v in &ACTION_VALUES {
            assert_eq!(snap(v), v);
        }
    }
}
