/// Fixed penalty added on the step where a collision occurs.
pub const VIOLATION_PENALTY: f64 = 10.0;

/// Safe-explore reward: high when the monitor deems the state safe and the
/// repair stays close to the ADS command.
pub fn step_reward(y_safe_hat: f64, a_ads: f64, a_hat: f64, violated: bool) -> f64 {
    let explore = (1.0 - y_safe_hat) * (1.0 - 0.5 * (a_ads - a_hat).abs());
    if violated {
        explore - VIOLATION_PENALTY
    } else {
        explore
    }
}
