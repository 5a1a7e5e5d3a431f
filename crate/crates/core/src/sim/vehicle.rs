use serde::{Deserialize, Serialize};

use super::geometry::{boxes_overlap, wrap_angle, OrientedBox};

/// Simulator constants. Overridable through the `[sim]` table of a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Fixed timestep, seconds.
    pub dt: f64,
    /// Acceleration at full throttle, m/s^2.
    pub a_thr: f64,
    /// Deceleration at full brake, m/s^2.
    pub a_brk: f64,
    pub v_max: f64,
    /// Turn-rate limit, rad/s.
    pub omega_max: f64,
    /// Pure-pursuit lookahead distance, meters.
    pub pursuit_lookahead: f64,
    pub perception_radius: f64,
    /// Number of route points in an observation.
    pub route_points: usize,
    pub route_spacing: f64,
    pub ego_length: f64,
    pub ego_width: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            a_thr: 3.0,
            a_brk: 8.0,
            v_max: 20.0,
            omega_max: 0.6,
            pursuit_lookahead: 5.0,
            perception_radius: 50.0,
            route_points: 10,
            route_spacing: 2.0,
            ego_length: 4.5,
            ego_width: 1.8,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("dt", self.dt),
            ("a_thr", self.a_thr),
            ("a_brk", self.a_brk),
            ("v_max", self.v_max),
            ("omega_max", self.omega_max),
            ("pursuit_lookahead", self.pursuit_lookahead),
            ("perception_radius", self.perception_radius),
            ("route_spacing", self.route_spacing),
            ("ego_length", self.ego_length),
            ("ego_width", self.ego_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("sim.{name} must be positive, got {v}"));
            }
        }
        if self.route_points == 0 {
            return Err("sim.route_points must be at least 1".into());
        }
        Ok(())
    }
}

/// Lower and upper ends of the throttle/brake command.
pub const COMMAND_MIN: f64 = -1.0;
pub const COMMAND_MAX: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Radians in `(-pi, pi]`.
    pub heading: f64,
    /// Meters per second, never negative.
    pub speed: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    pub fn bounding_box(&self) -> OrientedBox {
        OrientedBox {
            cx: self.x,
            cy: self.y,
            heading: self.heading,
            length: self.length,
            width: self.width,
        }
    }

    pub fn velocity(&self) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.speed * c, self.speed * s)
    }
}

/// Advances one vehicle by `dt` with a throttle/brake `command` and a
/// pure-pursuit steer toward `steer_target`. Returns the new state and whether
/// the command had to be clamped into `[COMMAND_MIN, COMMAND_MAX]`.
pub fn step_vehicle(
    state: &VehicleState,
    command: f64,
    steer_target: (f64, f64),
    dt: f64,
    cfg: &SimConfig,
) -> (VehicleState, bool) {
    let clamped_cmd = if command.is_nan() {
        0.0
    } else {
        command.clamp(COMMAND_MIN, COMMAND_MAX)
    };
    let clamped = clamped_cmd != command;
    let accel = if clamped_cmd >= 0.0 {
        clamped_cmd * cfg.a_thr
    } else {
        clamped_cmd * cfg.a_brk
    };

    let (dx, dy) = (steer_target.0 - state.x, steer_target.1 - state.y);
    let dist = dx.hypot(dy);
    let omega = if dist > 1e-9 {
        let alpha = wrap_angle(dy.atan2(dx) - state.heading);
        let curvature = 2.0 * alpha.sin() / dist;
        (state.speed * curvature).clamp(-cfg.omega_max, cfg.omega_max)
    } else {
        0.0
    };

    let (s, c) = state.heading.sin_cos();
    let next = VehicleState {
        x: state.x + state.speed * c * dt,
        y: state.y + state.speed * s * dt,
        heading: wrap_angle(state.heading + omega * dt),
        speed: (state.speed + accel * dt).clamp(0.0, cfg.v_max),
        length: state.length,
        width: state.width,
    };
    (next, clamped)
}

pub fn detect_collision(a: &VehicleState, b: &VehicleState) -> bool {
    boxes_overlap(&a.bounding_box(), &b.bounding_box())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn car(speed: f64) -> VehicleState {
        VehicleState { x: 0.0, y: 0.0, heading: 0.0, speed, length: 4.5, width: 1.8 }
    }

    #[test]
    fn full_brake_decelerates() {
        let cfg = SimConfig::default();
        let (s, clamped) = step_vehicle(&car(10.0), -1.0, (10.0, 0.0), 0.1, &cfg);
        assert!((s.speed - 9.2).abs() < 1e-12);
        assert!(!clamped);
    }

    #[test]
    fn speed_clamps_at_zero() {
        let cfg = SimConfig::default();
        let (s, _) = step_vehicle(&car(0.0), -1.0, (10.0, 0.0), 0.1, &cfg);
        assert_eq!(s.speed, 0.0);
    }

    #[test]
    fn coasting_advances_one_meter() {
        let cfg = SimConfig::default();
        let (s, _) = step_vehicle(&car(10.0), 0.0, (20.0, 0.0), 0.1, &cfg);
        assert_eq!(s.speed, 10.0);
        assert!((s.x - 1.0).abs() < 1e-12 && s.y == 0.0 && s.heading == 0.0);
    }

    #[test]
    fn out_of_hull_command_is_clamped_and_flagged() {
        let cfg = SimConfig::default();
        let (s, clamped) = step_vehicle(&car(10.0), 1.0, (20.0, 0.0), 0.1, &cfg);
        assert!(clamped);
        assert!((s.speed - 10.24).abs() < 1e-12);
    }

    #[test]
    fn turn_rate_is_limited() {
        let cfg = SimConfig::default();
        let (s, _) = step_vehicle(&car(20.0), 0.0, (0.0, 5.0), 0.1, &cfg);
        assert!((s.heading - cfg.omega_max * 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn braking_stops_within_bound(v0 in 0.0..20.0f64) {
            let cfg = SimConfig::default();
            let bound = (v0 / (cfg.a_brk * cfg.dt)).ceil() as usize;
            let mut s = car(v0);
            for _ in 0..bound {
                s = step_vehicle(&s, -1.0, (s.x + 10.0, s.y), cfg.dt, &cfg).0;
            }
            prop_assert!(s.speed <= 1e-9);
        }

        #[test]
        fn speed_and_heading_stay_in_range(
            v in 0.0..20.0f64, cmd in -3.0..3.0f64, h in -3.14..3.14f64, tx in -50.0..50.0f64, ty in -50.0..50.0f64,
        ) {
            let cfg = SimConfig::default();
            let s0 = VehicleState { heading: h, ..car(v) };
            let (s, _) = step_vehicle(&s0, cmd, (tx, ty), cfg.dt, &cfg);
            prop_assert!(s.speed >= 0.0 && s.speed <= cfg.v_max);
            prop_assert!(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI);
        }
    }
}
