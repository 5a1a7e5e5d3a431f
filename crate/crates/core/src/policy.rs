//! The imperfect driving policy under repair.
//!
//! Lateral control is pure pursuit inside the simulator; this module only
//! decides the longitudinal command. Its flaw is a narrow perception arc:
//! anything approaching from outside `±blind_arc` of the ego heading is
//! ignored until it is directly ahead.

use serde::{Deserialize, Serialize};

use crate::action::snap;
use crate::sim::{SceneObservation, SimConfig, COMMAND_MAX, COMMAND_MIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrivingPolicy {
    /// m/s
    pub cruise_speed: f64,
    /// Meters within which a leading obstacle triggers a reaction.
    pub reaction_range: f64,
    /// Command per m/s of speed error.
    pub gain_p: f64,
    /// Half-angle of the reaction arc, radians.
    pub blind_arc: f64,
}

impl Default for DrivingPolicy {
    fn default() -> Self {
        Self {
            cruise_speed: 10.0,
            reaction_range: 15.0,
            gain_p: 0.3,
            blind_arc: 40f64.to_radians(),
        }
    }
}

impl DrivingPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.reaction_range > 0.0) {
            return Err(format!("reaction_range must be > 0, got {}", self.reaction_range));
        }
        if !(self.blind_arc > 0.0 && self.blind_arc <= std::f64::consts::PI) {
            return Err(format!("blind_arc must be in (0, pi], got {}", self.blind_arc));
        }
        if !(self.cruise_speed >= 0.0 && self.gain_p > 0.0) {
            return Err("cruise_speed must be >= 0 and gain_p > 0".into());
        }
        Ok(())
    }

    /// Longitudinal command snapped onto the action space.
    pub fn decide(&self, obs: &SceneObservation, _cfg: &SimConfig) -> f64 {
        let ego = &obs.ego;
        let (sin_h, cos_h) = ego.heading.sin_cos();
        let mut command = self.gain_p * (self.cruise_speed - ego.speed);

        let leading = obs
            .participants
            .iter()
            .filter_map(|p| {
                let (dx, dy) = (p.x - ego.x, p.y - ego.y);
                let ahead = dx * cos_h + dy * sin_h;
                let lateral = -dx * sin_h + dy * cos_h;
                let dist = dx.hypot(dy);
                let bearing = lateral.atan2(ahead);
                (ahead > 0.0 && dist <= self.reaction_range && bearing.abs() <= self.blind_arc)
                    .then_some((dist, p))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));

        if let Some((_, p)) = leading {
            let (vx, vy) = p.velocity();
            let along = (vx * cos_h + vy * sin_h).max(0.0);
            command = command.min(self.gain_p * (along - ego.speed));
        }
        snap(command.clamp(COMMAND_MIN, COMMAND_MAX))
    }
}
