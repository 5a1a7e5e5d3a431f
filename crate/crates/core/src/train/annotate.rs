use serde::{Deserialize, Serialize};

use crate::action::{MILDEST, STRONGEST};
use crate::sim::geometry::box_distance;
use crate::sim::{EpisodeResult, EpisodeTrace, SceneObservation};

/// Per-step weak supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeakLabel {
    pub y_safe: u8,
    pub y_repair: usize,
}

impl WeakLabel {
    pub fn from_safety(critical: bool) -> Self {
        if critical {
            Self { y_safe: 1, y_repair: STRONGEST }
        } else {
            Self { y_safe: 0, y_repair: MILDEST }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationConfig {
    /// Clearance below which a state is critical, meters.
    pub delta_d: f64,
    /// Window before a collision whose states are critical, seconds.
    pub delta_t: f64,
    /// When false, only the pre-collision window marks states critical.
    pub use_clearance: bool,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            delta_d: 1.0,
            delta_t: 3.0,
            use_clearance: true,
        }
    }
}

impl AnnotationConfig {
    pub fn window_steps(&self, dt: f64) -> usize {
        (self.delta_t / dt).round() as usize
    }
}

/// Smallest boundary-to-boundary distance from the ego to any visible
/// participant; infinite when nobody is visible.
pub fn clearance(obs: &SceneObservation) -> f64 {
    let ego = obs.ego.bounding_box();
    obs.participants
        .iter()
        .map(|p| box_distance(&ego, &p.bounding_box()))
        .fold(f64::INFINITY, f64::min)
}

pub fn annotate(trace: &EpisodeTrace, cfg: &AnnotationConfig, dt: f64) -> Vec<WeakLabel> {
    let collided = trace.outcome.result == EpisodeResult::Collision;
    let last = trace.outcome.final_step;
    let window = cfg.window_steps(dt);
    trace
        .steps
        .iter()
        .enumerate()
        .map(|(t, step)| {
            let near = cfg.use_clearance && clearance(&step.obs) < cfg.delta_d;
            let pre_crash = collided && t + window > last;
            WeakLabel::from_safety(near || pre_crash)
        })
        .collect()
}
