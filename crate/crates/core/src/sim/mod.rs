//! Fixed-timestep 2D kinematic simulator.

mod episode;
pub mod geometry;
mod scenario;
pub mod trace;
mod vehicle;

pub use episode::{
    run_episode, EpisodeOutcome, EpisodeResult, EpisodeTrace, RepairPlugin, SceneObservation,
    TraceStep, World,
};
pub use geometry::{OrientedBox, Polyline, Pose};
pub use scenario::{NpcScript, Scenario, TemplateId};
pub use vehicle::{detect_collision, step_vehicle, SimConfig, VehicleState, COMMAND_MAX, COMMAND_MIN};
