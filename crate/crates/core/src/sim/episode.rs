use serde::{Deserialize, Serialize};

use super::geometry::{Polyline, Pose};
use super::scenario::Scenario;
use super::vehicle::{detect_collision, step_vehicle, SimConfig, VehicleState};
use crate::action::RepairDecision;
use crate::error::{Error, Result};
use crate::policy::DrivingPolicy;
use crate::train::step_reward;

/// What the ego vehicle perceives at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObservation {
    pub t: usize,
    pub ego: VehicleState,
    /// Spawned NPCs within the perception radius, in spawn order.
    pub participants: Vec<VehicleState>,
    /// The next route points ahead of the ego, padded with the route end.
    pub route_lookahead: Vec<Pose>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeResult {
    Success,
    Collision,
    Timeout,
}

impl EpisodeResult {
    pub fn name(self) -> &'static str {
        match self {
            EpisodeResult::Success => "success",
            EpisodeResult::Collision => "collision",
            EpisodeResult::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub result: EpisodeResult,
    /// Final step index: the trace holds steps `0..final_step`.
    pub final_step: usize,
}

impl EpisodeOutcome {
    /// `Y_S`: 1 iff the episode ended in a collision.
    pub fn y_s(&self) -> u8 {
        u8::from(self.result == EpisodeResult::Collision)
    }
}

/// Runtime repair plug-in consulted once per step.
pub trait RepairPlugin {
    fn repair(&mut self, obs: &SceneObservation, a_ads: f64) -> Result<RepairDecision>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub obs: SceneObservation,
    /// Every spawned NPC, including those outside the perception radius.
    pub npcs: Vec<VehicleState>,
    pub a_ads: f64,
    pub decision: Option<RepairDecision>,
    pub a_final: f64,
    /// The applied command fell outside the actuator range and was clamped.
    pub clamped: bool,
    /// Step reward, present when the plug-in reports a monitor score.
    pub reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<TraceStep>,
    pub outcome: EpisodeOutcome,
    /// Observation after the last step.
    pub final_observation: SceneObservation,
}

impl EpisodeTrace {
    pub fn intervened_steps(&self) -> impl Iterator<Item = &TraceStep> {
        self.steps
            .iter()
            .filter(|s| s.decision.is_some_and(|d| d.intervened))
    }
}

struct Npc<'s> {
    route: Polyline,
    script: &'s super::scenario::NpcScript,
    s: f64,
    state: Option<VehicleState>,
    done: bool,
}

impl Npc<'_> {
    fn place(&mut self, speed: f64) {
        let p = self.route.pose_at(self.s);
        let (l, w) = self.script.dimensions;
        self.state = Some(VehicleState {
            x: p.x,
            y: p.y,
            heading: p.heading,
            speed,
            length: l,
            width: w,
        });
    }
}

/// Deterministic single-episode simulation.
pub struct World<'s> {
    cfg: &'s SimConfig,
    scenario: &'s Scenario,
    route: Polyline,
    ego: VehicleState,
    progress: f64,
    npcs: Vec<Npc<'s>>,
    t: usize,
}

impl<'s> World<'s> {
    pub fn new(scenario: &'s Scenario, cfg: &'s SimConfig) -> Result<Self> {
        scenario.validate()?;
        cfg.validate().map_err(Error::Config)?;
        let route = Polyline::new(scenario.ego_route.clone())
            .ok_or_else(|| Error::InvalidScenario("ego_route".into()))?;
        let start = route.pose_at(0.0);
        let ego = VehicleState {
            x: start.x,
            y: start.y,
            heading: start.heading,
            speed: scenario.ego_start_speed.min(cfg.v_max),
            length: cfg.ego_length,
            width: cfg.ego_width,
        };
        let npcs = scenario
            .npcs
            .iter()
            .map(|script| Npc {
                route: Polyline::new(script.route.clone()).expect("validated"),
                script,
                s: 0.0,
                state: None,
                done: false,
            })
            .collect();
        let mut world = Self {
            cfg,
            scenario,
            route,
            ego,
            progress: 0.0,
            npcs,
            t: 0,
        };
        world.spawn_due();
        Ok(world)
    }

    fn time(&self) -> f64 {
        self.t as f64 * self.cfg.dt
    }

    fn spawn_due(&mut self) {
        let now = self.time();
        for npc in &mut self.npcs {
            if npc.state.is_none() && !npc.done && npc.script.spawn_time <= now + 1e-9 {
                let v = npc.script.speed_at(now);
                npc.place(v);
            }
        }
    }

    fn alive(&self) -> impl Iterator<Item = &VehicleState> {
        self.npcs.iter().filter_map(|n| n.state.as_ref())
    }

    pub fn observe(&self) -> SceneObservation {
        let r = self.cfg.perception_radius;
        let participants = self
            .alive()
            .filter(|n| (n.x - self.ego.x).hypot(n.y - self.ego.y) <= r)
            .copied()
            .collect();
        let route_lookahead = (1..=self.cfg.route_points)
            .map(|k| self.route.pose_at(self.progress + k as f64 * self.cfg.route_spacing))
            .collect();
        SceneObservation {
            t: self.t,
            ego: self.ego,
            participants,
            route_lookahead,
        }
    }

    /// Applies `command` to the ego, advances all NPCs, and reports the
    /// termination status and whether the command was clamped.
    pub fn step(&mut self, command: f64) -> (Option<EpisodeResult>, bool) {
        let target = self
            .route
            .pose_at(self.progress + self.cfg.pursuit_lookahead);
        let (ego, clamped) = step_vehicle(&self.ego, command, (target.x, target.y), self.cfg.dt, self.cfg);
        self.ego = ego;
        self.progress = self.route.project(
            (ego.x, ego.y),
            self.progress - 2.0,
            self.progress + 10.0,
        );

        let now = self.time();
        let dt = self.cfg.dt;
        for npc in &mut self.npcs {
            if let Some(state) = npc.state {
                npc.s += state.speed * dt;
                if npc.s >= npc.route.length() {
                    npc.state = None;
                    npc.done = true;
                } else {
                    let v = npc.script.speed_at(now + dt);
                    npc.place(v);
                }
            }
        }
        self.t += 1;
        self.spawn_due();

        let result = if self.alive().any(|n| detect_collision(&self.ego, n)) {
            Some(EpisodeResult::Collision)
        } else if {
            let (ex, ey) = self.route.end();
            (self.ego.x - ex).hypot(self.ego.y - ey) <= self.scenario.destination_radius
        } {
            Some(EpisodeResult::Success)
        } else if self.time() >= self.scenario.time_budget - 1e-9 {
            Some(EpisodeResult::Timeout)
        } else {
            None
        };
        (result, clamped)
    }

    pub fn npc_states(&self) -> Vec<VehicleState> {
        self.alive().copied().collect()
    }

    pub fn step_index(&self) -> usize {
        self.t
    }
}

/// Runs a scenario to termination. When a plug-in is supplied, its merged
/// command replaces the policy output.
pub fn run_episode(
    scenario: &Scenario,
    policy: &DrivingPolicy,
    mut repair: Option<&mut dyn RepairPlugin>,
    cfg: &SimConfig,
) -> Result<EpisodeTrace> {
    let mut world = World::new(scenario, cfg)?;
    let mut steps: Vec<TraceStep> = Vec::new();
    loop {
        let obs = world.observe();
        let npcs = world.npc_states();
        let a_ads = policy.decide(&obs, cfg);
        let decision = match repair.as_deref_mut() {
            Some(p) => Some(p.repair(&obs, a_ads)?),
            None => None,
        };
        let a_final = decision.map_or(a_ads, |d| d.a_final);
        let (result, clamped) = world.step(a_final);
        let violated = result == Some(EpisodeResult::Collision);
        let reward = decision
            .and_then(|d| d.y_safe_hat.map(|y| step_reward(y, a_ads, d.a_hat, violated)));
        steps.push(TraceStep {
            obs,
            npcs,
            a_ads,
            decision,
            a_final,
            clamped,
            reward,
        });
        if let Some(result) = result {
            return Ok(EpisodeTrace {
                steps,
                outcome: EpisodeOutcome {
                    result,
                    final_step: world.step_index(),
                },
                final_observation: world.observe(),
            });
        }
    }
}
