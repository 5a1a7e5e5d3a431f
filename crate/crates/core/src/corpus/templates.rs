//! Scenario templates: fixed road geometry per template, with the timing of
//! the conflicting vehicle sampled from checked-in ranges.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{NpcScript, Scenario, TemplateId};

const LANE: f64 = 3.5;
const HALF_LANE: f64 = LANE / 2.0;
const NPC_DIMENSIONS: (f64, f64) = (4.5, 1.8);

/// The ranges shipped with the crate.
pub const DEFAULT_TEMPLATES: &str = include_str!("../../config/templates.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRanges {
    pub ego_start_speed: [f64; 2],
    pub npc_spawn_time: [f64; 2],
    pub npc_speed: [f64; 2],
    pub npc_offset: [f64; 2],
    pub time_budget: f64,
    pub destination_radius: f64,
}

impl TemplateRanges {
    fn validate(&self, template: TemplateId) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{template}: invalid {what}")));
        for (what, [lo, hi]) in [
            ("ego_start_speed", self.ego_start_speed),
            ("npc_spawn_time", self.npc_spawn_time),
            ("npc_speed", self.npc_speed),
            ("npc_offset", self.npc_offset),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(what);
            }
        }
        if self.ego_start_speed[0] < 0.0 || self.npc_speed[0] < 0.0 || self.npc_spawn_time[0] < 0.0 {
            return bad("negative speed or spawn time");
        }
        if !(self.time_budget > 0.0 && self.destination_radius > 0.0) {
            return bad("time_budget or destination_radius");
        }
        Ok(())
    }
}

/// Sampling ranges for every template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateTable(pub BTreeMap<TemplateId, TemplateRanges>);

impl TemplateTable {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: TemplateTable =
            toml::from_str(text).map_err(|e| Error::format("template table", e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for (&id, r) in &self.0 {
            r.validate(id)?;
        }
        Ok(())
    }

    pub fn ranges(&self, template: TemplateId) -> Result<&TemplateRanges> {
        self.0
            .get(&template)
            .ok_or_else(|| Error::UnknownTemplate(template.name().into()))
    }
}

impl Default for TemplateTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TEMPLATES).expect("bundled template table is valid")
    }
}

fn sample(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Quarter-turn polyline from `start` sweeping `sweep` radians around `center`,
/// one point per meter of arc.
fn arc(center: (f64, f64), radius: f64, start_angle: f64, sweep: f64) -> Vec<(f64, f64)> {
    let n = ((radius * sweep.abs()).ceil() as usize).max(2);
    (1..=n)
        .map(|k| {
            let a = start_angle + sweep * k as f64 / n as f64;
            (center.0 + radius * a.cos(), center.1 + radius * a.sin())
        })
        .collect()
}

/// Ego route for a template: approach from the south on the northbound lane
/// for the intersection templates, along the highway otherwise.
pub fn ego_route(template: TemplateId) -> Vec<(f64, f64)> {
    match template {
        TemplateId::S1LeftTurn => {
            let r = 7.0;
            let y0 = HALF_LANE - r;
            let mut route = vec![(HALF_LANE, -50.0), (HALF_LANE, y0)];
            route.extend(arc((HALF_LANE - r, y0), r, 0.0, FRAC_PI_2));
            route.push((-50.0, HALF_LANE));
            route
        }
        TemplateId::S2RightTurn => {
            let r = 5.0;
            let y0 = -HALF_LANE - r;
            let mut route = vec![(HALF_LANE, -50.0), (HALF_LANE, y0)];
            route.extend(arc((HALF_LANE + r, y0), r, std::f64::consts::PI, -FRAC_PI_2));
            route.push((50.0, -HALF_LANE));
            route
        }
        TemplateId::S3Crossing => vec![(HALF_LANE, -50.0), (HALF_LANE, 50.0)],
        TemplateId::S4HighwayExit => vec![
            (-80.0, -HALF_LANE),
            (0.0, -HALF_LANE),
            (10.0, -2.5),
            (20.0, -5.0),
            (30.0, -9.0),
            (40.0, -14.0),
            (55.0, -23.0),
        ],
        TemplateId::S5OnrampMerge => vec![
            (-80.0, -25.0),
            (-40.0, -12.0),
            (-20.0, -4.0),
            (-5.0, -HALF_LANE),
            (60.0, -HALF_LANE),
        ],
    }
}

/// Route of the conflicting vehicle, shifted by `offset` meters along its
/// initial direction of travel.
fn npc_route(template: TemplateId, offset: f64) -> Vec<(f64, f64)> {
    match template {
        // oncoming traffic on the southbound lane
        TemplateId::S1LeftTurn => vec![(-HALF_LANE, 60.0 - offset), (-HALF_LANE, -80.0)],
        // eastbound traffic from the left, into the lane the ego turns into
        TemplateId::S2RightTurn => vec![(-60.0 + offset, -HALF_LANE), (90.0, -HALF_LANE)],
        // eastbound traffic from the left across the ego's path
        TemplateId::S3Crossing => vec![(-60.0 + offset, -HALF_LANE), (80.0, -HALF_LANE)],
        // faster car from the left lane cutting across into the exit
        TemplateId::S4HighwayExit => vec![
            (-100.0 + offset, HALF_LANE),
            (8.0, HALF_LANE),
            (22.0, -5.8),
            (30.0, -9.0),
            (40.0, -14.0),
            (80.0, -40.0),
        ],
        // highway traffic in the lane the ramp merges into
        TemplateId::S5OnrampMerge => vec![(-110.0 + offset, -HALF_LANE), (120.0, -HALF_LANE)],
    }
}

/// Draws one scenario of `template` from `ranges`.
pub fn generate(template: TemplateId, ranges: &TemplateRanges, seed: u64, rng: &mut impl Rng) -> Scenario {
    let ego_start_speed = sample(rng, ranges.ego_start_speed);
    let spawn_time = sample(rng, ranges.npc_spawn_time);
    let target_speed = sample(rng, ranges.npc_speed);
    let offset = sample(rng, ranges.npc_offset);
    Scenario {
        template_id: template,
        ego_route: ego_route(template),
        ego_start_speed,
        destination_radius: ranges.destination_radius,
        time_budget: ranges.time_budget,
        seed,
        npcs: vec![NpcScript {
            route: npc_route(template, offset),
            spawn_time,
            target_speed,
            speed_profile: None,
            dimensions: NPC_DIMENSIONS,
        }],
    }
}
