use rand::Rng;

use repairlab::action::RepairDecision;
use repairlab::corpus::{fuzz_scenarios, TemplateTable};
use repairlab::policy::DrivingPolicy;
use repairlab::rng;
use repairlab::sim::geometry::boxes_overlap;
use repairlab::sim::{
    run_episode, EpisodeResult, NpcScript, OrientedBox, RepairPlugin, Scenario, SceneObservation,
    SimConfig, TemplateId,
};
use repairlab::Result;

const PITCH: f64 = 0.01;

fn contains(b: &OrientedBox, p: (f64, f64)) -> bool {
    let (s, c) = b.heading.sin_cos();
    let (dx, dy) = (p.0 - b.cx, p.1 - b.cy);
    let along = dx * c + dy * s;
    let across = -dx * s + dy * c;
    along.abs() <= b.length / 2.0 && across.abs() <= b.width / 2.0
}

/// Lays a lattice of `PITCH` spacing over `a` and reports whether any
/// lattice point also lies inside `b`.
fn rasterized_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let (s, c) = a.heading.sin_cos();
    let nl = (a.length / PITCH).floor() as i64;
    let nw = (a.width / PITCH).floor() as i64;
    for i in 0..=nl {
        let l = -a.length / 2.0 + i as f64 * PITCH;
        for j in 0..=nw {
            let w = -a.width / 2.0 + j as f64 * PITCH;
            if contains(b, (a.cx + l * c - w * s, a.cy + l * s + w * c)) {
                return true;
            }
        }
    }
    false
}

fn resized(b: &OrientedBox, margin: f64) -> OrientedBox {
    OrientedBox {
        length: b.length + 2.0 * margin,
        width: b.width + 2.0 * margin,
        ..*b
    }
}

#[test]
fn separating_axis_matches_rasterization() {
    let mut rng = rng::stream(5, "boxes");
    let mut compared = 0;
    let mut overlapping = 0;
    for _ in 0..1000 {
        let random_box = |rng: &mut rand_chacha::ChaCha8Rng| OrientedBox {
            cx: rng.gen_range(-4.0..4.0),
            cy: rng.gen_range(-4.0..4.0),
            heading: rng.gen_range(-3.2..3.2),
            length: rng.gen_range(1.0..5.0),
            width: rng.gen_range(0.8..2.5),
        };
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        // Pairs whose boundaries lie within two pitches of each other are
        // below the oracle's resolution.
        if boxes_overlap(&resized(&a, -2.0 * PITCH), &b) != boxes_overlap(&resized(&a, 2.0 * PITCH), &b) {
            continue;
        }
        let sat = boxes_overlap(&a, &b);
        assert_eq!(sat, rasterized_overlap(&a, &b), "{a:?} {b:?}");
        compared += 1;
        overlapping += sat as usize;
    }
    assert!(compared > 900, "only {compared} pairs compared");
    assert!(overlapping > 100 && overlapping < compared - 100, "{overlapping} of {compared} overlap");
}

/// Replaces the ADS command with `before` until `switch_step`, then `after`.
struct Scripted {
    switch_step: usize,
    before: f64,
    after: f64,
}

impl RepairPlugin for Scripted {
    fn repair(&mut self, obs: &SceneObservation, a_ads: f64) -> Result<RepairDecision> {
        let a = if obs.t < self.switch_step { self.before } else { self.after };
        Ok(RepairDecision {
            a_final: a,
            intervened: a != a_ads,
            ..RepairDecision::pass_through(a_ads)
        })
    }
}

const NPC_STOP_TIME: f64 = 6.1;

fn stopping_lead_scenario() -> Scenario {
    Scenario {
        template_id: TemplateId::S4HighwayExit,
        ego_route: vec![(0.0, 0.0), (300.0, 0.0)],
        ego_start_speed: 10.0,
        destination_radius: 5.0,
        time_budget: 20.0,
        seed: 0,
        npcs: vec![NpcScript {
            route: vec![(60.0, 0.0), (300.0, 0.0)],
            spawn_time: 0.0,
            target_speed: 10.0,
            speed_profile: Some(vec![(NPC_STOP_TIME - 0.1, 10.0), (NPC_STOP_TIME, 0.0)]),
            dimensions: (4.5, 2.0),
        }],
    }
}

#[test]
fn empty_traffic_reaches_destination() {
    let mut scenario = stopping_lead_scenario();
    scenario.npcs.clear();
    scenario.ego_route = vec![(0.0, 0.0), (80.0, 0.0), (80.0, 40.0)];
    scenario.time_budget = 60.0;
    let trace = run_episode(&scenario, &DrivingPolicy::default(), None, &SimConfig::default()).unwrap();
    assert_eq!(trace.outcome.result, EpisodeResult::Success);
}

#[test]
fn full_throttle_hits_stopped_lead() {
    let sim = SimConfig::default();
    let scenario = stopping_lead_scenario();
    let mut throttle = Scripted { switch_step: usize::MAX, before: 0.8, after: 0.8 };
    let trace = run_episode(&scenario, &DrivingPolicy::default(), Some(&mut throttle), &sim).unwrap();
    assert_eq!(trace.outcome.result, EpisodeResult::Collision);
    let end_time = trace.outcome.final_step as f64 * sim.dt;
    assert!(end_time > NPC_STOP_TIME, "collision at {end_time} s happened before the lead stopped");
}

#[test]
fn braking_five_seconds_early_avoids_the_stopped_lead() {
    let sim = SimConfig::default();
    let scenario = stopping_lead_scenario();
    let switch_step = ((NPC_STOP_TIME - 5.0) / sim.dt).round() as usize;
    let mut brake = Scripted { switch_step, before: 0.8, after: -1.0 };
    let trace = run_episode(&scenario, &DrivingPolicy::default(), Some(&mut brake), &sim).unwrap();

    let at = &trace.steps[switch_step];
    let lead = at.npcs[0];
    let gap = (lead.x - at.obs.ego.x) - (lead.length + at.obs.ego.length) / 2.0;
    let braking_distance = at.obs.ego.speed.powi(2) / (2.0 * sim.a_brk);
    assert!(braking_distance < gap, "{braking_distance} >= {gap}");

    // Braking for good stops the ego behind the lead, short of its destination.
    assert_ne!(trace.outcome.result, EpisodeResult::Collision);
    assert_eq!(trace.outcome.result, EpisodeResult::Timeout);
    assert_eq!(trace.steps.last().unwrap().obs.ego.speed, 0.0);
}

#[test]
fn crossing_template_yields_both_outcomes() {
    let sim = SimConfig::default();
    let policy = DrivingPolicy::default();
    let scenarios = fuzz_scenarios(TemplateId::S3Crossing, 200, 1, &TemplateTable::default()).unwrap();
    let (mut collisions, mut successes) = (0, 0);
    for s in &scenarios {
        match run_episode(s, &policy, None, &sim).unwrap().outcome.result {
            EpisodeResult::Collision => collisions += 1,
            EpisodeResult::Success => successes += 1,
            EpisodeResult::Timeout => {}
        }
    }
    assert!(collisions >= 20, "{collisions} collisions");
    assert!(successes >= 20, "{successes} successes");
}

#[test]
fn fuzzing_is_deterministic_and_valid() {
    let table = TemplateTable::default();
    let a = fuzz_scenarios(TemplateId::S1LeftTurn, 5, 7, &table).unwrap();
    let b = fuzz_scenarios(TemplateId::S1LeftTurn, 5, 7, &table).unwrap();
    assert_eq!(a, b);
    for s in TemplateId::ALL.iter().flat_map(|&t| fuzz_scenarios(t, 20, 3, &table).unwrap()) {
        s.validate().unwrap();
    }
}
