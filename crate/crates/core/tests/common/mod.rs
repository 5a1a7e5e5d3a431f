//! Helpers shared by the integration tests and the acceptance gate.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use repairlab::action::ACTION_COUNT;
use repairlab::encoder::EncoderConfig;
use repairlab::nn::{ParamId, Tape};
use repairlab::repair::RepairModel;
use repairlab::rng;
use repairlab::train::{batch_loss, Sample, WeakLabel};

/// Random token sets and labels for a model with the given config.
pub fn random_samples(cfg: &EncoderConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..count)
        .map(|_| {
            let n = rng.gen_range(1..5);
            let tokens = (0..n * cfg.attributes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let critical = rng.gen_bool(0.5);
            Sample {
                tokens,
                token_count: n,
                a_ads: rng.gen_range(-1.0..1.0),
                label: WeakLabel {
                    y_safe: u8::from(critical),
                    y_repair: rng.gen_range(0..ACTION_COUNT),
                },
            }
        })
        .collect()
}

fn loss_value(model: &RepairModel, batch: &[&Sample]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _, _) = batch_loss(model, &mut tape, batch).expect("finite loss");
    tape.scalar(loss)
}

/// Largest relative error between the tape gradient of the supervised loss
/// and a central finite difference, over every trainable parameter entry.
/// Gradients smaller than `floor` are compared absolutely against it.
pub fn max_gradient_error(model: &mut RepairModel, samples: &[Sample], floor: f64) -> f64 {
    let batch: Vec<&Sample> = samples.iter().collect();
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut tape = Tape::new();
        let (loss, _, _) = batch_loss(model, &mut tape, &batch).expect("finite loss");
        tape.backward(loss).expect("backward").into_param_grads()
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (id, grad) in analytic {
        for (k, &g) in grad.iter().enumerate() {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + eps;
            let up = loss_value(model, &batch);
            model.store.get_mut(id).data_mut()[k] = orig - eps;
            let down = loss_value(model, &batch);
            model.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (g - numeric).abs() / g.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// The `i`-th small configuration of the gradient check.
pub fn small_config(i: u64) -> EncoderConfig {
    let mut r = rng::indexed(0x6772_6164, "gradcheck.config", i);
    let heads = r.gen_range(1..=2);
    EncoderConfig {
        hidden: heads * r.gen_range(2..=4),
        layers: r.gen_range(1..=2),
        heads,
        ffn_mult: r.gen_range(1..=2),
        token_velocity: r.gen_bool(0.5),
    }
}

/// Runs the gradient check on configuration `i` and returns the worst error.
pub fn gradient_check(i: u64) -> f64 {
    let cfg = small_config(i);
    let mut r = rng::indexed(0x6772_6164, "gradcheck.model", i);
    let mut model = RepairModel::new(&cfg, &mut r).expect("valid config");
    let samples = random_samples(&cfg, 3, &mut r);
    max_gradient_error(&mut model, &samples, 1e-4)
}

/// Deterministic two-state, two-action MDP: `(next state, reward)` for each
/// state and action.
pub const TOY_MDP: [[(usize, f64); 2]; 2] = [[(0, 1.0), (1, 0.0)], [(0, -1.0), (1, 2.0)]];

/// Optimal action values by value iteration to machine precision.
pub fn value_iteration(gamma: f64) -> [[f64; 2]; 2] {
    let mut q = [[0.0_f64; 2]; 2];
    for _ in 0..2000 {
        let v = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
        for s in 0..2 {
            for a in 0..2 {
                let (next, r) = TOY_MDP[s][a];
                q[s][a] = r + gamma * v[next];
            }
        }
    }
    q
}

/// Trains a linear Q head on one-hot states of [`TOY_MDP`] with the library's
/// DQN update and returns the sup-norm distance to the value-iteration
/// optimum after `updates` steps.
pub fn dqn_oracle_error(updates: usize, gamma: f64) -> f64 {
    use repairlab::nn::{Activation, Mlp, ParamStore};
    use repairlab::train::{dqn_update, DqnConfig, DqnState, ReplayBuffer, Transition};

    let one_hot = |s: usize| if s == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
    let mut r = rng::stream(3, "dqn.oracle");
    let mut store = ParamStore::new();
    let online = Mlp::new(&mut store, "q", &[2, 2], Activation::Relu, &mut r);
    let target = Mlp::new(&mut store, "q_target", &[2, 2], Activation::Relu, &mut r);
    target.copy_from(&online, &mut store);
    let mut buffer = ReplayBuffer::new(4);
    for s in 0..2 {
        for a in 0..2 {
            let (next, reward) = TOY_MDP[s][a];
            buffer.push(Transition {
                state: one_hot(s),
                repair_index: a,
                reward,
                next_state: one_hot(next),
                terminal: false,
            });
        }
    }
    let cfg = DqnConfig {
        batch_size: 4,
        gamma,
        target_sync_every: 5,
    };
    let mut state = DqnState::new(&store, &online, 0.05);
    for i in 0..updates {
        // Step the learning rate down so Adam settles instead of orbiting.
        if i == updates * 3 / 5 || i == updates * 4 / 5 {
            state.adam.learning_rate /= 10.0;
        }
        dqn_update(&mut store, &online, &target, &mut state, &buffer, &cfg, &mut r).expect("update");
    }
    let optimum = value_iteration(gamma);
    let mut worst: f64 = 0.0;
    for s in 0..2 {
        let q = online.predict(&store, 1, one_hot(s)).expect("predict");
        for a in 0..2 {
            worst = worst.max((q[a] - optimum[s][a]).abs());
        }
    }
    worst
}

type Pt = (f64, f64);

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn segments_cross(p: Pt, q: Pt, r: Pt, s: Pt) -> bool {
    let d1 = cross(r, s, p);
    let d2 = cross(r, s, q);
    let d3 = cross(p, q, r);
    let d4 = cross(p, q, s);
    (d1 * d2 <= 0.0) && (d3 * d4 <= 0.0)
}

fn point_to_segment(p: Pt, a: Pt, b: Pt) -> f64 {
    // Closest point by clamped projection, written out by components.
    let abx = b.0 - a.0;
    let aby = b.1 - a.1;
    let t = ((p.0 - a.0) * abx + (p.1 - a.1) * aby) / (abx * abx + aby * aby);
    let t = t.clamp(0.0, 1.0);
    ((a.0 + t * abx - p.0).powi(2) + (a.1 + t * aby - p.1).powi(2)).sqrt()
}

fn inside_convex(p: Pt, poly: &[Pt; 4]) -> bool {
    let signs: Vec<f64> = (0..4).map(|k| cross(poly[k], poly[(k + 1) % 4], p)).collect();
    signs.iter().all(|&s| s >= 0.0) || signs.iter().all(|&s| s <= 0.0)
}

/// Distance between two convex quadrilaterals from their edges: zero when an
/// edge pair crosses or one contains the other, else the closest edge pair.
pub fn polygon_distance(a: &[Pt; 4], b: &[Pt; 4]) -> f64 {
    if inside_convex(a[0], b) || inside_convex(b[0], a) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..4 {
        let (p, q) = (a[i], a[(i + 1) % 4]);
        for j in 0..4 {
            let (r, s) = (b[j], b[(j + 1) % 4]);
            if segments_cross(p, q, r, s) {
                return 0.0;
            }
            best = best
                .min(point_to_segment(p, r, s))
                .min(point_to_segment(q, r, s))
                .min(point_to_segment(r, p, q))
                .min(point_to_segment(s, p, q));
        }
    }
    best
}

/// Recomputes weak safety labels from scratch: a state is critical when any
/// visible participant is closer than `delta_d` meters, or when a collision
/// ends the episode fewer than `window` steps later.
pub fn brute_force_labels(trace: &repairlab::sim::EpisodeTrace, delta_d: f64, window: usize) -> Vec<u8> {
    use repairlab::sim::EpisodeResult;
    let crash_at = (trace.outcome.result == EpisodeResult::Collision).then_some(trace.outcome.final_step);
    trace
        .steps
        .iter()
        .enumerate()
        .map(|(t, step)| {
            let ego = step.obs.ego.bounding_box().corners();
            let near = step
                .obs
                .participants
                .iter()
                .any(|p| polygon_distance(&ego, &p.bounding_box().corners()) < delta_d);
            let soon = crash_at.is_some_and(|c| c - t < window);
            u8::from(near || soon)
        })
        .collect()
}

/// `count` unrepaired traces spread over all templates.
pub fn random_traces(count: usize, seed: u64) -> Vec<repairlab::sim::EpisodeTrace> {
    use repairlab::corpus::{fuzz_scenarios, TemplateTable};
    use repairlab::policy::DrivingPolicy;
    use repairlab::sim::{run_episode, SimConfig, TemplateId};
    let table = TemplateTable::default();
    let (policy, sim) = (DrivingPolicy::default(), SimConfig::default());
    let per = count.div_ceil(TemplateId::ALL.len());
    let mut out = Vec::with_capacity(count);
    for &template in &TemplateId::ALL {
        for s in fuzz_scenarios(template, per, seed, &table).expect("templates") {
            if out.len() < count {
                out.push(run_episode(&s, &policy, None, &sim).expect("episode"));
            }
        }
    }
    out
}

/// Checks the merger and reward invariants on `n` random inputs drawn from
/// the action set and the unit interval. Returns the first violation.
pub fn merge_reward_suite(n: usize, seed: u64) -> Result<(), String> {
    use repairlab::action::{action_value, ACTION_VALUES};
    use repairlab::repair::merge;
    use repairlab::train::step_reward;

    let mut r = rng::stream(seed, "merge.suite");
    for _ in 0..n {
        let a_ads = ACTION_VALUES[r.gen_range(0..ACTION_COUNT)];
        let index = r.gen_range(0..ACTION_COUNT);
        let y: f64 = r.gen_range(0.0..=1.0);
        let lambda: f64 = r.gen_range(0.0..=1.0);
        let d = merge(a_ads, y, index, lambda);
        if d.intervened && d.a_final >= a_ads {
            return Err(format!("intervened without braking harder: {d:?} a_ads {a_ads}"));
        }
        if !d.intervened && d.a_final != a_ads {
            return Err(format!("changed command without intervening: {d:?}"));
        }
        if d.intervened != (y > lambda && action_value(index) < a_ads) {
            return Err(format!("intervention rule broken: {d:?} lambda {lambda}"));
        }
        let identity = merge(a_ads, y, index, 1.0);
        if identity.intervened || identity.a_final != a_ads {
            return Err(format!("lambda 1 is not the identity: {identity:?}"));
        }
        for violated in [false, true] {
            let reward = step_reward(y, a_ads, action_value(index), violated);
            if !(-10.0..=1.0).contains(&reward) {
                return Err(format!("reward {reward} out of bounds"));
            }
        }
    }
    let examples = [
        step_reward(0.0, 0.4, 0.4, false),
        step_reward(1.0, 0.8, -1.0, false),
        step_reward(0.5, 0.8, -1.0, true),
    ];
    if examples != [1.0, 0.0, -9.95] {
        return Err(format!("substitutions gave {examples:?}"));
    }
    Ok(())
}
