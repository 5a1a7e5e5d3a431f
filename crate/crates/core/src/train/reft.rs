use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dqn::{dqn_update, DqnConfig, DqnState, ReplayBuffer, Transition};
use super::reward::VIOLATION_PENALTY;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::policy::DrivingPolicy;
use crate::repair::{AdReftPlugin, RepairModel, Selection};
use crate::rng;
use crate::sim::{run_episode, EpisodeResult, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReftConfig {
    pub episodes: usize,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub target_sync_every: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which epsilon decays linearly; constant afterwards.
    pub epsilon_decay_episodes: usize,
    /// Minibatch updates after each episode.
    pub updates_per_episode: usize,
    /// When false the reward keeps only the collision penalty.
    pub safe_explore: bool,
    pub seed: u64,
}

impl Default for ReftConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            buffer_capacity: 5000,
            learning_rate: 1e-4,
            gamma: 0.95,
            batch_size: 64,
            target_sync_every: 10,
            epsilon_start: 0.5,
            epsilon_end: 0.05,
            epsilon_decay_episodes: 200,
            updates_per_episode: 1,
            safe_explore: true,
            seed: 0,
        }
    }
}

impl ReftConfig {
    pub fn epsilon(&self, episode: usize) -> f64 {
        if self.epsilon_decay_episodes == 0 || episode >= self.epsilon_decay_episodes {
            return self.epsilon_end;
        }
        let f = episode as f64 / self.epsilon_decay_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReftReport {
    pub episode_returns: Vec<f64>,
    pub episode_collisions: Vec<bool>,
    pub updates: usize,
    pub mean_losses: Vec<f64>,
}

/// Fine-tunes the adapter head by Q-learning on episodes sampled from the
/// corpus. The encoder and monitor stay frozen, and the monitor's score
/// shapes the reward.
pub fn train_reft(
    model: &mut RepairModel,
    corpus: &Corpus,
    policy: &DrivingPolicy,
    sim: &SimConfig,
    cfg: &ReftConfig,
) -> Result<ReftReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut report = ReftReport::default();
    if cfg.episodes == 0 {
        return Ok(report);
    }
    let mut pick = rng::stream(cfg.seed, "reft.scenarios");
    let mut explore = rng::stream(cfg.seed, "reft.explore");
    let mut replay = rng::stream(cfg.seed, "reft.replay");
    let dqn = DqnConfig {
        batch_size: cfg.batch_size,
        gamma: cfg.gamma,
        target_sync_every: cfg.target_sync_every,
    };
    let mut state = DqnState::new(&model.store, model.adapter_head(), cfg.learning_rate);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);

    for episode in 0..cfg.episodes {
        let banked = &corpus.entries[pick.gen_range(0..corpus.entries.len())];
        let selection = Selection::EpsilonGreedy {
            epsilon: cfg.epsilon(episode),
            rng: rng::indexed(explore.gen(), "reft.episode", episode as u64),
        };
        let (trace, contexts, last) = {
            let mut plugin = AdReftPlugin::new(model, sim, selection).recording();
            let trace = run_episode(&banked.scenario, policy, Some(&mut plugin), sim)?;
            let last = plugin.context_of(&trace.final_observation)?;
            (trace, plugin.take_contexts(), last)
        };

        let collided = trace.outcome.result == EpisodeResult::Collision;
        let n = trace.steps.len();
        let mut ret = 0.0;
        for (t, step) in trace.steps.iter().enumerate() {
            let decision = step.decision.expect("plug-in decides every step");
            let terminal = t + 1 == n;
            let reward = if cfg.safe_explore {
                step.reward.expect("monitor score present")
            } else if terminal && collided {
                -VIOLATION_PENALTY
            } else {
                0.0
            };
            ret += reward;
            buffer.push(Transition {
                state: contexts[t].clone(),
                repair_index: decision.repair_index,
                reward,
                next_state: if terminal { last.clone() } else { contexts[t + 1].clone() },
                terminal,
            });
        }
        report.episode_returns.push(ret);
        report.episode_collisions.push(collided);

        let mut losses = Vec::new();
        if buffer.len() >= cfg.batch_size {
            let (store, online, target) = model.adapter_parts();
            for _ in 0..cfg.updates_per_episode {
                losses.push(dqn_update(store, online, target, &mut state, &buffer, &dqn, &mut replay)?);
            }
        }
        report.mean_losses.push(if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        });
    }
    report.updates = state.updates;
    Ok(report)
}
