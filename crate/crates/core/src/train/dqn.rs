use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp, ParamStore, Tape};

/// One replayed step. The encoder is frozen during fine-tuning, so states
/// are stored as their context vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub repair_index: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// FIFO ring of transitions.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample of distinct transitions.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        if self.items.len() < n {
            return Err(Error::BufferUnderflow {
                have: self.items.len(),
                need: n,
            });
        }
        Ok(index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DqnConfig {
    pub batch_size: usize,
    pub gamma: f64,
    pub target_sync_every: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            gamma: 0.95,
            target_sync_every: 10,
        }
    }
}

/// Optimizer state and update counter for the online Q head.
#[derive(Clone, Debug)]
pub struct DqnState {
    pub adam: Adam,
    pub updates: usize,
}

impl DqnState {
    pub fn new(store: &ParamStore, online: &Mlp, learning_rate: f64) -> Self {
        Self {
            adam: Adam::new(store, online.params(), learning_rate),
            updates: 0,
        }
    }
}

/// Bootstrapped regression targets; terminal transitions use the reward alone.
pub fn td_targets(store: &ParamStore, target: &Mlp, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    let next: Vec<f64> = batch.iter().flat_map(|t| t.next_state.iter().copied()).collect();
    let q_next = target.predict(store, batch.len(), next)?;
    let n = target.output_dim();
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.terminal {
                t.reward
            } else {
                let best = q_next[i * n..(i + 1) * n]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * best
            }
        })
        .collect())
}

/// One minibatch Q-learning step on `online`; only its parameters move.
/// The target head is refreshed every `target_sync_every` updates.
pub fn dqn_update(
    store: &mut ParamStore,
    online: &Mlp,
    target: &Mlp,
    state: &mut DqnState,
    buffer: &ReplayBuffer,
    cfg: &DqnConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let batch = buffer.sample(cfg.batch_size, rng)?;
    let targets = td_targets(store, target, &batch, cfg.gamma)?;
    let actions: Vec<usize> = batch.iter().map(|t| t.repair_index).collect();
    let states: Vec<f64> = batch.iter().flat_map(|t| t.state.iter().copied()).collect();

    let (loss, grads) = {
        let mut tape = Tape::new();
        let x = tape.input(batch.len(), online.input_dim(), states)?;
        let q = online.forward(&mut tape, store, x)?;
        let chosen = tape.pick_per_row(q, &actions)?;
        let y = tape.input(batch.len(), 1, targets)?;
        let err = tape.sub(chosen, y)?;
        let sq = tape.mul(err, err)?;
        let loss = tape.mean(sq)?;
        let value = tape.scalar(loss);
        (value, tape.backward(loss)?.into_param_grads())
    };
    let online_ids = online.params();
    let grads: Vec<_> = grads.into_iter().filter(|(id, _)| online_ids.contains(id)).collect();
    store.accumulate(&grads, 1.0);
    state.adam.step(store);
    state.updates += 1;
    if cfg.target_sync_every > 0 && state.updates % cfg.target_sync_every == 0 {
        target.copy_from(online, store);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng;

    fn transition(reward: f64, terminal: bool) -> Transition {
        Transition {
            state: vec![1.0, 0.0],
            repair_index: 0,
            reward,
            next_state: vec![0.0, 1.0],
            terminal,
        }
    }

    #[test]
    fn buffer_drops_oldest_first() {
        let mut b = ReplayBuffer::new(2);
        for r in [1.0, 2.0, 3.0] {
            b.push(transition(r, false));
        }
        let rewards: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, [2.0, 3.0]);
        assert_eq!(b.capacity(), 2);
    }

    #[test]
    fn sampling_more_than_stored_fails() {
        let b = ReplayBuffer::new(4);
        let mut r = rng::stream(0, "t");
        assert!(matches!(b.sample(1, &mut r), Err(Error::BufferUnderflow { have: 0, need: 1 })));
    }

    #[test]
    fn terminal_targets_do_not_bootstrap() {
        let mut r = rng::stream(0, "t");
        let mut store = ParamStore::new();
        let target = Mlp::new(&mut store, "q", &[2, 2], Activation::Relu, &mut r);
        let q_next = target.predict(&store, 1, vec![0.0, 1.0]).unwrap();
        let best = q_next[0].max(q_next[1]);
        let (a, b) = (transition(0.5, true), transition(0.5, false));
        let y = td_targets(&store, &target, &[&a, &b], 0.9).unwrap();
        assert_eq!(y[0], 0.5);
        assert_eq!(y[1], 0.5 + 0.9 * best);
    }

    #[test]
    fn update_touches_only_the_online_head_and_syncs() {
        let mut r = rng::stream(1, "t");
        let mut store = ParamStore::new();
        let online = Mlp::new(&mut store, "q", &[2, 2], Activation::Relu, &mut r);
        let target = Mlp::new(&mut store, "q_target", &[2, 2], Activation::Relu, &mut r);
        let mut buffer = ReplayBuffer::new(8);
        for i in 0..8 {
            buffer.push(transition(f64::from(i), i % 3 == 0));
        }
        let cfg = DqnConfig { batch_size: 4, gamma: 0.9, target_sync_every: 3 };
        let mut state = DqnState::new(&store, &online, 1e-2);
        let frozen = store.get(target.params()[0]).data().to_vec();
        for _ in 0..2 {
            dqn_update(&mut store, &online, &target, &mut state, &buffer, &cfg, &mut r).unwrap();
        }
        assert_eq!(store.get(target.params()[0]).data(), &frozen[..]);
        dqn_update(&mut store, &online, &target, &mut state, &buffer, &cfg, &mut r).unwrap();
        assert_eq!(state.updates, 3);
        for (o, t) in online.params().into_iter().zip(target.params()) {
            assert_eq!(store.get(o).data(), store.get(t).data());
        }
    }
}
