//! The learned repair plug-in: safety monitor, repair adapter and merger.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::action::{action_value, RepairDecision, ACTION_COUNT};
use crate::encoder::{tokenize, Encoder, EncoderConfig, ObjectToken};
use crate::error::{Error, Result};
use crate::nn::weights::{self, NamedTensor, WeightFile};
use crate::nn::{Activation, Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sim::{RepairPlugin, SceneObservation, SimConfig};

/// Fraction of positive calibration states that must score above the threshold.
pub const CALIBRATION_RECALL: f64 = 0.95;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Encoder, monitor head, adapter head and the adapter's target copy, all in
/// one parameter store.
#[derive(Clone, Debug)]
pub struct RepairModel {
    pub store: ParamStore,
    encoder: Encoder,
    monitor: Mlp,
    adapter: Mlp,
    target: Mlp,
    pub lambda_safe: f64,
}

fn monitor_sizes(h: usize) -> [usize; 3] {
    [h + 1, (h / 2).max(1), 1]
}

fn adapter_sizes(h: usize) -> [usize; 3] {
    [h, (h / 2).max(1), ACTION_COUNT]
}

impl RepairModel {
    /// Freshly initialized model with `lambda_safe = 0.5`.
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config, rng)?;
        let h = config.hidden;
        let monitor = Mlp::new(&mut store, "monitor", &monitor_sizes(h), Activation::Relu, rng);
        let adapter = Mlp::new(&mut store, "adapter", &adapter_sizes(h), Activation::Relu, rng);
        let target = Mlp::new(&mut store, "adapter_target", &adapter_sizes(h), Activation::Relu, rng);
        target.copy_from(&adapter, &mut store);
        for id in target.params() {
            store.get_mut(id).set_requires_grad(false);
        }
        Ok(Self {
            store,
            encoder,
            monitor,
            adapter,
            target,
            lambda_safe: 0.5,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn monitor_head(&self) -> &Mlp {
        &self.monitor
    }

    pub fn adapter_head(&self) -> &Mlp {
        &self.adapter
    }

    pub fn target_head(&self) -> &Mlp {
        &self.target
    }

    /// Store plus the online and target adapter heads, for DQN updates.
    pub fn adapter_parts(&mut self) -> (&mut ParamStore, &Mlp, &Mlp) {
        (&mut self.store, &self.adapter, &self.target)
    }

    /// Parameters trained in the supervised stage.
    pub fn supervised_params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.params();
        ids.extend(self.monitor.params());
        ids.extend(self.adapter.params());
        ids
    }

    pub fn sync_target(&mut self) {
        self.target.copy_from(&self.adapter, &mut self.store);
    }

    pub fn tokens(&self, obs: &SceneObservation, sim: &SimConfig) -> Vec<ObjectToken> {
        tokenize(obs, sim)
    }

    /// Global context vector for an observation.
    pub fn features(&self, obs: &SceneObservation, sim: &SimConfig) -> Result<Vec<f64>> {
        self.encoder.encode(&self.store, &tokenize(obs, sim))
    }

    /// Monitor logits on a `B x H` context node and one ADS command per row.
    pub fn monitor_logit<'a>(&'a self, tape: &mut Tape<'a>, context: Var, a_ads: &[f64]) -> Result<Var> {
        let a = tape.input(a_ads.len(), 1, a_ads.to_vec())?;
        let joined = tape.concat_cols(&[context, a])?;
        self.monitor.forward(tape, &self.store, joined)
    }

    /// Safety-critical score in (0, 1).
    pub fn monitor(&self, context: &[f64], a_ads: f64) -> Result<f64> {
        let mut input = context.to_vec();
        input.push(a_ads);
        let logit = self.monitor.predict(&self.store, 1, input)?[0];
        Ok(sigmoid(logit))
    }

    pub fn q_values(&self, context: &[f64]) -> Result<Vec<f64>> {
        self.adapter.predict(&self.store, 1, context.to_vec())
    }

    /// Monitor score and repair index with the encoder run once.
    pub fn infer(&self, obs: &SceneObservation, a_ads: f64, sim: &SimConfig) -> Result<(Vec<f64>, f64, usize)> {
        let context = self.features(obs, sim)?;
        let y = self.monitor(&context, a_ads)?;
        let index = adapt(&self.q_values(&context)?);
        Ok((context, y, index))
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let c = self.config();
        let metadata = vec![
            ("hidden".to_string(), c.hidden.to_string()),
            ("layers".to_string(), c.layers.to_string()),
            ("heads".to_string(), c.heads.to_string()),
            ("ffn_mult".to_string(), c.ffn_mult.to_string()),
            ("token_velocity".to_string(), c.token_velocity.to_string()),
            ("lambda_safe".to_string(), self.lambda_safe.to_string()),
        ];
        let tensors = self
            .store
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        WeightFile { metadata, tensors }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        fn meta<T: std::str::FromStr>(file: &WeightFile, key: &str) -> Result<T> {
            file.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("weights", format!("missing or invalid `{key}`")))
        }
        let config = EncoderConfig {
            hidden: meta(file, "hidden")?,
            layers: meta(file, "layers")?,
            heads: meta(file, "heads")?,
            ffn_mult: meta(file, "ffn_mult")?,
            token_velocity: meta(file, "token_velocity")?,
        };
        let lambda_safe: f64 = meta(file, "lambda_safe")?;
        if !lambda_safe.is_finite() {
            return Err(Error::format("weights", "lambda_safe is not finite"));
        }
        let mut store = ParamStore::new();
        for t in &file.tensors {
            if store.find(&t.name).is_some() {
                return Err(Error::format("weights", format!("duplicate tensor `{}`", t.name)));
            }
            store.add(t.name.clone(), Tensor::new(t.shape.clone(), t.values.clone())?);
        }
        let encoder = Encoder::bind(&store, &config)?;
        let h = config.hidden;
        let head = |prefix: &str, sizes: &[usize]| {
            Mlp::bind(&store, prefix, sizes, Activation::Relu)
                .ok_or_else(|| Error::format("weights", format!("missing or misshapen `{prefix}` head")))
        };
        let monitor = head("monitor", &monitor_sizes(h))?;
        let adapter = head("adapter", &adapter_sizes(h))?;
        let target = head("adapter_target", &adapter_sizes(h))?;
        for id in target.params() {
            store.get_mut(id).set_requires_grad(false);
        }
        Ok(Self {
            store,
            encoder,
            monitor,
            adapter,
            target,
            lambda_safe,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        weights::encode(&self.to_weight_file())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_weight_file(&weights::decode(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Index of the largest Q-value; ties go to the larger (more conservative) index.
pub fn adapt(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v >= q[best] {
            best = i;
        }
    }
    best
}

/// Replaces the ADS command only when the state is flagged unsafe and the
/// repair is strictly more conservative.
pub fn merge(a_ads: f64, y_safe_hat: f64, repair_index: usize, lambda_safe: f64) -> RepairDecision {
    let a_hat = action_value(repair_index);
    let flagged = y_safe_hat > lambda_safe;
    let intervened = flagged && a_ads > a_hat;
    RepairDecision {
        y_safe_hat: Some(y_safe_hat),
        repair_index,
        a_hat,
        a_final: if intervened { a_hat } else { a_ads },
        intervened,
        flagged,
    }
}

/// Largest threshold that keeps at least 95% of the positive scores
/// strictly above it.
pub fn calibrate_lambda(positive_scores: &[f64]) -> Result<f64> {
    if positive_scores.is_empty() {
        return Err(Error::NoPositives);
    }
    let mut s = positive_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let misses = ((1.0 - CALIBRATION_RECALL) * n as f64 + 1e-9).floor() as usize;
    if misses > 0 && s[misses - 1] < s[misses] {
        Ok(s[misses - 1])
    } else {
        Ok(s[misses] - 1e-9)
    }
}

/// How the plug-in picks a repair index.
#[derive(Clone, Debug)]
pub enum Selection {
    Greedy,
    /// Uniform random index with probability `epsilon`, otherwise greedy.
    EpsilonGreedy { epsilon: f64, rng: ChaCha8Rng },
    /// Always a uniform random index (the random-repair-action ablation).
    Random { rng: ChaCha8Rng },
}

/// The learned repair model behind the simulator's plug-in interface.
pub struct AdReftPlugin<'m> {
    model: &'m RepairModel,
    sim: SimConfig,
    selection: Selection,
    record: bool,
    contexts: Vec<Vec<f64>>,
}

impl<'m> AdReftPlugin<'m> {
    pub fn new(model: &'m RepairModel, sim: &SimConfig, selection: Selection) -> Self {
        Self {
            model,
            sim: sim.clone(),
            selection,
            record: false,
            contexts: Vec::new(),
        }
    }

    /// Keeps every step's context vector for later replay.
    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn take_contexts(&mut self) -> Vec<Vec<f64>> {
        std::mem::take(&mut self.contexts)
    }

    pub fn context_of(&self, obs: &SceneObservation) -> Result<Vec<f64>> {
        self.model.features(obs, &self.sim)
    }
}

impl RepairPlugin for AdReftPlugin<'_> {
    fn repair(&mut self, obs: &SceneObservation, a_ads: f64) -> Result<RepairDecision> {
        let context = self.model.features(obs, &self.sim)?;
        let y = self.model.monitor(&context, a_ads)?;
        let index = match &mut self.selection {
            Selection::Greedy => adapt(&self.model.q_values(&context)?),
            Selection::EpsilonGreedy { epsilon, rng } => {
                if rng.gen::<f64>() < *epsilon {
                    rng.gen_range(0..ACTION_COUNT)
                } else {
                    adapt(&self.model.q_values(&context)?)
                }
            }
            Selection::Random { rng } => rng.gen_range(0..ACTION_COUNT),
        };
        if self.record {
            self.contexts.push(context);
        }
        Ok(merge(a_ads, y, index, self.model.lambda_safe))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> RepairModel {
        let cfg = EncoderConfig { hidden: 8, layers: 1, heads: 2, ffn_mult: 2, token_velocity: false };
        RepairModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn argmax_ties_and_shift() {
        assert_eq!(adapt(&[0.0; 10]), 9);
        let mut q = [0.0; 10];
        q[3] = 1.0;
        assert_eq!(adapt(&q), 3);
        let shifted: Vec<f64> = q.iter().map(|v| v + 17.5).collect();
        assert_eq!(adapt(&shifted), 3);
    }

    #[test]
    fn merge_examples() {
        let d = merge(0.6, 0.9, 9, 0.5);
        assert!(d.intervened && d.a_final == -1.0);
        let d = merge(0.6, 0.2, 9, 0.5);
        assert!(!d.intervened && d.a_final == 0.6);
        let d = merge(-1.0, 0.9, 5, 0.5);
        assert!(!d.intervened && d.a_final == -1.0 && d.flagged);
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(calibrate_lambda(&[0.9; 40]).unwrap(), 0.9 - 1e-9);
        let grid: Vec<f64> = (0..100).map(|i| 0.1 + 0.008 * i as f64).rev().collect();
        let mut sorted = grid.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(calibrate_lambda(&grid).unwrap(), sorted[4]);
        assert!(matches!(calibrate_lambda(&[]), Err(Error::NoPositives)));
        let single = calibrate_lambda(&[0.3]).unwrap();
        assert!(single < 0.3);
    }

    #[test]
    fn zero_monitor_output_layer_gives_half() {
        let mut m = small();
        m.monitor_head().clone().zero_output_layer(&mut m.store);
        let y = m.monitor(&[0.3; 8], 0.4).unwrap();
        assert_eq!(y, 0.5);
    }

    #[test]
    fn weight_roundtrip_is_byte_identical() {
        let mut m = small();
        m.lambda_safe = 0.123_456_789_012_345_67;
        let bytes = m.to_bytes();
        let back = RepairModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.lambda_safe, m.lambda_safe);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn target_starts_as_copy() {
        let m = small();
        for (a, t) in m.adapter_head().params().into_iter().zip(m.target_head().params()) {
            assert_eq!(m.store.get(a).data(), m.store.get(t).data());
        }
    }
}
