//! Comparison repair plug-ins: random intervention, a time-to-collision
//! rule, and an anomaly detector with emergency braking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::action::{action_value, RepairDecision, ACTION_COUNT, STRONGEST};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp, ParamStore, Tape};
use crate::policy::DrivingPolicy;
use crate::rng;
use crate::sim::{run_episode, EpisodeResult, SceneObservation, SimConfig, VehicleState};

/// Replaces the ADS command with the given action regardless of direction.
fn forced(index: usize) -> RepairDecision {
    let a_hat = action_value(index);
    RepairDecision {
        y_safe_hat: None,
        repair_index: index,
        a_hat,
        a_final: a_hat,
        intervened: true,
        flagged: true,
    }
}

/// Overrides the ADS with a uniformly random action at a fixed rate.
#[derive(Clone, Debug)]
pub struct RandomRepair {
    pub intervene_prob: f64,
    rng: ChaCha8Rng,
}

impl RandomRepair {
    pub fn new(intervene_prob: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&intervene_prob) {
            return Err(Error::Config(format!("intervene_prob {intervene_prob} outside [0, 1]")));
        }
        Ok(Self {
            intervene_prob,
            rng: rng::stream(seed, "baseline.random"),
        })
    }

    pub fn decide(&mut self, a_ads: f64) -> RepairDecision {
        // Always draw both numbers so the stream position does not depend on the outcome.
        let fire = self.rng.gen::<f64>() < self.intervene_prob;
        let index = self.rng.gen_range(0..ACTION_COUNT);
        if fire {
            forced(index)
        } else {
            RepairDecision::pass_through(a_ads)
        }
    }
}

impl crate::sim::RepairPlugin for RandomRepair {
    fn repair(&mut self, _obs: &SceneObservation, a_ads: f64) -> Result<RepairDecision> {
        Ok(self.decide(a_ads))
    }
}

/// Time-to-collision rule with a severity-proportional brake.
#[derive(Clone, Debug, PartialEq)]
pub struct TtcRepair {
    /// Seconds.
    pub threshold: f64,
    /// Half-width of the ego route corridor, meters.
    pub corridor: f64,
    /// Time step used to sample predicted paths.
    pub dt: f64,
}

impl Default for TtcRepair {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            corridor: 3.5,
            dt: 0.1,
        }
    }
}

/// Gap over closing speed; infinite when the gap is not closing.
pub fn time_to_collision(gap: f64, closing_speed: f64) -> f64 {
    if closing_speed <= 0.0 {
        f64::INFINITY
    } else {
        gap.max(0.0) / closing_speed
    }
}

/// Linear map from TTC to an action index: 0 at the threshold, 9 at impact.
pub fn severity_index(ttc: f64, threshold: f64) -> usize {
    let raw = (9.0 * (1.0 - ttc / threshold)).round();
    raw.clamp(0.0, STRONGEST as f64) as usize
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

impl TtcRepair {
    fn route_points(obs: &SceneObservation) -> Vec<(f64, f64)> {
        std::iter::once((obs.ego.x, obs.ego.y))
            .chain(obs.route_lookahead.iter().map(|p| (p.x, p.y)))
            .collect()
    }

    fn in_corridor(&self, route: &[(f64, f64)], p: (f64, f64)) -> bool {
        route
            .windows(2)
            .any(|w| segment_distance(p, w[0], w[1]) <= self.corridor)
    }

    /// Whether the participant's constant-velocity path enters the route
    /// corridor within the threshold horizon.
    fn crosses(&self, route: &[(f64, f64)], npc: &VehicleState) -> bool {
        let (vx, vy) = npc.velocity();
        let steps = (self.threshold / self.dt).ceil() as usize;
        (0..=steps).any(|k| {
            let t = k as f64 * self.dt;
            self.in_corridor(route, (npc.x + vx * t, npc.y + vy * t))
        })
    }

    /// TTC toward the nearest crossing participant ahead of the ego.
    pub fn ttc(&self, obs: &SceneObservation) -> f64 {
        let ego = &obs.ego;
        let route = Self::route_points(obs);
        let (sin_h, cos_h) = ego.heading.sin_cos();
        let nearest = obs
            .participants
            .iter()
            .filter(|p| {
                let ahead = (p.x - ego.x) * cos_h + (p.y - ego.y) * sin_h;
                ahead > 0.0 && self.crosses(&route, p)
            })
            .min_by(|a, b| {
                let da = (a.x - ego.x).hypot(a.y - ego.y);
                let db = (b.x - ego.x).hypot(b.y - ego.y);
                da.total_cmp(&db)
            });
        let Some(p) = nearest else {
            return f64::INFINITY;
        };
        let ahead = (p.x - ego.x) * cos_h + (p.y - ego.y) * sin_h;
        let rel = p.heading - ego.heading;
        let extent = 0.5 * (p.length * rel.cos().abs() + p.width * rel.sin().abs());
        let gap = ahead - 0.5 * ego.length - extent;
        let (vx, vy) = p.velocity();
        let closing = ego.speed - (vx * cos_h + vy * sin_h);
        time_to_collision(gap, closing)
    }

    pub fn decide(&self, obs: &SceneObservation, a_ads: f64) -> RepairDecision {
        let ttc = self.ttc(obs);
        if ttc >= self.threshold {
            return RepairDecision::pass_through(a_ads);
        }
        let index = severity_index(ttc, self.threshold);
        let a_hat = action_value(index);
        let intervened = a_ads > a_hat;
        RepairDecision {
            y_safe_hat: None,
            repair_index: index,
            a_hat,
            a_final: if intervened { a_hat } else { a_ads },
            intervened,
            flagged: true,
        }
    }
}

impl crate::sim::RepairPlugin for TtcRepair {
    fn repair(&mut self, obs: &SceneObservation, a_ads: f64) -> Result<RepairDecision> {
        Ok(self.decide(obs, a_ads))
    }
}

/// Nearest participants in the anomaly feature vector.
pub const ANOMALY_PARTICIPANTS: usize = 4;
/// Three values per participant plus the ego speed.
pub const ANOMALY_FEATURES: usize = 3 * ANOMALY_PARTICIPANTS + 1;

/// Ego-frame position and relative heading of the nearest participants,
/// padded with a sentinel at the perception radius, then the ego speed.
/// Distances are divided by the perception radius, angles by pi and the
/// speed by `v_max`.
pub fn anomaly_features(obs: &SceneObservation, sim: &SimConfig) -> Vec<f64> {
    let ego = &obs.ego;
    let r = sim.perception_radius;
    let (sin_h, cos_h) = ego.heading.sin_cos();
    let mut near: Vec<(f64, [f64; 3])> = obs
        .participants
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - ego.x, p.y - ego.y);
            let lx = (dx * cos_h + dy * sin_h).clamp(-r, r) / r;
            let ly = (-dx * sin_h + dy * cos_h).clamp(-r, r) / r;
            let phi = crate::sim::geometry::wrap_angle(p.heading - ego.heading) / std::f64::consts::PI;
            (dx.hypot(dy), [lx, ly, phi])
        })
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(ANOMALY_FEATURES);
    for k in 0..ANOMALY_PARTICIPANTS {
        out.extend_from_slice(&near.get(k).map_or([1.0, 0.0, 0.0], |n| n.1));
    }
    out.push(ego.speed / sim.v_max);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Quantile of training errors used as the detection threshold.
    pub quantile: f64,
    pub seed: u64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            bottleneck: 4,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            quantile: 0.95,
            seed: 0,
        }
    }
}

/// Autoencoder over scene features with a reconstruction-error threshold.
#[derive(Clone, Debug)]
pub struct AnomalyModel {
    store: ParamStore,
    net: Mlp,
    threshold: Option<f64>,
}

impl AnomalyModel {
    pub fn new(cfg: &AnomalyConfig) -> Self {
        let mut store = ParamStore::new();
        let mut init = rng::stream(cfg.seed, "baseline.anomaly.init");
        let sizes = [ANOMALY_FEATURES, cfg.hidden, cfg.bottleneck, cfg.hidden, ANOMALY_FEATURES];
        let net = Mlp::new(&mut store, "autoencoder", &sizes, Activation::Tanh, &mut init);
        Self { store, net, threshold: None }
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    /// Mean squared reconstruction error of each row.
    pub fn errors(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let out = self.net.predict(&self.store, rows.len(), flat)?;
        Ok(rows
            .iter()
            .zip(out.chunks(ANOMALY_FEATURES))
            .map(|(x, y)| {
                x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / ANOMALY_FEATURES as f64
            })
            .collect())
    }

    /// Fits the autoencoder to `rows` and sets the threshold at the
    /// configured quantile of their reconstruction errors.
    pub fn fit(&mut self, rows: &[Vec<f64>], cfg: &AnomalyConfig) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::DegenerateCorpus("no states to fit the anomaly detector".into()));
        }
        let mut shuffle = rng::stream(cfg.seed, "baseline.anomaly.order");
        let mut adam = Adam::new(&self.store, self.net.params(), cfg.learning_rate);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        for _ in 0..cfg.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let flat: Vec<f64> = chunk.iter().flat_map(|&i| rows[i].iter().copied()).collect();
                let grads = {
                    let mut tape = Tape::new();
                    let x = tape.input(chunk.len(), ANOMALY_FEATURES, flat)?;
                    let y = self.net.forward(&mut tape, &self.store, x)?;
                    let err = tape.sub(y, x)?;
                    let sq = tape.mul(err, err)?;
                    let loss = tape.mean(sq)?;
                    tape.backward(loss)?.into_param_grads()
                };
                self.store.accumulate(&grads, 1.0);
                adam.step(&mut self.store);
            }
        }
        let mut errors = self.errors(rows)?;
        errors.sort_by(f64::total_cmp);
        let k = ((cfg.quantile * errors.len() as f64).ceil() as usize).clamp(1, errors.len());
        self.threshold = Some(errors[k - 1]);
        Ok(())
    }

    /// Trains on the states of the corpus's success episodes, replayed
    /// without repair.
    pub fn fit_corpus(corpus: &Corpus, policy: &DrivingPolicy, sim: &SimConfig, cfg: &AnomalyConfig) -> Result<Self> {
        let mut rows = Vec::new();
        for banked in corpus.successes() {
            let trace = run_episode(&banked.scenario, policy, None, sim)?;
            if trace.outcome.result != EpisodeResult::Success {
                continue;
            }
            rows.extend(trace.steps.iter().map(|s| anomaly_features(&s.obs, sim)));
        }
        let mut model = Self::new(cfg);
        model.fit(&rows, cfg)?;
        Ok(model)
    }

    pub fn is_anomalous(&self, features: &[f64]) -> Result<bool> {
        let tau = self.threshold.ok_or(Error::DetectorUntrained)?;
        Ok(self.errors(&[features.to_vec()])?[0] > tau)
    }
}

/// Emergency brake whenever the scene looks out of distribution.
#[derive(Clone, Debug)]
pub struct AnomalyRepair {
    pub detector: AnomalyModel,
    pub sim: SimConfig,
}

impl AnomalyRepair {
    pub fn new(detector: AnomalyModel, sim: &SimConfig) -> Result<Self> {
        if detector.threshold.is_none() {
            return Err(Error::DetectorUntrained);
        }
        Ok(Self { detector, sim: sim.clone() })
    }

    pub fn decide(&self, obs: &SceneObservation, a_ads: f64) -> Result<RepairDecision> {
        if self.detector.is_anomalous(&anomaly_features(obs, &self.sim))? {
            Ok(forced(STRONGEST))
        } else {
            Ok(RepairDecision::pass_through(a_ads))
        }
    }
}

impl crate::sim::RepairPlugin for AnomalyRepair {
    fn repair(&mut self, obs: &SceneObservation, a_ads: f64) -> Result<RepairDecision> {
        self.decide(obs, a_ads)
    }
}
