use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotate::{annotate, AnnotationConfig, WeakLabel};
use crate::corpus::{BankedScenario, Corpus};
use crate::encoder::tokenize;
use crate::error::{Error, Result};
use crate::nn::{Adam, Tape, Var};
use crate::policy::DrivingPolicy;
use crate::repair::{calibrate_lambda, RepairModel};
use crate::rng;
use crate::sim::{run_episode, SimConfig};

/// One annotated state: the tokenized scene, the ADS command and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<f64>,
    pub token_count: usize,
    pub a_ads: f64,
    pub label: WeakLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Negatives drawn per positive each epoch.
    pub negative_ratio: f64,
    /// Fraction of scenarios held out for threshold calibration.
    pub holdout_fraction: f64,
    /// Keep every n-th negative state of each trace; positives are always kept.
    pub negative_stride: usize,
    pub annotation: AnnotationConfig,
    pub seed: u64,
}

impl Default for SlConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-4,
            batch_size: 32,
            negative_ratio: 3.0,
            holdout_fraction: 0.2,
            negative_stride: 1,
            annotation: AnnotationConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlReport {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_positives: usize,
    pub train_negatives: usize,
    pub calibration_positives: usize,
    pub lambda_safe: f64,
}

/// Replays each scenario without repair and annotates its states.
pub fn collect_samples(
    scenarios: &[&BankedScenario],
    model: &RepairModel,
    policy: &DrivingPolicy,
    sim: &SimConfig,
    annotation: &AnnotationConfig,
    negative_stride: usize,
) -> Result<Vec<Sample>> {
    let stride = negative_stride.max(1);
    let mut out = Vec::new();
    for banked in scenarios {
        let trace = run_episode(&banked.scenario, policy, None, sim)?;
        let labels = annotate(&trace, annotation, sim.dt);
        for (t, (step, label)) in trace.steps.iter().zip(labels).enumerate() {
            if label.y_safe == 0 && t % stride != 0 {
                continue;
            }
            let tokens = tokenize(&step.obs, sim);
            out.push(Sample {
                token_count: tokens.len(),
                tokens: model.config().token_matrix(&tokens),
                a_ads: step.a_ads,
                label,
            });
        }
    }
    Ok(out)
}

/// Stacks the token sets of `batch` into one input node.
fn batch_input<'a>(model: &RepairModel, tape: &mut Tape<'a>, batch: &[&Sample]) -> Result<(Var, Vec<usize>)> {
    let lengths: Vec<usize> = batch.iter().map(|s| s.token_count).collect();
    let tokens: Vec<f64> = batch.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let x = tape.input(lengths.iter().sum(), model.config().attributes(), tokens)?;
    Ok((x, lengths))
}

/// Mean joint monitor and adapter loss over a batch, with its two parts.
pub fn batch_loss<'a>(model: &'a RepairModel, tape: &mut Tape<'a>, batch: &[&Sample]) -> Result<(Var, f64, f64)> {
    let (x, lengths) = batch_input(model, tape, batch)?;
    let context = model.encoder().forward(tape, &model.store, x, &lengths)?;
    let a_ads: Vec<f64> = batch.iter().map(|s| s.a_ads).collect();
    let logits = model.monitor_logit(tape, context, &a_ads)?;
    let targets: Vec<f64> = batch.iter().map(|s| f64::from(s.label.y_safe)).collect();
    let bce = tape.bce_with_logits(logits, &targets)?;
    let q = model.adapter_head().forward(tape, &model.store, context)?;
    let classes: Vec<usize> = batch.iter().map(|s| s.label.y_repair).collect();
    let ce = tape.cross_entropy(q, &classes)?;
    let (b, c) = (tape.scalar(bce), tape.scalar(ce));
    Ok((tape.add(bce, ce)?, b, c))
}

/// Minibatch Adam over the listed samples for one epoch; returns the mean loss.
pub fn train_epoch(
    model: &mut RepairModel,
    adam: &mut Adam,
    samples: &[Sample],
    order: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let grads = {
            let mut tape = Tape::new();
            let (loss, _, _) = batch_loss(model, &mut tape, &batch)?;
            total += tape.scalar(loss) * batch.len() as f64;
            tape.backward(loss)?.into_param_grads()
        };
        model.store.accumulate(&grads, 1.0);
        adam.step(&mut model.store);
    }
    Ok(total / order.len().max(1) as f64)
}

fn split_holdout<'c>(
    corpus: &'c Corpus,
    fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<&'c BankedScenario>, Vec<&'c BankedScenario>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for group in [
        corpus.violations().collect::<Vec<_>>(),
        corpus.successes().collect::<Vec<_>>(),
    ] {
        let mut group = group;
        group.shuffle(rng);
        let n_held = (group.len() as f64 * fraction).round() as usize;
        let n_held = n_held.min(group.len().saturating_sub(1));
        held.extend_from_slice(&group[..n_held]);
        train.extend_from_slice(&group[n_held..]);
    }
    (train, held)
}

/// Supervised warm-up of encoder, monitor and adapter, followed by
/// threshold calibration on held-out scenarios.
pub fn train_sl(
    model: &mut RepairModel,
    corpus: &Corpus,
    policy: &DrivingPolicy,
    sim: &SimConfig,
    cfg: &SlConfig,
) -> Result<SlReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = rng::stream(cfg.seed, "sl");
    let (train, held) = split_holdout(corpus, cfg.holdout_fraction, &mut rng);
    let samples = collect_samples(&train, model, policy, sim, &cfg.annotation, cfg.negative_stride)?;
    let (positives, negatives): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].label.y_safe == 1);
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateCorpus(format!(
            "{} positive and {} negative training states",
            positives.len(),
            negatives.len()
        )));
    }

    let mut adam = Adam::new(&model.store, model.supervised_params(), cfg.learning_rate);
    let per_epoch_neg = ((positives.len() as f64 * cfg.negative_ratio).round() as usize).clamp(1, negatives.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order = positives.clone();
        order.extend(index::sample(&mut rng, negatives.len(), per_epoch_neg).into_iter().map(|k| negatives[k]));
        order.shuffle(&mut rng);
        epoch_losses.push(train_epoch(model, &mut adam, &samples, &order, cfg.batch_size)?);
    }
    model.sync_target();

    let calibration = collect_samples(&held, model, policy, sim, &cfg.annotation, usize::MAX)?;
    let scores = positive_scores(model, &calibration)?;
    let lambda_safe = calibrate_lambda(&scores)?;
    model.lambda_safe = lambda_safe;
    Ok(SlReport {
        epoch_losses,
        train_positives: positives.len(),
        train_negatives: negatives.len(),
        calibration_positives: scores.len(),
        lambda_safe,
    })
}

/// Monitor scores on the positive samples.
pub fn positive_scores(model: &RepairModel, samples: &[Sample]) -> Result<Vec<f64>> {
    let positives: Vec<&Sample> = samples.iter().filter(|s| s.label.y_safe == 1).collect();
    monitor_scores(model, &positives)
}

/// Monitor scores of a list of samples, evaluated in batches.
pub fn monitor_scores(model: &RepairModel, samples: &[&Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for batch in samples.chunks(64) {
        let mut tape = Tape::new();
        let (x, lengths) = batch_input(model, &mut tape, batch)?;
        let context = model.encoder().forward(&mut tape, &model.store, x, &lengths)?;
        let a_ads: Vec<f64> = batch.iter().map(|s| s.a_ads).collect();
        let logits = model.monitor_logit(&mut tape, context, &a_ads)?;
        out.extend(tape.value(logits).iter().map(|&z| sigmoid(z)));
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
