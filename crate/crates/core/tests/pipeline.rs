use repairlab::corpus::{build_corpus, Corpus, CorpusSpec, TemplateTable};
use repairlab::encoder::EncoderConfig;
use repairlab::eval::{evaluate, robustness_run, RepairMethod};
use repairlab::nn::ParamId;
use repairlab::policy::DrivingPolicy;
use repairlab::repair::RepairModel;
use repairlab::rng;
use repairlab::sim::{SimConfig, TemplateId};
use repairlab::train::{train_reft, train_sl, ReftConfig, SlConfig};

fn tiny_corpus(seed: u64) -> Corpus {
    let spec = CorpusSpec {
        templates: vec![TemplateId::S3Crossing, TemplateId::S4HighwayExit],
        violations: 3,
        successes: 3,
        seed,
        attempt_cap: 2000,
    };
    build_corpus(&spec, &TemplateTable::default(), &DrivingPolicy::default(), &SimConfig::default()).unwrap()
}

fn tiny_model() -> RepairModel {
    let cfg = EncoderConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ..EncoderConfig::default()
    };
    RepairModel::new(&cfg, &mut rng::stream(2, "init")).unwrap()
}

fn snapshot(model: &RepairModel, ids: &[ParamId]) -> Vec<Vec<u8>> {
    ids.iter()
        .map(|&id| model.store.get(id).data().iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect()
}

#[test]
fn no_plugin_fixes_and_degrades_nothing() {
    let corpus = tiny_corpus(8);
    let (policy, sim) = (DrivingPolicy::default(), SimConfig::default());
    let r = evaluate(&corpus, &RepairMethod::None, "none", &policy, &sim, |_, _| {}).unwrap();
    assert_eq!((r.pct_fix, r.pct_degraded, r.delta_e, r.intensity), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(r.intervened_steps, 0);
}

#[test]
fn threshold_one_makes_the_learned_plugin_inert() {
    let corpus = tiny_corpus(8);
    let (policy, sim) = (DrivingPolicy::default(), SimConfig::default());
    let mut model = tiny_model();
    model.lambda_safe = 1.0;
    let r = evaluate(&corpus, &RepairMethod::Learned(&model), "inert", &policy, &sim, |banked, trace| {
        assert_eq!(banked.outcome, trace.outcome);
    })
    .unwrap();
    assert_eq!((r.pct_fix, r.pct_degraded, r.intervened_steps), (0.0, 0.0, 0));
}

#[test]
fn fine_tuning_moves_only_the_adapter() {
    let corpus = tiny_corpus(9);
    let (policy, sim) = (DrivingPolicy::default(), SimConfig::default());
    let mut model = tiny_model();
    let sl = SlConfig {
        epochs: 1,
        learning_rate: 1e-3,
        holdout_fraction: 0.4,
        seed: 1,
        ..SlConfig::default()
    };
    train_sl(&mut model, &corpus, &policy, &sim, &sl).unwrap();

    let mut frozen = model.encoder().params();
    frozen.extend(model.monitor_head().params());
    let adapter = model.adapter_head().params();
    let before = (snapshot(&model, &frozen), snapshot(&model, &adapter), model.lambda_safe);

    let mut untouched = model.clone();
    let none = ReftConfig {
        episodes: 0,
        ..ReftConfig::default()
    };
    let report = train_reft(&mut untouched, &corpus, &policy, &sim, &none).unwrap();
    assert_eq!(report.updates, 0);
    assert_eq!(untouched.to_bytes(), model.to_bytes());

    let cfg = ReftConfig {
        episodes: 6,
        batch_size: 16,
        updates_per_episode: 3,
        seed: 4,
        ..ReftConfig::default()
    };
    let report = train_reft(&mut model, &corpus, &policy, &sim, &cfg).unwrap();
    assert!(report.updates > 0);
    assert_eq!(snapshot(&model, &frozen), before.0);
    assert_ne!(snapshot(&model, &adapter), before.1);
    assert_eq!(model.lambda_safe, before.2);
}

#[test]
fn reft_is_reproducible() {
    let corpus = tiny_corpus(9);
    let (policy, sim) = (DrivingPolicy::default(), SimConfig::default());
    let cfg = ReftConfig {
        episodes: 4,
        batch_size: 16,
        seed: 5,
        ..ReftConfig::default()
    };
    let run = || {
        let mut m = tiny_model();
        let report = train_reft(&mut m, &corpus, &policy, &sim, &cfg).unwrap();
        (m.to_bytes(), report)
    };
    assert_eq!(run(), run());
}

#[test]
fn robustness_curves_are_cumulative_and_reproducible() {
    let (policy, sim) = (DrivingPolicy::default(), SimConfig::default());
    let table = TemplateTable::default();
    let run = || robustness_run(&[TemplateId::S1LeftTurn, TemplateId::S3Crossing], 25, 6, &table, &policy, &sim, &RepairMethod::None).unwrap();
    let a = run();
    assert_eq!(a, run());
    for c in &a {
        assert_eq!(c.cumulative.len(), 25);
        assert!(c.cumulative.windows(2).all(|w| w[1] >= w[0] && w[1] - w[0] <= 1));
    }
}
