mod common;

use repairlab::encoder::EncoderConfig;
use repairlab::nn::{Adam, Tape};
use repairlab::repair::RepairModel;
use repairlab::rng;
use repairlab::train::{batch_loss, train_epoch, WeakLabel};

fn tiny() -> (EncoderConfig, RepairModel) {
    let cfg = EncoderConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ..EncoderConfig::default()
    };
    let model = RepairModel::new(&cfg, &mut rng::stream(7, "init")).unwrap();
    (cfg, model)
}

#[test]
fn single_sample_is_memorized() {
    let (cfg, mut model) = tiny();
    let mut samples = common::random_samples(&cfg, 1, &mut rng::stream(8, "data"));
    samples[0].label = WeakLabel::from_safety(true);
    let mut adam = Adam::new(&model.store, model.supervised_params(), 1e-3);
    let first = train_epoch(&mut model, &mut adam, &samples, &[0], 1).unwrap();
    for _ in 1..500 {
        train_epoch(&mut model, &mut adam, &samples, &[0], 1).unwrap();
    }
    let mut tape = Tape::new();
    let (_, bce, ce) = batch_loss(&model, &mut tape, &[&samples[0]]).unwrap();
    assert!(bce < 0.05 && ce < 0.05, "bce {bce} ce {ce}");
    assert!(bce + ce < first);
}

#[test]
fn loss_falls_over_epochs() {
    let (cfg, mut model) = tiny();
    let samples = common::random_samples(&cfg, 32, &mut rng::stream(9, "data"));
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut adam = Adam::new(&model.store, model.supervised_params(), 1e-3);
    let first = train_epoch(&mut model, &mut adam, &samples, &order, 8).unwrap();
    let mut last = first;
    for _ in 0..30 {
        last = train_epoch(&mut model, &mut adam, &samples, &order, 8).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
}
