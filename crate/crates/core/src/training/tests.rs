use proptest::prelude::*;

use super::*;
use crate::data::{synth_generate, AugmentSpec, SampleStream};
use crate::model::ModelConfig;

fn small_model(seed: u64) -> Model<f32> {
    Model::build(ModelConfig::desk().with_depth(2).with_channels(8, 4), seed).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        tile_size: 16,
        batch_size: 2,
        total_steps: 10,
        ..TrainConfig::desk()
    }
}

fn batch(seed: u64, tile: usize, n: usize) -> Vec<crate::data::TileSample> {
    let images = vec![synth_generate(seed, 64, 64).unwrap()];
    SampleStream::new(images, tile, n, AugmentSpec::identity(), 0.05, seed)
        .unwrap()
        .next_batch(n)
        .unwrap()
}

#[test]
fn schedule_matches_published_values() {
    let c = TrainConfig::full();
    assert_eq!(lr_at(0, &c).unwrap(), 0.1);
    assert_eq!(lr_at(4999, &c).unwrap(), 0.1);
    assert_eq!(lr_at(5000, &c).unwrap(), 0.1 / 10.0);
    assert_eq!(lr_at(7499, &c).unwrap(), 0.01);
    assert_eq!(lr_at(7500, &c).unwrap(), 0.1 / 100.0);
    assert_eq!(lr_at(9999, &c).unwrap(), 0.001);
    assert!(lr_at(10_000, &c).is_err());
}

proptest! {
    #[test]
    fn schedule_has_exactly_two_drops(total in 4u64..5000) {
        let c = TrainConfig { total_steps: total, ..TrainConfig::full() };
        let lrs: Vec<f64> = (0..total).map(|s| lr_at(s, &c).unwrap()).collect();
        let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
        prop_assert_eq!(drops, 2);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lrs[(total / 2) as usize], 0.01);
    }
}

#[test]
fn configs_are_validated() {
    assert!(TrainConfig::full().validate().is_ok());
    for bad in [
        TrainConfig {
            total_steps: 0,
            ..TrainConfig::desk()
        },
        TrainConfig {
            momentum: 1.0,
            ..TrainConfig::desk()
        },
        TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::desk()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    let p = TrainConfig::full();
    assert_eq!(
        (p.tile_size, p.batch_size, p.total_steps, p.momentum),
        (640, 11, 10_000, 0.9)
    );
    assert!(p.describe().contains("tile_size=640 ") && p.describe().contains("momentum=0.9"));
}

fn unit_grads(model: &Model<f32>, v: f32) -> Vec<Tensor<f32>> {
    model.params().iter().map(|p| Tensor::full(p.shape(), v)).collect()
}

#[test]
fn zero_momentum_is_plain_gradient_descent() {
    let mut model = small_model(0);
    let before = model.clone();
    let mut state = OptimizerState::zeros_like(&model);
    let g = unit_grads(&model, 0.5);
    sgd_momentum_step(&mut model, &g, &mut state, 0.1, 0.0).unwrap();
    for (a, b) in model.params().iter().zip(before.params()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, y + (0.0 - 0.1f32 * 0.5));
        }
    }
}

#[test]
fn constant_gradient_unrolls_the_recurrence() {
    let mut model = small_model(0);
    let p0 = model.params()[0].data()[0];
    let mut state = OptimizerState::zeros_like(&model);
    let g = unit_grads(&model, 1.0);
    sgd_momentum_step(&mut model, &g, &mut state, 0.01, 0.9).unwrap();
    let p1 = model.params()[0].data()[0];
    sgd_momentum_step(&mut model, &g, &mut state, 0.01, 0.9).unwrap();
    let p2 = model.params()[0].data()[0];
    assert!(((p1 - p0) - (-0.01)).abs() < 1e-7);
    assert!(((p2 - p1) - (-0.019)).abs() < 1e-7);
}

#[test]
fn coasting_drift_is_a_geometric_series() {
    let mut model = small_model(0);
    let mut state = OptimizerState::zeros_like(&model);
    let v0 = 0.25f32;
    state.velocities.iter_mut().for_each(|v| v.data_mut().fill(v0));
    let start = model.params()[0].data()[0] as f64;
    let zero = unit_grads(&model, 0.0);
    for _ in 0..400 {
        sgd_momentum_step(&mut model, &zero, &mut state, 0.1, 0.9).unwrap();
    }
    // the first update already applies mu * v0
    let drift = model.params()[0].data()[0] as f64 - start;
    let limit = 0.9 * v0 as f64 / (1.0 - 0.9);
    assert!((drift - limit).abs() < 1e-4, "{drift} vs {limit}");
}

#[test]
fn zero_learning_rate_moves_only_with_velocity() {
    let mut model = small_model(0);
    let before = model.clone();
    let mut state = OptimizerState::zeros_like(&model);
    sgd_momentum_step(&mut model, &unit_grads(&before, 3.0), &mut state, 0.0, 0.9).unwrap();
    assert_eq!(model, before);
    state.velocities[0].data_mut()[0] = 1.0;
    sgd_momentum_step(&mut model, &unit_grads(&before, 3.0), &mut state, 0.0, 0.9).unwrap();
    assert_ne!(model, before);
}

#[test]
fn nan_gradient_names_parameter_and_changes_nothing() {
    let mut model = small_model(0);
    let before = model.clone();
    let mut state = OptimizerState::zeros_like(&model);
    let mut g = unit_grads(&model, 1.0);
    g[5].data_mut()[2] = f32::NAN;
    let err = sgd_momentum_step(&mut model, &g, &mut state, 0.1, 0.9).unwrap_err();
    assert!(err.to_string().contains(&model.specs()[5].name), "{err}");
    assert_eq!(model, before);
    assert_eq!(state, OptimizerState::zeros_like(&model));
}

#[test]
fn duplicated_tiles_give_the_single_tile_loss() {
    let model = small_model(1);
    let one = batch(3, 16, 1);
    let two = vec![one[0].clone(), one[0].clone()];
    let (a, _) = collate(&one, 16).unwrap();
    let (b, tb) = collate(&two, 16).unwrap();
    let (la, _) = loss_and_grads(&model, &a, &one[0].target).unwrap();
    let (lb, _) = loss_and_grads(&model, &b, &tb).unwrap();
    assert!((la - lb).abs() <= 1e-6 * la.abs(), "{la} vs {lb}");
}

#[test]
fn small_steps_do_not_increase_loss() {
    for seed in 0..10 {
        let mut model = small_model(seed);
        let samples = batch(seed, 16, 2);
        let config = TrainConfig {
            base_lr: 1e-3,
            momentum: 0.0,
            ..small_config()
        };
        let mut state = OptimizerState::zeros_like(&model);
        let l0 = train_step(&mut model, &samples, &mut state, 0, &config).unwrap();
        let l1 = train_step(&mut model, &samples, &mut state, 1, &config).unwrap();
        let (images, targets) = collate(&samples, 16).unwrap();
        let (l2, _) = loss_and_grads(&model, &images, &targets).unwrap();
        assert!(l1 <= l0 && l2 <= l1, "seed {seed}: {l0} {l1} {l2}");
    }
}

#[test]
fn training_is_bitwise_repeatable() {
    let run = || {
        let mut model = small_model(4);
        let mut state = OptimizerState::zeros_like(&model);
        let mut losses = Vec::new();
        for step in 0..3 {
            let b = batch(step, 16, 2);
            losses.push(
                train_step(&mut model, &b, &mut state, step, &small_config())
                    .unwrap()
                    .to_bits(),
            );
        }
        (losses, model)
    };
    assert_eq!(run(), run());
}

#[test]
fn malformed_batches_are_rejected() {
    let mut model = small_model(0);
    let mut state = OptimizerState::zeros_like(&model);
    let config = small_config();
    assert!(train_step(&mut model, &[], &mut state, 0, &config).is_err());
    let wrong = batch(0, 32, 1);
    assert!(train_step(&mut model, &wrong, &mut state, 0, &config).is_err());
    let mut short = batch(0, 16, 1);
    short[0].target.pop();
    assert!(train_step(&mut model, &short, &mut state, 0, &config).is_err());
    let odd = TrainConfig {
        tile_size: 18,
        ..config
    };
    assert!(train_step(&mut model, &batch(0, 18, 1), &mut state, 0, &odd).is_err());
}

fn sample_checkpoint() -> Checkpoint {
    let model = small_model(2);
    let mut optimizer = OptimizerState::zeros_like(&model);
    optimizer.velocities[3].data_mut()[1] = -0.125;
    Checkpoint {
        model,
        optimizer,
        train: small_config(),
        step: 7,
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let ckpt = sample_checkpoint();
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"DUNW");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dunw");
    save_checkpoint(&path, &ckpt.model, &ckpt.optimizer, &ckpt.train, ckpt.step).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic)
        .unwrap_err()
        .to_string()
        .contains("magic"));
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(Checkpoint::from_bytes(&bad_version)
        .unwrap_err()
        .to_string()
        .contains("version 9"));
    let cut = Checkpoint::from_bytes(&bytes[..bytes.len() - 3])
        .unwrap_err()
        .to_string();
    assert!(cut.contains("truncated"), "{cut}");
    assert!(Checkpoint::from_bytes(&bytes[..6])
        .unwrap_err()
        .to_string()
        .contains("truncated"));
}

#[test]
fn record_names_must_match_the_model() {
    let ckpt = sample_checkpoint();
    let (meta, mut records) = read_records(&ckpt.to_bytes().unwrap()).unwrap();
    records.pop();
    let err = Checkpoint::from_bytes(&write_records(&meta, &records).unwrap()).unwrap_err();
    assert!(err.to_string().contains("name-set mismatch"), "{err}");

    let deeper = ModelConfig::desk().with_depth(3).with_channels(8, 4);
    let err = ckpt.check_config(&deeper).unwrap_err().to_string();
    assert!(err.contains("name-set mismatch") && err.contains("down.2"), "{err}");
    let no_plus = ckpt.model.config().clone().with_plus(false);
    assert!(ckpt.check_config(&no_plus).is_err());
    assert!(ckpt.check_config(ckpt.model.config()).is_ok());
}

#[test]
fn record_files_carry_any_named_tensors() {
    let records = vec![
        Record {
            name: "probs/sea".into(),
            dims: vec![2, 3],
            data: vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0],
        },
        Record {
            name: "scalar".into(),
            dims: vec![],
            data: vec![4.0],
        },
    ];
    let bytes = write_records("{\"kind\":\"test\"}", &records).unwrap();
    let (meta, back) = read_records(&bytes).unwrap();
    assert_eq!(meta, "{\"kind\":\"test\"}");
    assert_eq!(back, records);
    let bad = Record {
        name: "x".into(),
        dims: vec![2],
        data: vec![1.0],
    };
    assert!(write_records("", &[bad]).is_err());
}
