use drp_core::backbones::BackboneConfig;
use drp_core::encoding::SessionExample;
use drp_core::numerics::{derive_seed, rng_from_seed};
use drp_core::pipeline_io::{time_split, Split, DEFAULT_FRACTIONS};
use drp_core::reconstruction::orthonormality_error;
use drp_core::synthworld::{generate_world, LabeledExample, WorldConfig};
use drp_core::training::{evaluate_auc, train, Adam, Checkpoint, JointModel, TrainConfig, Variant};
use rand::seq::SliceRandom;

fn world(interactions: usize, seed: u64) -> (WorldConfig, Vec<LabeledExample>) {
    let cfg = WorldConfig {
        users: 100,
        queries: 80,
        items: 1_000,
        interactions,
        seed,
        ..Default::default()
    };
    let data = generate_world(&cfg).unwrap();
    (cfg, data)
}

fn pick<'a>(data: &'a [LabeledExample], idx: &[usize]) -> Vec<&'a SessionExample> {
    idx.iter().map(|&i| &data[i].example).collect()
}

fn splits(data: &[LabeledExample]) -> Split {
    time_split(data, DEFAULT_FRACTIONS).unwrap()
}

#[test]
fn full_variant_trains_one_epoch_on_a_small_log() {
    let (cfg, data) = world(1_000, 1);
    let split = splits(&data);
    let train_cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let out = train(
        cfg.feature_spec(),
        &BackboneConfig::default(),
        &train_cfg,
        &pick(&data, &split.train),
        &pick(&data, &split.validation),
    )
    .unwrap();
    assert_eq!(out.history.len(), 1);
    assert!(out.history[0].train_loss.is_finite());
    assert!((0.0..=1.0).contains(&out.history[0].val_auc));
    let steps = split.train.len().div_ceil(train_cfg.batch_size) as u64;
    assert_eq!(out.history[0].steps, steps);
    assert_eq!(out.model.retractions(), steps);
}

#[test]
fn checkpoint_round_trip_reproduces_validation_auc() {
    let (cfg, data) = world(3_000, 2);
    let split = splits(&data);
    let (tr, va) = (pick(&data, &split.train), pick(&data, &split.validation));
    let train_cfg = TrainConfig {
        epochs: 3,
        batch_size: 64,
        ..Default::default()
    };
    let out = train(
        cfg.feature_spec(),
        &BackboneConfig::default(),
        &train_cfg,
        &tr,
        &va,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let restored = loaded.restore().unwrap();
    let auc = evaluate_auc(&restored, &va, train_cfg.batch_size).unwrap();
    let best = out.checkpoint.val_auc_history[out.best_epoch - 1];
    assert_eq!(auc.to_bits(), best.to_bits());
    let direct = out.model.predict(&va, 64).unwrap();
    assert_eq!(restored.predict(&va, 64).unwrap(), direct);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let (cfg, data) = world(1_000, 3);
    let split = splits(&data);
    let out = train(
        cfg.feature_spec(),
        &BackboneConfig::default(),
        &TrainConfig {
            epochs: 1,
            ..Default::default()
        },
        &pick(&data, &split.train),
        &pick(&data, &split.validation),
    )
    .unwrap();
    let mut bad = out.checkpoint.clone();
    bad.params[0].shape = vec![1, 1];
    assert!(bad.restore().is_err());
    let mut old = out.checkpoint.clone();
    old.version += 1;
    assert!(old.restore().is_err());
    assert!(Checkpoint::from_json("{\"version\":1}").is_err());
}

/// Runs `steps` minibatch updates and returns the model.
fn run_steps(variant: Variant, steps: usize) -> JointModel {
    let (cfg, data) = world(4_000, 4);
    let examples: Vec<&SessionExample> = data.iter().map(|e| &e.example).collect();
    let train_cfg = TrainConfig {
        variant,
        ..Default::default()
    };
    let mut model =
        JointModel::new(cfg.feature_spec(), &BackboneConfig::default(), &train_cfg).unwrap();
    let mut adam = Adam::new(train_cfg.learning_rate);
    let mut rng = rng_from_seed(derive_seed(7, 1));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut done = 0;
    while done < steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(64) {
            if done == steps {
                break;
            }
            let batch: Vec<&SessionExample> = chunk.iter().map(|&i| examples[i]).collect();
            model.train_step(&batch, &mut adam).unwrap();
            done += 1;
        }
    }
    model
}

#[test]
fn orthonormal_rows_survive_a_thousand_steps() {
    let full = run_steps(Variant::Full, 1_000);
    assert_eq!(full.retractions(), 1_000);
    let o = full.edit_encoder().unwrap();
    assert_eq!(o.shape(), &[16, 32]);
    let err = orthonormality_error(o);
    assert!(err < 1e-6, "{err}");

    let free = run_steps(Variant::V1NonOrtho, 1_000);
    assert_eq!(free.retractions(), 0);
    let drift = orthonormality_error(free.edit_encoder().unwrap());
    assert!(drift > 1e-2, "{drift}");
}

#[test]
fn identical_configs_train_identically() {
    let (cfg, data) = world(2_000, 5);
    let split = splits(&data);
    let (tr, va) = (pick(&data, &split.train), pick(&data, &split.validation));
    let train_cfg = TrainConfig {
        epochs: 2,
        seed: 11,
        ..Default::default()
    };
    let run = || {
        train(
            cfg.feature_spec(),
            &BackboneConfig::default(),
            &train_cfg,
            &tr,
            &va,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(
        a.checkpoint.to_json().unwrap(),
        b.checkpoint.to_json().unwrap()
    );
    let other = train(
        cfg.feature_spec(),
        &BackboneConfig::default(),
        &TrainConfig {
            seed: 12,
            ..train_cfg.clone()
        },
        &tr,
        &va,
    )
    .unwrap();
    assert_ne!(a.checkpoint.params, other.checkpoint.params);
}

#[test]
fn empty_splits_are_a_config_error() {
    let (cfg, data) = world(500, 6);
    let tr = pick(&data, &[0, 1, 2]);
    let res = train(
        cfg.feature_spec(),
        &BackboneConfig::default(),
        &TrainConfig::default(),
        &tr,
        &[],
    );
    assert!(matches!(res, Err(drp_core::Error::Config(_))));
}
