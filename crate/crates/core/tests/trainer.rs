mod common;

use auattn::dataio::DatasetIndex;
use auattn::model::{ModelConfig, ModelParams};
use auattn::trainer::{
    evaluate, load_checkpoint, lr_schedule, predict_index, refresh_batch_norm, save_checkpoint, Checkpoint,
    TrainConfig, Trainer, CHECKPOINT_FILE, LOG_FILE, MAGIC, VERSION,
};
use auattn::Error;
use common::*;

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: 42,
        deterministic: true,
        lr_switch_epoch: 2,
        ..TrainConfig::default()
    }
}

fn data(dir: &std::path::Path) -> (DatasetIndex, DatasetIndex) {
    let index = synthetic_index(dir, 30, 42, 32);
    index.split_tail(6).unwrap()
}

fn bits(params: &ModelParams<f32>) -> Vec<(String, Vec<u32>)> {
    params
        .named()
        .into_iter()
        .map(|(name, t)| (name, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn trained(epochs: usize, train: &DatasetIndex, val: &DatasetIndex) -> Trainer {
    let mut trainer = Trainer::new(small_model(), small_config(epochs), train).unwrap();
    trainer.fit(train, Some(val)).unwrap();
    trainer
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = data(dir.path());
    let trainer = trained(1, &train, &val);
    let checkpoint = trainer.checkpoint();
    let bytes = checkpoint.to_bytes().unwrap();
    assert_eq!(&bytes[..6], MAGIC);
    assert_eq!(bytes[6], VERSION);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, checkpoint);
    assert_eq!(bits(&back.params), bits(trainer.params()));
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let path = dir.path().join("out").join(CHECKPOINT_FILE);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    save_checkpoint(&path, &checkpoint).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), checkpoint);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = data(dir.path());
    let trainer = Trainer::new(small_model(), small_config(1), &train).unwrap();
    let bytes = trainer.checkpoint().to_bytes().unwrap();
    let corrupt = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(Error::CorruptCheckpoint(_)));

    for cut in [0, 3, 6, 7, 11, bytes.len() / 2, bytes.len() - 1] {
        assert!(corrupt(&bytes[..cut]), "truncated at {cut}");
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(corrupt(&bad_magic));
    let mut bad_version = bytes.clone();
    bad_version[6] = VERSION + 1;
    assert!(corrupt(&bad_version));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(corrupt(&trailing));
    assert!(load_checkpoint(&dir.path().join("absent.bin")).is_err());
}

#[test]
fn runs_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = data(dir.path());
    let a = trained(3, &train, &val);
    let b = trained(3, &train, &val);
    assert_eq!(a.log(), b.log());
    assert_eq!(bits(a.params()), bits(b.params()));
    assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = data(dir.path());
    let straight = trained(4, &train, &val);

    let out = dir.path().join("run");
    let first = TrainConfig {
        checkpoint_dir: Some(out.clone()),
        ..small_config(2)
    };
    let mut trainer = Trainer::new(small_model(), first, &train).unwrap();
    trainer.fit(&train, Some(&val)).unwrap();
    drop(trainer);
    let checkpoint = load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(checkpoint.epoch, 2);
    let second = TrainConfig {
        checkpoint_dir: Some(out.clone()),
        ..small_config(4)
    };
    let mut resumed = Trainer::resume(checkpoint, second, &train).unwrap();
    resumed.fit(&train, Some(&val)).unwrap();

    assert_eq!(resumed.log(), straight.log());
    assert_eq!(bits(resumed.params()), bits(straight.params()));
    assert_eq!(resumed.optimizer(), straight.optimizer());
    let csv = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn resume_rejects_a_changed_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = data(dir.path());
    let checkpoint = Trainer::new(small_model(), small_config(1), &train).unwrap().checkpoint();
    let changed = TrainConfig {
        seed: 7,
        ..small_config(3)
    };
    assert!(matches!(Trainer::resume(checkpoint, changed, &train), Err(Error::Config(_))));
}

#[test]
fn log_follows_the_step_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = data(dir.path());
    let trainer = trained(4, &train, &val);
    let lrs: Vec<f64> = trainer.log().iter().map(|r| r.lr).collect();
    assert_eq!(lrs, [0.001, 0.001, 0.0001, 0.0001]);
    for (epoch, row) in trainer.log().iter().enumerate() {
        assert_eq!(row.epoch, epoch);
        assert_eq!(row.lr, lr_schedule(epoch, trainer.config()));
        assert!(row.loss.is_finite() && row.loss > 0.0);
        let f1 = row.macro_f1.expect("validated every epoch");
        assert!((0.0..=1.0).contains(&f1));
    }
}

#[test]
fn evaluation_does_not_depend_on_batch_size() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = data(dir.path());
    let trainer = trained(1, &train, &val);
    let config = trainer.model_config();
    let whole = predict_index(trainer.params(), config, &train, 64).unwrap();
    for bs in [1, 5, 7] {
        let split = predict_index(trainer.params(), config, &train, bs).unwrap();
        let worst = whole
            .data()
            .iter()
            .zip(split.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-6, "batch size {bs}: {worst}");
    }
    let a = evaluate(trainer.params(), config, &val, 0.5, 1).unwrap();
    let b = evaluate(trainer.params(), config, &val, 0.5, 64).unwrap();
    assert_eq!(a.macro_f1, b.macro_f1);
}

#[test]
fn batch_norm_refresh_pools_batch_moments() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = data(dir.path());
    let trainer = trained(1, &train, &val);
    let refreshed = |params: &ModelParams<f32>, bs: usize| {
        let mut params = params.clone();
        refresh_batch_norm(&mut params, trainer.model_config(), &train, bs).unwrap();
        params
    };
    let whole = refreshed(trainer.params(), train.len());
    // The first block sees raw images, so its pooled moments are the
    // population moments whatever the batching.
    for bs in [3, 8, 11] {
        let split = refreshed(trainer.params(), bs);
        for (a, b) in [
            (&whole.blocks[0].running_mean, &split.blocks[0].running_mean),
            (&whole.blocks[0].running_var, &split.blocks[0].running_var),
        ] {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "batch size {bs}: {x} vs {y}");
            }
        }
    }
    assert_eq!(bits(&refreshed(&whole, train.len())), bits(&whole));
    let learned = |p: &ModelParams<f32>| {
        p.named()
            .into_iter()
            .filter(|(name, _)| !name.contains("running"))
            .map(|(name, t)| (name, t.data().to_vec()))
            .collect::<Vec<_>>()
    };
    assert_eq!(learned(&whole), learned(trainer.params()));
}

#[test]
fn mismatched_au_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = data(dir.path());
    let model = ModelConfig {
        num_aus: 5,
        ..small_model()
    };
    assert!(matches!(Trainer::new(model, small_config(1), &train), Err(Error::Config(_))));
}
