mod common;

use beamcast::baselines::{Lstm, LstmConfig};
use beamcast::eval::load_model;
use beamcast::forecaster::{Forecaster, ModelConfig};
use beamcast::model::Model;
use beamcast::scenario::WindowedSample;
use beamcast::tensor::CounterRng;
use beamcast::trainer::{sidecar_path, train, TrainConfig, TrainError};

/// Beam ramps `a + s t` over Q=64 with a matching AoD row; the target
/// continues the ramp, so the task is learnable from the window alone.
fn ramps(n: usize, u: usize, h: usize, seed: u64) -> Vec<WindowedSample> {
    let r = CounterRng::new(seed, "ramps");
    (0..n)
        .map(|i| {
            let a = 10.0 + 30.0 * r.uniform(2 * i as u64);
            let s = -0.4 + 0.8 * r.uniform(2 * i as u64 + 1);
            let beam = |t: f64| ((a + s * t).round() / 64.0) as f32;
            let mut x: Vec<f32> = (0..u).map(|t| beam(t as f64)).collect();
            x.extend((0..u).map(|t| (0.5 + 0.004 * s * t as f64) as f32));
            let y = (0..h).map(|k| beam((u + k) as f64)).collect();
            WindowedSample {
                c: 2,
                u,
                x,
                y,
                q_count: 64,
            }
        })
        .collect()
}

fn lstm(seed: u64) -> Lstm {
    Lstm::new(LstmConfig {
        hidden_size: 12,
        layers: 1,
        u_len: 10,
        h_len: 3,
        seed,
    })
    .unwrap()
}

fn small_forecaster() -> Forecaster {
    Forecaster::new(ModelConfig {
        u_len: 10,
        h_len: 3,
        patch_len: 4,
        stride: 2,
        d_model: 8,
        n_heads: 2,
        backbone_dim: 16,
        backbone_layers: 1,
        backbone_heads: 2,
        n_prototypes: 8,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = ramps(20, 10, 3, 1);
    let mut m = lstm(3);
    let init = m.params().clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let log = train(&mut m, &data, &cfg, None).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(log.best_epoch, 0);
    assert_eq!(log.best_val_loss, log.initial_val_loss);
    for (name, e) in init.iter() {
        assert_eq!(m.params().tensor(name).unwrap(), &e.tensor, "{name}");
    }
}

#[test]
fn learnable_task_lowers_validation_loss() {
    let data = ramps(120, 10, 3, 2);
    let mut m = lstm(4);
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 8,
        learning_rate: 1e-2,
        early_stop_patience: 25,
        ..TrainConfig::default()
    };
    let log = train(&mut m, &data, &cfg, None).unwrap();
    assert!(log.best_epoch > 0);
    assert!(
        log.best_val_loss < 0.5 * log.initial_val_loss,
        "{} -> {}",
        log.initial_val_loss,
        log.best_val_loss
    );
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let data = ramps(40, 10, 3, 5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut paths = Vec::new();
    for run in 0..2 {
        let mut m = small_forecaster();
        let p = dir.path().join(format!("run{run}.ckpt"));
        train(&mut m, &data, &cfg, Some(&p)).unwrap();
        paths.push(p);
    }
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
    assert_eq!(
        std::fs::read(sidecar_path(&paths[0])).unwrap(),
        std::fs::read(sidecar_path(&paths[1])).unwrap()
    );

    let mut other = small_forecaster();
    let p = dir.path().join("other.ckpt");
    train(&mut other, &data, &TrainConfig { seed: 1, ..cfg }, Some(&p)).unwrap();
    assert_ne!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&p).unwrap());
}

#[test]
fn checkpoint_reloads_to_the_same_predictions() {
    let data = ramps(30, 10, 3, 6);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.ckpt");
    let mut m = small_forecaster();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    train(&mut m, &data, &cfg, Some(&p)).unwrap();
    let loaded = load_model(&p).unwrap();
    assert_eq!(loaded.kind(), "forecaster");
    let windows: Vec<(&[f32], usize)> = data.iter().map(|s| (s.x.as_slice(), 64)).collect();
    assert_eq!(m.predict_batch(&windows).unwrap(), loaded.predict_batch(&windows).unwrap());
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let mut data = ramps(20, 10, 3, 7);
    for s in &mut data {
        s.y[0] = f32::NAN;
    }
    let mut m = lstm(8);
    let cfg = TrainConfig {
        batch_size: 64,
        ..TrainConfig::default()
    };
    let err = train(&mut m, &data, &cfg, None).unwrap_err();
    assert!(
        matches!(err, TrainError::NonFinite { epoch: 1, batch: 1, .. }),
        "{err}"
    );
    assert!(err.to_string().contains("epoch 1, batch 1"));
}

#[test]
fn ten_steps_leave_frozen_assets_untouched() {
    // 44 samples -> 5 validation, 39 training -> 10 batches of 4.
    let data = ramps(44, 10, 3, 9);
    let mut m = small_forecaster();
    let before = m.frozen_checksums();
    let trained_before = m.params().checksum(|_, e| e.trainable);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    train(&mut m, &data, &cfg, None).unwrap();
    assert_eq!(m.frozen_checksums(), before);
    assert_ne!(m.params().checksum(|_, e| e.trainable), trained_before);
}

#[test]
fn bad_config_is_rejected() {
    let data = ramps(10, 10, 3, 1);
    let mut m = lstm(1);
    for cfg in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { val_fraction: 1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(train(&mut m, &data, &cfg, None), Err(TrainError::Config(_))), "{cfg:?}");
    }
    assert!(matches!(
        train(&mut m, &[], &TrainConfig::default(), None),
        Err(TrainError::EmptyDataset)
    ));
}
