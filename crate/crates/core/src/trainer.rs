//! Adam, the minibatch training loop, validation with early stopping, and
//! checkpoint writing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KvMap};
use crate::forecaster::ForecastError;
use crate::model::Model;
use crate::scenario::WindowedSample;
use crate::tensor::{save_checkpoint, ParamStore, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("gradient for `{name}` has {got} entries, parameter has {expected}")]
    GradShape { name: String, expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ForecastError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kv(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            split_seed: 17,
            early_stop_patience: 5,
            val_fraction: 0.1,
            clip_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || self.clip_norm < 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0 and clip_norm >= 0".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            beta1: kv.take_or("beta1", d.beta1)?,
            beta2: kv.take_or("beta2", d.beta2)?,
            eps_opt: kv.take_or("eps_opt", d.eps_opt)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            seed: kv.take_or("train_seed", d.seed)?,
            split_seed: kv.take_or("split_seed", d.split_seed)?,
            early_stop_patience: kv.take_or("early_stop_patience", d.early_stop_patience)?,
            val_fraction: kv.take_or("val_fraction", d.val_fraction)?,
            clip_norm: kv.take_or("clip_norm", d.clip_norm)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("learning_rate", self.learning_rate);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps_opt", self.eps_opt);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("train_seed", self.seed);
        kv.set("split_seed", self.split_seed);
        kv.set("early_stop_patience", self.early_stop_patience);
        kv.set("val_fraction", self.val_fraction);
        kv.set("clip_norm", self.clip_norm);
        kv
    }
}

/// First and second moment estimates per trainable tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every trainable tensor in `grads`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let expected = params.tensor(name)?.len();
        if g.len() != expected {
            return Err(TrainError::GradShape {
                name: name.clone(),
                expected,
                got: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let current = params.tensor(name)?.data();
        let mut next = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let step = cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps_opt);
            next.push((current[i] as f64 - step) as f32);
        }
        params.update(name, &next)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub initial_val_loss: f64,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,seconds")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{:.3}", e.epoch, e.train_loss, e.val_loss, e.seconds)?;
        }
        Ok(())
    }
}

/// Shuffles indices with `seed` and returns (train, validation); the
/// validation part is the trailing `ceil(fraction * n)` entries.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let n_val = ((n as f64) * fraction).ceil() as usize;
    if n < 2 || n_val == 0 || n_val >= n {
        return Err(TrainError::Config(format!(
            "validation split of {fraction} leaves an empty side for {n} samples"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Mean per-sample loss over `indices`, weighted by batch size.
pub fn evaluate_loss<M: Model + ?Sized>(
    model: &M,
    data: &[WindowedSample],
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch: Vec<&WindowedSample> = chunk.iter().map(|&i| &data[i]).collect();
        let mut tape = Tape::new();
        let b = model.params().bind_with(&mut tape, |_, _| false, |_| None);
        let l = model.batch_loss(&mut tape, &b, &batch)?;
        total += tape.value(l).data[0] * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

fn clip(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Path of the resolved-configuration sidecar written next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Writes `params` plus a `<path>.cfg` sidecar holding `config`.
pub fn write_checkpoint(path: &Path, params: &ParamStore, config: &KvMap) -> Result<()> {
    save_checkpoint(params, path)?;
    let side = sidecar_path(path);
    std::fs::write(&side, config.to_text()).map_err(|e| io_err(&side, e))
}

/// Trains `model` in place. On return the model holds the parameters with
/// the lowest validation loss seen (the initialization if no epoch beat it);
/// those parameters are also written to `checkpoint` when given.
pub fn train<M: Model + ?Sized>(
    model: &mut M,
    data: &[WindowedSample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (mut train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.split_seed)?;
    let initial_val = evaluate_loss(model, data, &val_idx, cfg.batch_size)?;
    let mut best_params = model.params().clone();
    let mut best_val = initial_val;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut state = AdamState::default();
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let b = model.params().bind(&mut tape);
            let l = model.batch_loss(&mut tape, &b, &batch)?;
            let loss = tape.value(l).data[0];
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi + 1,
                    loss,
                });
            }
            sum += loss * chunk.len() as f64;
            let g = tape.backward(l)?;
            let mut grads = model.params().collect_grads(&b, &g);
            drop(tape);
            if cfg.clip_norm > 0.0 {
                clip(&mut grads, cfg.clip_norm);
            }
            adam_step(model.params_mut(), &grads, &mut state, cfg)?;
        }
        let val = evaluate_loss(model, data, &val_idx, cfg.batch_size)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: sum / train_idx.len() as f64,
            val_loss: val,
            seconds: started.elapsed().as_secs_f64(),
        });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_params = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    model.params_mut().load_into(best_params)?;
    if let Some(path) = checkpoint {
        let mut kv = model.config_kv();
        kv.set("kind", model.kind());
        kv.merge(&cfg.to_kv());
        write_checkpoint(path, model.params(), &kv)?;
    }
    Ok(TrainLog {
        epochs,
        initial_val_loss: initial_val,
        best_epoch,
        best_val_loss: best_val,
        checkpoint: checkpoint.map(Path::to_path_buf),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_init, Init};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", seeded_init("w", &[3], Init::Uniform(1.0), 1), true).unwrap();
        s.insert("frozen", seeded_init("frozen", &[2], Init::Uniform(1.0), 1), false).unwrap();
        s
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut s = store();
        let before = s.tensor("w").unwrap().data().to_vec();
        let frozen = s.tensor("frozen").unwrap().clone();
        let grads = BTreeMap::from([("w".to_string(), vec![2.0, -0.5, 0.0])]);
        let cfg = TrainConfig::default();
        adam_step(&mut s, &grads, &mut AdamState::default(), &cfg).unwrap();
        let after = s.tensor("w").unwrap().data();
        assert!((after[0] as f64 - (before[0] as f64 - 1e-3)).abs() < 1e-6);
        assert!((after[1] as f64 - (before[1] as f64 + 1e-3)).abs() < 1e-6);
        assert_eq!(after[2], before[2]);
        assert_eq!(s.tensor("frozen").unwrap(), &frozen);
    }

    #[test]
    fn adam_rejects_bad_shapes_and_frozen() {
        let mut s = store();
        let cfg = TrainConfig::default();
        let bad = BTreeMap::from([("w".to_string(), vec![1.0])]);
        assert!(matches!(
            adam_step(&mut s, &bad, &mut AdamState::default(), &cfg),
            Err(TrainError::GradShape { .. })
        ));
        let frozen = BTreeMap::from([("frozen".to_string(), vec![1.0, 1.0])]);
        assert!(adam_step(&mut s, &frozen, &mut AdamState::default(), &cfg).is_err());
    }

    #[test]
    fn split_keeps_both_sides() {
        let (t, v) = split_indices(10, 0.2, 3).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(matches!(split_indices(0, 0.5, 0), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn config_validation_and_round_trip() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut kv = cfg.to_kv();
        assert_eq!(TrainConfig::from_kv(&mut kv).unwrap(), cfg);
        let mut bad = KvMap::parse("batch_size = 0").unwrap();
        assert!(TrainConfig::from_kv(&mut bad).is_err());
        let mut bad = KvMap::parse("val_fraction = 1.0").unwrap();
        assert!(TrainConfig::from_kv(&mut bad).is_err());
    }
}
