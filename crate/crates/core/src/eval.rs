//! Normalized-gain evaluation, closed-loop tracking and the experiment suites.

mod suite;

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{linear_extrapolate, persistence_predict};
use crate::channel::{channel_vector, gain_scan, optimal_beam_near, ratio_to_best, ChannelError};
use crate::config::{ConfigError, KvMap};
use crate::forecaster::{ForecastError, Forecaster, ModelConfig};
use crate::baselines::{Lstm, LstmConfig};
use crate::model::Model;
use crate::scenario::{window_input, ScenarioError, TraceRecord, Trajectory};
use crate::tensor::{load_checkpoint, TensorError};
use crate::trainer::{sidecar_path, TrainConfig, TrainError};

pub use suite::{run_suite, suite_grid, Suite, SuiteManifest, SuiteOutput};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation config: {0}")]
    Config(String),
    #[error("trajectory {index}: {snapshots} snapshots for {trace} trace records")]
    MissingSnapshot {
        index: usize,
        snapshots: usize,
        trace: usize,
    },
    #[error("checkpoint `{0}` does not exist")]
    MissingCheckpoint(String),
    #[error("predictor `{name}` returned index {index} for a {q_count}-beam codebook")]
    BadIndex { name: String, index: usize, q_count: usize },
    #[error(transparent)]
    Model(#[from] ForecastError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
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

pub type Result<T> = std::result::Result<T, EvalError>;

pub(crate) fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One prediction request: a raw 2×U window plus the true future beams,
/// which only the oracle reference predictor looks at.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub x: &'a [f32],
    pub q_count: usize,
    pub truth: &'a [usize],
}

pub trait Predictor: Sync {
    fn name(&self) -> &str;
    /// Observed slots per window.
    fn window(&self) -> usize;
    fn predict(&self, windows: &[Window<'_>], h: usize) -> Result<Vec<Vec<usize>>>;
}

pub struct Persistence {
    pub u: usize,
}

impl Predictor for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn window(&self) -> usize {
        self.u
    }

    fn predict(&self, windows: &[Window<'_>], h: usize) -> Result<Vec<Vec<usize>>> {
        Ok(windows
            .iter()
            .map(|w| persistence_predict(w.x, self.u, h, w.q_count))
            .collect())
    }
}

pub struct LinearExtrapolation {
    pub u: usize,
}

impl Predictor for LinearExtrapolation {
    fn name(&self) -> &str {
        "linear"
    }

    fn window(&self) -> usize {
        self.u
    }

    fn predict(&self, windows: &[Window<'_>], h: usize) -> Result<Vec<Vec<usize>>> {
        windows
            .iter()
            .map(|w| Ok(linear_extrapolate(w.x, self.u, h, w.q_count)?))
            .collect()
    }
}

/// Emits the true optimal beams; the reference ceiling.
pub struct Oracle {
    pub u: usize,
}

impl Predictor for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn window(&self) -> usize {
        self.u
    }

    fn predict(&self, windows: &[Window<'_>], h: usize) -> Result<Vec<Vec<usize>>> {
        Ok(windows.iter().map(|w| w.truth[..h].to_vec()).collect())
    }
}

/// A trained network under a display name.
pub struct ModelPredictor {
    pub name: String,
    pub model: Box<dyn Model>,
}

impl ModelPredictor {
    pub fn new(name: impl Into<String>, model: Box<dyn Model>) -> Self {
        Self {
            name: name.into(),
            model,
        }
    }
}

impl Predictor for ModelPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn window(&self) -> usize {
        self.model.window()
    }

    fn predict(&self, windows: &[Window<'_>], h: usize) -> Result<Vec<Vec<usize>>> {
        if h != self.model.horizon() {
            return Err(EvalError::Config(format!(
                "{} predicts {} steps, evaluation asks for {h}",
                self.name,
                self.model.horizon()
            )));
        }
        let inputs: Vec<(&[f32], usize)> = windows.iter().map(|w| (w.x, w.q_count)).collect();
        Ok(self.model.predict_batch(&inputs)?)
    }
}

/// Loads a checkpoint together with its `.cfg` sidecar.
pub fn load_model(path: &Path) -> Result<Box<dyn Model>> {
    if !path.exists() {
        return Err(EvalError::MissingCheckpoint(path.display().to_string()));
    }
    let side = sidecar_path(path);
    let mut kv = KvMap::load(&side)?;
    let kind = kv.take_str("kind").unwrap_or_else(|| "forecaster".into());
    let mut model: Box<dyn Model> = match kind.as_str() {
        "forecaster" => Box::new(Forecaster::new(ModelConfig::from_kv(&mut kv)?)?),
        "lstm" => Box::new(Lstm::new(LstmConfig::from_kv(&mut kv)?)?),
        other => {
            return Err(EvalError::Config(format!(
                "{}: unknown model kind `{other}`",
                side.display()
            )))
        }
    };
    TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    model.params_mut().load_into(load_checkpoint(path)?)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub predictor: String,
    pub scenario: String,
    /// Mean normalized gain at each horizon step.
    pub per_step: Vec<f64>,
    pub overall: f64,
    /// Number of predicted windows.
    pub n: usize,
    pub config_hash: String,
}

impl EvalReport {
    fn from_sums(predictor: &str, sums: &[f64], counts: &[usize], n: usize) -> Result<Self> {
        if n == 0 || counts.iter().any(|&c| c == 0) {
            return Err(EvalError::Config(format!(
                "no admissible windows to evaluate `{predictor}`"
            )));
        }
        let per_step: Vec<f64> = sums.iter().zip(counts).map(|(s, &c)| s / c as f64).collect();
        let overall = per_step.iter().sum::<f64>() / per_step.len() as f64;
        Ok(Self {
            predictor: predictor.to_string(),
            scenario: String::new(),
            per_step,
            overall,
            n,
            config_hash: String::new(),
        })
    }

    pub fn labeled(mut self, scenario: &str, config_hash: &str) -> Self {
        self.scenario = scenario.to_string();
        self.config_hash = config_hash.to_string();
        self
    }
}

/// Sample-weighted combination of reports of one predictor.
pub fn merge_reports(reports: &[&EvalReport], scenario: &str) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| EvalError::Config("nothing to merge".into()))?;
    let h = first.per_step.len();
    let mut sums = vec![0.0; h];
    let mut n = 0;
    for r in reports {
        for (s, g) in sums.iter_mut().zip(&r.per_step) {
            *s += g * r.n as f64;
        }
        n += r.n;
    }
    Ok(EvalReport::from_sums(&first.predictor, &sums, &vec![n; h], n)?
        .labeled(scenario, &first.config_hash))
}

fn check_snapshots(i: usize, t: &Trajectory) -> Result<()> {
    if t.snapshots.len() != t.trace.len() {
        return Err(EvalError::MissingSnapshot {
            index: i,
            snapshots: t.snapshots.len(),
            trace: t.trace.len(),
        });
    }
    Ok(())
}

/// Gain of every beam at every slot of a trajectory.
fn gain_table(t: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let cb = t.codebook()?;
    t.snapshots
        .iter()
        .map(|s| Ok(gain_scan(&channel_vector(s, cb.num_antennas)?, &cb)?))
        .collect()
}

fn gain_of(name: &str, gains: &[f64], q: usize) -> Result<f64> {
    if q >= gains.len() {
        return Err(EvalError::BadIndex {
            name: name.to_string(),
            index: q,
            q_count: gains.len(),
        });
    }
    Ok(ratio_to_best(gains, q))
}

fn window_starts(len: usize, u: usize, h: usize, stride: usize) -> std::iter::StepBy<std::ops::Range<usize>> {
    let end = if len >= u + h { len - u - h + 1 } else { 0 };
    (0..end).step_by(stride)
}

/// Per-step mean normalized gain of `predictor` over every window (at
/// `stride`) of every trajectory.
pub fn evaluate(
    predictor: &dyn Predictor,
    trajectories: &[Trajectory],
    h: usize,
    stride: usize,
) -> Result<EvalReport> {
    if h == 0 || stride == 0 {
        return Err(EvalError::Config("horizon and stride must be at least 1".into()));
    }
    let u = predictor.window();
    let per_traj: Vec<(Vec<f64>, usize)> = trajectories
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            check_snapshots(i, t)?;
            let q = t.config.num_beams;
            let starts: Vec<usize> = window_starts(t.trace.len(), u, h, stride).collect();
            if starts.is_empty() {
                return Ok((vec![0.0; h], 0));
            }
            let table = gain_table(t)?;
            let xs = starts
                .iter()
                .map(|&s| Ok(window_input(&t.trace[s..s + u], q)?))
                .collect::<Result<Vec<_>>>()?;
            let truths: Vec<Vec<usize>> = starts
                .iter()
                .map(|&s| t.trace[s + u..s + u + h].iter().map(|r| r.opt_beam).collect())
                .collect();
            let windows: Vec<Window> = xs
                .iter()
                .zip(&truths)
                .map(|(x, tr)| Window {
                    x,
                    q_count: q,
                    truth: tr,
                })
                .collect();
            let preds = predictor.predict(&windows, h)?;
            let mut sums = vec![0.0; h];
            for (&s, p) in starts.iter().zip(&preds) {
                for n in 0..h {
                    sums[n] += gain_of(predictor.name(), &table[s + u + n], p[n])?;
                }
            }
            Ok((sums, starts.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![0.0; h];
    let mut n = 0;
    for (s, c) in &per_traj {
        for (a, b) in sums.iter_mut().zip(s) {
            *a += b;
        }
        n += c;
    }
    EvalReport::from_sums(predictor.name(), &sums, &vec![n; h], n)
}

/// Closed-loop tracking: warm-start with U oracle slots, then repeatedly
/// predict H slots and re-acquire the measured optimum every
/// `refresh_every` slots by scanning only beams within `half_width` of the
/// prediction; measured beams (with the known AoD) become the next inputs.
pub fn closed_loop_track(
    predictor: &dyn Predictor,
    traj: &Trajectory,
    h: usize,
    refresh_every: usize,
    half_width: usize,
) -> Result<EvalReport> {
    if refresh_every < 1 || h == 0 {
        return Err(EvalError::Config("refresh_every and horizon must be at least 1".into()));
    }
    check_snapshots(0, traj)?;
    let u = predictor.window();
    let total = traj.trace.len();
    if total < u + refresh_every {
        return Err(EvalError::Config(format!(
            "trajectory of {total} slots is shorter than U + refresh_every = {}",
            u + refresh_every
        )));
    }
    let cb = traj.codebook()?;
    let q = cb.num_beams;
    let table = gain_table(traj)?;
    let mut history: Vec<TraceRecord> = traj.trace[..u].to_vec();
    let mut sums = vec![0.0; h];
    let mut counts = vec![0usize; h];
    let mut n = 0;
    let mut t = u;
    while t < total {
        let x = window_input(&history[history.len() - u..], q)?;
        let truth: Vec<usize> = (0..h)
            .map(|k| traj.trace[(t + k).min(total - 1)].opt_beam)
            .collect();
        let pred = predictor
            .predict(
                &[Window {
                    x: &x,
                    q_count: q,
                    truth: &truth,
                }],
                h,
            )?
            .pop()
            .unwrap_or_default();
        if pred.len() != h {
            return Err(EvalError::Config(format!(
                "{} returned {} steps instead of {h}",
                predictor.name(),
                pred.len()
            )));
        }
        for k in 0..h.min(total - t) {
            sums[k] += gain_of(predictor.name(), &table[t + k], pred[k])?;
            counts[k] += 1;
        }
        n += 1;
        for k in 0..refresh_every.min(total - t) {
            let slot = t + k;
            let center = pred[k.min(h - 1)];
            let hv = channel_vector(&traj.snapshots[slot], cb.num_antennas)?;
            let measured = optimal_beam_near(&hv, &cb, center, half_width)?;
            history.push(TraceRecord {
                slot,
                opt_beam: measured,
                aod_rad: traj.trace[slot].aod_rad,
            });
        }
        t += refresh_every;
    }
    EvalReport::from_sums(predictor.name(), &sums, &counts, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::normalized_gain;
    use crate::scenario::TrajectoryConfig;

    fn traj(speed: f64, slots: usize) -> Trajectory {
        Trajectory::simulate(TrajectoryConfig {
            num_slots: slots,
            ut_speed_mps: speed,
            ut_start_m: [8.0, 12.0],
            ut_heading_rad: 0.0,
            ..TrajectoryConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_scores_one_everywhere() {
        let ts = vec![traj(20.0, 70), traj(5.0, 60)];
        let r = evaluate(&Oracle { u: 40 }, &ts, 10, 1).unwrap();
        assert!(r.per_step.iter().all(|&g| g == 1.0));
        assert_eq!(r.n, 21 + 11);
    }

    #[test]
    fn persistence_on_stationary_ut_is_perfect() {
        let ts = vec![traj(0.0, 60)];
        let r = evaluate(&Persistence { u: 40 }, &ts, 10, 3).unwrap();
        assert!(r.per_step.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn persistence_matches_direct_recomputation() {
        let ts: Vec<Trajectory> = (0..5).map(|i| traj(15.0 + 5.0 * i as f64, 56)).collect();
        let r = evaluate(&Persistence { u: 40 }, &ts, 10, 2).unwrap();
        let mut direct = vec![0.0; 10];
        let mut n = 0;
        for t in &ts {
            let cb = t.codebook().unwrap();
            let mut s = 0;
            while s + 50 <= t.trace.len() {
                let last = t.trace[s + 39].opt_beam;
                for k in 0..10 {
                    let hv = channel_vector(&t.snapshots[s + 40 + k], 64).unwrap();
                    direct[k] += normalized_gain(&hv, last, &cb).unwrap();
                }
                n += 1;
                s += 2;
            }
        }
        assert_eq!(r.n, n);
        for (a, b) in r.per_step.iter().zip(&direct) {
            assert!((a - b / n as f64).abs() < 1e-9);
        }
        assert!(r.per_step[9] < 1.0);
    }

    #[test]
    fn missing_snapshots_are_reported() {
        let mut t = traj(10.0, 55);
        t.snapshots.pop();
        assert!(matches!(
            evaluate(&Persistence { u: 40 }, &[t], 10, 1),
            Err(EvalError::MissingSnapshot { .. })
        ));
    }

    #[test]
    fn closed_loop_examples() {
        let t = traj(20.0, 70);
        let r = closed_loop_track(&Oracle { u: 40 }, &t, 10, 1, 64).unwrap();
        assert!(r.per_step.iter().all(|&g| g == 1.0));
        assert_eq!(r.n, 30);
        let r = closed_loop_track(&Persistence { u: 40 }, &t, 10, 5, 0).unwrap();
        assert!(r.per_step.iter().all(|g| (0.0..=1.0).contains(g)));
        assert!(closed_loop_track(&Oracle { u: 40 }, &t, 10, 0, 3).is_err());
        assert!(closed_loop_track(&Oracle { u: 40 }, &traj(5.0, 42), 10, 5, 3).is_err());
    }

    #[test]
    fn merged_reports_weight_by_count() {
        let a = EvalReport::from_sums("p", &[2.0], &[4], 4).unwrap();
        let b = EvalReport::from_sums("p", &[0.0], &[1], 1).unwrap();
        let m = merge_reports(&[&a, &b], "all").unwrap();
        assert!((m.per_step[0] - 0.4).abs() < 1e-12);
        assert_eq!(m.n, 5);
    }
}
