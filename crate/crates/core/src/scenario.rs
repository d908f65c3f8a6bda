//! UT trajectories, per-slot beam traces and windowed training samples.
//!
//! The kinematic generator stands in for ray-traced scenes: a UT moves in a
//! straight line at constant speed, the LOS angle follows from the BS/UT
//! geometry, and a few weaker NLOS paths with seeded angles and drifting
//! phases perturb the channel.

mod dataset;
mod family;

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelError, ChannelSnapshot, Codebook, PathComponent};

pub use dataset::{build_dataset, read_dataset, write_dataset, Dataset};
pub use family::{Geometry, ScenarioSpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid trajectory config: {0}")]
    Config(String),
    #[error("slot {slot}: UT at AoD {aod} rad leaves the (-pi/2, pi/2) sector")]
    OutOfSector { slot: usize, aod: f64 },
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("beam index {index} at slot {slot} is not below q_count {q_count}")]
    QCount {
        slot: usize,
        index: usize,
        q_count: usize,
    },
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },
    #[error("{path}: line {line}: slot {found} breaks the 0,1,2,... sequence (expected {expected})")]
    Monotonicity {
        path: String,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: line {line}: {msg}")]
    Range {
        path: String,
        line: u64,
        msg: String,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

/// Observation window length, forecast horizon and variable count used throughout.
pub const DEFAULT_U: usize = 40;
pub const DEFAULT_H: usize = 10;
pub const NUM_VARS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub num_slots: usize,
    pub slot_period_s: f64,
    pub ut_speed_mps: f64,
    pub bs_position_m: [f64; 2],
    pub ut_start_m: [f64; 2],
    pub ut_heading_rad: f64,
    pub carrier_freq_ghz: f64,
    pub num_antennas: usize,
    pub num_beams: usize,
    pub num_nlos_paths: usize,
    pub nlos_relative_loss_db: f64,
    pub aod_jitter_std_rad: f64,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            num_slots: 80,
            slot_period_s: 0.016,
            ut_speed_mps: 10.0,
            bs_position_m: [0.0, 0.0],
            ut_start_m: [10.0, 25.0],
            ut_heading_rad: 0.0,
            carrier_freq_ghz: 28.0,
            num_antennas: 64,
            num_beams: 64,
            num_nlos_paths: 2,
            nlos_relative_loss_db: 10.0,
            aod_jitter_std_rad: 0.002,
            seed: 0,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        if !(self.slot_period_s > 0.0) {
            return bad(format!("slot_period_s must be > 0, got {}", self.slot_period_s));
        }
        if !(self.ut_speed_mps >= 0.0) || !self.ut_speed_mps.is_finite() {
            return bad(format!("ut_speed_mps must be >= 0, got {}", self.ut_speed_mps));
        }
        if self.num_slots == 0 {
            return bad("num_slots must be >= 1".into());
        }
        if self.num_antennas == 0 || self.num_beams == 0 {
            return bad("num_antennas and num_beams must be >= 1".into());
        }
        if !(self.nlos_relative_loss_db > 0.0) {
            return bad(format!(
                "nlos_relative_loss_db must be > 0, got {}",
                self.nlos_relative_loss_db
            ));
        }
        if !(self.aod_jitter_std_rad >= 0.0) {
            return bad(format!(
                "aod_jitter_std_rad must be >= 0, got {}",
                self.aod_jitter_std_rad
            ));
        }
        Ok(())
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Ok(Codebook::new(self.num_antennas, self.num_beams)?)
    }

    /// UT position at slot `n`.
    pub fn ut_position(&self, n: usize) -> [f64; 2] {
        let dist = self.ut_speed_mps * self.slot_period_s * n as f64;
        [
            self.ut_start_m[0] + dist * self.ut_heading_rad.cos(),
            self.ut_start_m[1] + dist * self.ut_heading_rad.sin(),
        ]
    }

    /// Geometric LOS angle at slot `n` relative to array broadside (+y).
    pub fn los_aod(&self, n: usize) -> f64 {
        let p = self.ut_position(n);
        let dx = p[0] - self.bs_position_m[0];
        let dy = p[1] - self.bs_position_m[1];
        dx.atan2(dy)
    }

    fn distance(&self, n: usize) -> f64 {
        let p = self.ut_position(n);
        let dx = p[0] - self.bs_position_m[0];
        let dy = p[1] - self.bs_position_m[1];
        (dx * dx + dy * dy).sqrt().max(1.0)
    }
}

/// Per-slot oracle output: optimal beam and LOS angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub slot: usize,
    pub opt_beam: usize,
    pub aod_rad: f64,
}

/// A generated trajectory together with its oracle trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: TrajectoryConfig,
    pub snapshots: Vec<ChannelSnapshot>,
    pub trace: Vec<TraceRecord>,
}

impl Trajectory {
    pub fn simulate(config: TrajectoryConfig) -> Result<Self> {
        let snapshots = generate_trajectory(&config)?;
        let trace = trace_from_trajectory(&snapshots, &config.codebook()?)?;
        Ok(Self {
            config,
            snapshots,
            trace,
        })
    }

    pub fn codebook(&self) -> Result<Codebook> {
        self.config.codebook()
    }

    pub fn len(&self) -> usize {
        self.trace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.is_empty()
    }
}

/// One training example: `x` is C×U row-major (row 0 beam/Q, row 1 AoD),
/// `y` holds H future beam indices divided by Q.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub c: usize,
    pub u: usize,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub q_count: usize,
}

impl WindowedSample {
    pub fn row(&self, c: usize) -> &[f32] {
        &self.x[c * self.u..(c + 1) * self.u]
    }

    pub fn h(&self) -> usize {
        self.y.len()
    }
}

fn salt(x: f64) -> u64 {
    // splitmix64 finalizer over the bit pattern
    let mut z = x.to_bits().wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct NlosPath {
    aod: f64,
    phase0: f64,
    phase_rate: f64,
    amplitude: f64,
}

/// Snapshots for every slot of `cfg`. Deterministic given `cfg.seed`.
pub fn generate_trajectory(cfg: &TrajectoryConfig) -> Result<Vec<ChannelSnapshot>> {
    cfg.validate()?;
    let mut los_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let los_phase = los_rng.random_range(-PI..PI);
    let jitter = if cfg.aod_jitter_std_rad > 0.0 {
        Some(Normal::new(0.0, cfg.aod_jitter_std_rad).map_err(|e| ScenarioError::Config(e.to_string()))?)
    } else {
        None
    };

    // NLOS realizations are salted by the carrier so a frequency change alters the scene.
    let mut nlos_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt(cfg.carrier_freq_ghz));
    let base_atten = 10f64.powf(-cfg.nlos_relative_loss_db / 20.0);
    let nlos: Vec<NlosPath> = (0..cfg.num_nlos_paths)
        .map(|_| {
            let extra_db: f64 = nlos_rng.random_range(0.0..6.0);
            NlosPath {
                aod: nlos_rng.random_range(-1.3..1.3),
                phase0: nlos_rng.random_range(-PI..PI),
                phase_rate: nlos_rng.random_range(-0.6..0.6),
                amplitude: base_atten * 10f64.powf(-extra_db / 20.0),
            }
        })
        .collect();

    let mut snaps = Vec::with_capacity(cfg.num_slots);
    for n in 0..cfg.num_slots {
        let mut aod = cfg.los_aod(n);
        if !(aod.abs() < FRAC_PI_2) {
            return Err(ScenarioError::OutOfSector { slot: n, aod });
        }
        if let Some(dist) = &jitter {
            aod += dist.sample(&mut los_rng);
            if !(aod.abs() < FRAC_PI_2) {
                return Err(ScenarioError::OutOfSector { slot: n, aod });
            }
        }
        let d = cfg.distance(n);
        let loss = d * d;
        let mut paths = Vec::with_capacity(1 + nlos.len());
        paths.push(PathComponent::new(aod, Complex64::from_polar(1.0, los_phase), loss)?);
        for p in &nlos {
            let phase = p.phase0 + p.phase_rate * n as f64;
            paths.push(PathComponent::new(
                p.aod,
                Complex64::from_polar(p.amplitude, phase),
                loss,
            )?);
        }
        snaps.push(ChannelSnapshot::new(n, paths)?);
    }
    Ok(snaps)
}

/// Runs the beam oracle on every snapshot.
pub fn trace_from_trajectory(snaps: &[ChannelSnapshot], cb: &Codebook) -> Result<Vec<TraceRecord>> {
    if snaps.is_empty() {
        return Err(ScenarioError::Config("empty trajectory".into()));
    }
    snaps
        .iter()
        .map(|s| {
            let h = channel::channel_vector(s, cb.num_antennas)?;
            Ok(TraceRecord {
                slot: s.slot_index,
                opt_beam: channel::optimal_beam(&h, cb)?,
                aod_rad: s.los().aod_rad,
            })
        })
        .collect()
}

/// Number of windows `window_trace` emits for a trace of length `t`.
pub fn window_count(t: usize, u: usize, h: usize, stride: usize) -> usize {
    if t < u + h || stride == 0 {
        0
    } else {
        (t - u - h) / stride + 1
    }
}

/// Builds the C=2 model input from `u` consecutive records.
pub fn window_input(records: &[TraceRecord], q_count: usize) -> Result<Vec<f32>> {
    let u = records.len();
    let mut x = vec![0f32; NUM_VARS * u];
    for (t, r) in records.iter().enumerate() {
        if r.opt_beam >= q_count {
            return Err(ScenarioError::QCount {
                slot: r.slot,
                index: r.opt_beam,
                q_count,
            });
        }
        x[t] = (r.opt_beam as f64 / q_count as f64) as f32;
        x[u + t] = r.aod_rad as f32;
    }
    Ok(x)
}

/// Slides a (u + h)-slot window over one trace.
pub fn window_trace(
    trace: &[TraceRecord],
    u: usize,
    h: usize,
    stride: usize,
    q_count: usize,
) -> Result<Vec<WindowedSample>> {
    if stride == 0 {
        return Err(ScenarioError::Config("window stride must be >= 1".into()));
    }
    if let Some(r) = trace.iter().find(|r| r.opt_beam >= q_count) {
        return Err(ScenarioError::QCount {
            slot: r.slot,
            index: r.opt_beam,
            q_count,
        });
    }
    let n = window_count(trace.len(), u, h, stride);
    let mut out = Vec::with_capacity(n);
    for w in 0..n {
        let start = w * stride;
        let x = window_input(&trace[start..start + u], q_count)?;
        let y = trace[start + u..start + u + h]
            .iter()
            .map(|r| (r.opt_beam as f64 / q_count as f64) as f32)
            .collect();
        out.push(WindowedSample {
            c: NUM_VARS,
            u,
            x,
            y,
            q_count,
        });
    }
    Ok(out)
}

/// Reads a `slot,opt_beam,aod_rad` CSV trace.
pub fn ingest_external_trace(path: &Path, q_count: usize) -> Result<Vec<TraceRecord>> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| ScenarioError::Io {
        path: p.clone(),
        source,
    })?;
    read_trace_csv(file, &p, q_count)
}

pub fn read_trace_csv<R: std::io::Read>(
    reader: R,
    name: &str,
    q_count: usize,
) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: u64, msg: String| ScenarioError::Parse {
        path: name.to_string(),
        line,
        msg,
    };
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let col = |want: &str| {
        headers
            .iter()
            .position(|h| h == want)
            .ok_or_else(|| parse_err(1, format!("header is missing column `{want}`")))
    };
    let (c_slot, c_beam, c_aod) = (col("slot")?, col("opt_beam")?, col("aod_rad")?);

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize, what: &str| {
            rec.get(i)
                .ok_or_else(|| parse_err(line, format!("missing field `{what}`")))
        };
        let slot: usize = field(c_slot, "slot")?
            .parse()
            .map_err(|e| parse_err(line, format!("slot: {e}")))?;
        let opt_beam: usize = field(c_beam, "opt_beam")?
            .parse()
            .map_err(|e| parse_err(line, format!("opt_beam: {e}")))?;
        let aod_rad: f64 = field(c_aod, "aod_rad")?
            .parse()
            .map_err(|e| parse_err(line, format!("aod_rad: {e}")))?;
        if slot != out.len() {
            return Err(ScenarioError::Monotonicity {
                path: name.to_string(),
                line,
                expected: out.len(),
                found: slot,
            });
        }
        if opt_beam >= q_count {
            return Err(ScenarioError::Range {
                path: name.to_string(),
                line,
                msg: format!("opt_beam {opt_beam} not below q_count {q_count}"),
            });
        }
        if !(aod_rad.abs() < FRAC_PI_2) {
            return Err(ScenarioError::Range {
                path: name.to_string(),
                line,
                msg: format!("aod_rad {aod_rad} outside (-pi/2, pi/2)"),
            });
        }
        out.push(TraceRecord {
            slot,
            opt_beam,
            aod_rad,
        });
    }
    Ok(out)
}

/// Writes a trace in the same CSV layout `ingest_external_trace` reads.
pub fn write_trace_csv<W: std::io::Write>(w: W, trace: &[TraceRecord]) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["slot", "opt_beam", "aod_rad"])?;
    for r in trace {
        wtr.write_record([
            r.slot.to_string(),
            r.opt_beam.to_string(),
            format!("{:.12}", r.aod_rad),
        ])?;
    }
    wtr.flush()
}

/// Writes trajectories (configs, snapshots and traces) as JSON.
pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let io = |source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, trajectories).map_err(|e| io(e.into()))?;
    std::io::Write::flush(&mut w).map_err(io)
}

/// Reads trajectories written by [`save_trajectories`] and validates them.
pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| ScenarioError::Io {
        path: p.clone(),
        source,
    })?;
    let trajs: Vec<Trajectory> = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| ScenarioError::Dataset(format!("{p}: {e}")))?;
    for t in &trajs {
        t.config.validate()?;
        if t.snapshots.len() != t.trace.len() {
            return Err(ScenarioError::Dataset(format!(
                "{p}: {} snapshots for {} trace records",
                t.snapshots.len(),
                t.trace.len()
            )));
        }
    }
    Ok(trajs)
}
