//! `BPDS` binary datasets of windowed samples.
//!
//! Layout (little endian): magic `BPDS`, u16 version = 1, u32 sample count,
//! u16 C, u16 U, u16 H, u32 q_count, then per sample C×U f32 (row-major)
//! followed by H f32.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{window_trace, Result, ScenarioError, Trajectory, TrajectoryConfig, WindowedSample};

const MAGIC: &[u8; 4] = b"BPDS";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub c: usize,
    pub u: usize,
    pub h: usize,
    pub q_count: usize,
    pub samples: Vec<WindowedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Windows every trajectory (never across trajectory boundaries) and
    /// shuffles the result with `shuffle_seed`.
    pub fn from_trajectories(
        trajectories: &[Trajectory],
        u: usize,
        h: usize,
        stride: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| ScenarioError::Dataset("no trajectories".into()))?;
        let q_count = first.config.num_beams;
        if let Some(t) = trajectories.iter().find(|t| t.config.num_beams != q_count) {
            return Err(ScenarioError::Dataset(format!(
                "mixed q_count in one dataset ({} vs {q_count})",
                t.config.num_beams
            )));
        }
        let mut samples = Vec::new();
        for t in trajectories {
            samples.extend(window_trace(&t.trace, u, h, stride, q_count)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        samples.shuffle(&mut rng);
        Ok(Self {
            c: super::NUM_VARS,
            u,
            h,
            q_count,
            samples,
        })
    }
}

/// Generates trajectories (in parallel when a rayon pool allows it), then
/// windows and shuffles deterministically.
pub fn build_dataset(
    cfgs: &[TrajectoryConfig],
    u: usize,
    h: usize,
    stride: usize,
    shuffle_seed: u64,
) -> Result<Dataset> {
    if cfgs.is_empty() {
        return Err(ScenarioError::Dataset("no trajectory configs".into()));
    }
    let trajectories = cfgs
        .par_iter()
        .cloned()
        .map(Trajectory::simulate)
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_trajectories(&trajectories, u, h, stride, shuffle_seed)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode_dataset<W: Write>(mut w: W, ds: &Dataset) -> std::io::Result<()> {
    let dim16 = |v: usize| {
        u16::try_from(v).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{v} exceeds u16"))
        })
    };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.samples.len() as u32).to_le_bytes())?;
    w.write_all(&dim16(ds.c)?.to_le_bytes())?;
    w.write_all(&dim16(ds.u)?.to_le_bytes())?;
    w.write_all(&dim16(ds.h)?.to_le_bytes())?;
    w.write_all(&(ds.q_count as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity((ds.c * ds.u + ds.h) * 4);
    for s in &ds.samples {
        buf.clear();
        for v in s.x.iter().chain(&s.y) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    encode_dataset(std::io::BufWriter::new(f), ds).map_err(io_err(path))
}

pub fn decode_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let corrupt = |m: &str| ScenarioError::Dataset(m.to_string());
    let mut head = [0u8; 20];
    r.read_exact(&mut head)
        .map_err(|_| corrupt("truncated header"))?;
    if &head[0..4] != MAGIC {
        return Err(corrupt("bad magic, not a BPDS file"));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(ScenarioError::Dataset(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let c = u16::from_le_bytes([head[10], head[11]]) as usize;
    let u = u16::from_le_bytes([head[12], head[13]]) as usize;
    let h = u16::from_le_bytes([head[14], head[15]]) as usize;
    let q_count = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
    let per = c * u + h;
    let mut buf = vec![0u8; per * 4];
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| ScenarioError::Dataset(format!("truncated at sample {i} of {count}")))?;
        let vals: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push(WindowedSample {
            c,
            u,
            x: vals[..c * u].to_vec(),
            y: vals[c * u..].to_vec(),
            q_count,
        });
    }
    Ok(Dataset {
        c,
        u,
        h,
        q_count,
        samples,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    decode_dataset(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::TraceRecord;
    use proptest::prelude::*;

    fn cfg(seed: u64, slots: usize) -> TrajectoryConfig {
        TrajectoryConfig {
            num_slots: slots,
            ut_start_m: [5.0, 25.0],
            ut_speed_mps: 15.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn single_short_trajectory_gives_one_sample() {
        let ds = build_dataset(&[cfg(1, 50)], 40, 10, 1, 0).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(build_dataset(&[], 40, 10, 1, 0).is_err());
    }

    #[test]
    fn seeds_change_payloads() {
        let a = build_dataset(&[cfg(1, 50)], 40, 10, 1, 0).unwrap();
        let ab = build_dataset(&[cfg(1, 50), cfg(2, 50)], 40, 10, 1, 0).unwrap();
        assert_eq!(ab.len(), 2 * a.len());
        assert_ne!(ab.samples[0].x, ab.samples[1].x);
    }

    #[test]
    fn files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfgs = [cfg(1, 70), cfg(2, 70), cfg(3, 90)];
        let p1 = dir.path().join("a.bpds");
        let p2 = dir.path().join("b.bpds");
        write_dataset(&p1, &build_dataset(&cfgs, 40, 10, 3, 9).unwrap()).unwrap();
        write_dataset(&p2, &build_dataset(&cfgs, 40, 10, 3, 9).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_dataset(&p1).unwrap();
        assert_eq!(back, build_dataset(&cfgs, 40, 10, 3, 9).unwrap());
        assert!(back
            .samples
            .iter()
            .all(|s| s.row(0).iter().chain(&s.y).all(|v| (0.0..1.0).contains(v))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ds = build_dataset(&[cfg(1, 52)], 40, 10, 1, 0).unwrap();
        let mut bytes = Vec::new();
        encode_dataset(&mut bytes, &ds).unwrap();
        assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(bad.as_slice()).is_err());
    }

    #[test]
    fn windows_never_cross_trajectories() {
        // Two traces with disjoint beam values: any mixed window would contain both.
        let mk = |beam: usize, seed: u64| Trajectory {
            config: cfg(seed, 55),
            snapshots: vec![],
            trace: (0..55)
                .map(|n| TraceRecord {
                    slot: n,
                    opt_beam: beam,
                    aod_rad: 0.2,
                })
                .collect(),
        };
        let ds = Dataset::from_trajectories(&[mk(3, 1), mk(40, 2)], 40, 10, 1, 4).unwrap();
        assert_eq!(ds.len(), 12);
        for s in &ds.samples {
            let first = s.x[0];
            assert!(s.row(0).iter().chain(&s.y).all(|&v| v == first));
        }
    }

    proptest! {
        #[test]
        fn encode_decode_is_bitwise(vals in prop::collection::vec(-1e6f32..1e6, 2 * 4 * 3 + 2 * 3)) {
            let samples = (0..2)
                .map(|i| {
                    let chunk = &vals[i * 15..(i + 1) * 15];
                    WindowedSample { c: 3, u: 4, x: chunk[..12].to_vec(), y: chunk[12..].to_vec(), q_count: 7 }
                })
                .collect();
            let ds = Dataset { c: 3, u: 4, h: 3, q_count: 7, samples };
            let mut bytes = Vec::new();
            encode_dataset(&mut bytes, &ds).unwrap();
            let back = decode_dataset(bytes.as_slice()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
