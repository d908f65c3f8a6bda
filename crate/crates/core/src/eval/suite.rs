//! Desk-scale experiment suites: scenario grids, variant training and CSV
//! output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::{
    evaluate, io_err, load_model, merge_reports, EvalError, EvalReport, LinearExtrapolation,
    ModelPredictor, Persistence, Predictor, Result,
};
use crate::config::KvMap;
use crate::forecaster::{Forecaster, ModelConfig, Variables};
use crate::model::Model;
use crate::scenario::{Dataset, Geometry, ScenarioSpec, Trajectory};
use crate::trainer::{train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Velocity,
    ScenarioMismatch,
    FrequencyMismatch,
    Antenna,
    VariableAblation,
    ComponentAblation,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Velocity,
        Suite::ScenarioMismatch,
        Suite::FrequencyMismatch,
        Suite::Antenna,
        Suite::VariableAblation,
        Suite::ComponentAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Velocity => "velocity",
            Suite::ScenarioMismatch => "scenario-mismatch",
            Suite::FrequencyMismatch => "frequency-mismatch",
            Suite::Antenna => "antenna",
            Suite::VariableAblation => "variable-ablation",
            Suite::ComponentAblation => "component-ablation",
        }
    }

    fn trains_variants(self) -> bool {
        matches!(self, Suite::VariableAblation | Suite::ComponentAblation)
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|k| k.name()).collect();
                format!("unknown suite `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Resolved suite manifest.
#[derive(Debug, Clone)]
pub struct SuiteManifest {
    /// Trained forecaster; required except for the ablation suites, which
    /// train their own variants when it is absent.
    pub checkpoint: Option<PathBuf>,
    pub lstm_checkpoint: Option<PathBuf>,
    pub geometry: Geometry,
    pub speeds: Vec<f64>,
    pub num_antennas: usize,
    pub carrier_ghz: f64,
    pub aod_jitter_std_rad: f64,
    /// Test trajectories per speed.
    pub test_trajectories: usize,
    pub test_slots: usize,
    pub test_seed: u64,
    pub eval_stride: usize,
    /// Training trajectories per speed (ablation suites).
    pub train_trajectories: usize,
    pub train_slots: usize,
    pub train_seed: u64,
    pub window_stride: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Text of the resolved manifest, hashed into every report.
    pub resolved: KvMap,
}

impl SuiteManifest {
    /// Reads a manifest; `model.*` and `train.*` keys configure variants.
    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let mut model_kv = kv.take_prefixed("model.");
        let mut train_kv = kv.take_prefixed("train.");
        let model = ModelConfig::from_kv(&mut model_kv)?;
        let train = TrainConfig::from_kv(&mut train_kv)?;
        model_kv.finish()?;
        train_kv.finish()?;
        let m = Self {
            checkpoint: kv.take_str("checkpoint").map(PathBuf::from),
            lstm_checkpoint: kv.take_str("lstm_checkpoint").map(PathBuf::from),
            geometry: kv.take_or("geometry", Geometry::Bs1)?,
            speeds: kv.take_list("speeds")?.unwrap_or_else(|| vec![5.0, 10.0, 15.0, 20.0]),
            num_antennas: kv.take_or("num_antennas", 64)?,
            carrier_ghz: kv.take_or("carrier_ghz", 28.0)?,
            aod_jitter_std_rad: kv.take_or("aod_jitter_std_rad", 0.002)?,
            test_trajectories: kv.take_or("test_trajectories", 20)?,
            test_slots: kv.take_or("test_slots", 80)?,
            test_seed: kv.take_or("test_seed", 9000)?,
            eval_stride: kv.take_or("eval_stride", 1)?,
            train_trajectories: kv.take_or("train_trajectories", 50)?,
            train_slots: kv.take_or("train_slots", 80)?,
            train_seed: kv.take_or("train_seed", 100)?,
            window_stride: kv.take_or("window_stride", 5)?,
            model,
            train,
            resolved: KvMap::new(),
        };
        kv.finish()?;
        if m.speeds.is_empty() || m.test_trajectories == 0 || m.eval_stride == 0 || m.window_stride == 0 {
            return Err(EvalError::Config(
                "speeds, test_trajectories, eval_stride and window_stride must be non-empty / positive".into(),
            ));
        }
        let resolved = m.to_kv();
        Ok(Self { resolved, ..m })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        if let Some(p) = &self.checkpoint {
            kv.set("checkpoint", p.display());
        }
        if let Some(p) = &self.lstm_checkpoint {
            kv.set("lstm_checkpoint", p.display());
        }
        kv.set("geometry", self.geometry.name());
        let speeds: Vec<String> = self.speeds.iter().map(f64::to_string).collect();
        kv.set("speeds", speeds.join(","));
        kv.set("num_antennas", self.num_antennas);
        kv.set("carrier_ghz", self.carrier_ghz);
        kv.set("aod_jitter_std_rad", self.aod_jitter_std_rad);
        kv.set("test_trajectories", self.test_trajectories);
        kv.set("test_slots", self.test_slots);
        kv.set("test_seed", self.test_seed);
        kv.set("eval_stride", self.eval_stride);
        kv.set("train_trajectories", self.train_trajectories);
        kv.set("train_slots", self.train_slots);
        kv.set("train_seed", self.train_seed);
        kv.set("window_stride", self.window_stride);
        for (k, v) in pairs(&self.model.to_kv()) {
            kv.set(&format!("model.{k}"), v);
        }
        for (k, v) in pairs(&self.train.to_kv()) {
            kv.set(&format!("train.{k}"), v);
        }
        kv
    }

    fn spec(&self, speed_index: usize, seed: u64, n: usize, slots: usize) -> ScenarioSpec {
        ScenarioSpec {
            geometry: self.geometry,
            speed_mps: self.speeds[speed_index],
            num_antennas: self.num_antennas,
            carrier_freq_ghz: self.carrier_ghz,
            num_trajectories: n,
            num_slots: slots,
            aod_jitter_std_rad: self.aod_jitter_std_rad,
            seed: seed + speed_index as u64,
        }
    }

    /// Test scenario of one speed.
    pub fn test_spec(&self, speed_index: usize) -> ScenarioSpec {
        self.spec(speed_index, self.test_seed, self.test_trajectories, self.test_slots)
    }

    /// Training scenario of one speed.
    pub fn train_spec(&self, speed_index: usize) -> ScenarioSpec {
        self.spec(speed_index, self.train_seed, self.train_trajectories, self.train_slots)
    }

    /// Training windows pooled over every speed.
    pub fn training_set(&self) -> Result<Dataset> {
        let mut trajs = Vec::new();
        for i in 0..self.speeds.len() {
            trajs.extend(self.train_spec(i).simulate()?);
        }
        Ok(Dataset::from_trajectories(
            &trajs,
            self.model.u_len,
            self.model.h_len,
            self.window_stride,
            self.train_seed,
        )?)
    }
}

fn pairs(kv: &KvMap) -> Vec<(String, String)> {
    kv.keys()
        .map(|k| (k.to_string(), kv.get(k).unwrap_or_default().to_string()))
        .collect()
}

/// Named groups of test scenario specs a suite evaluates on.
pub fn suite_grid(suite: Suite, m: &SuiteManifest) -> Vec<(String, Vec<ScenarioSpec>)> {
    let all_speeds = |f: &dyn Fn(&mut ScenarioSpec)| -> Vec<ScenarioSpec> {
        (0..m.speeds.len())
            .map(|i| {
                let mut s = m.test_spec(i);
                f(&mut s);
                s
            })
            .collect()
    };
    match suite {
        Suite::Velocity => (0..m.speeds.len())
            .map(|i| (format!("v{}", m.speeds[i]), vec![m.test_spec(i)]))
            .collect(),
        Suite::ScenarioMismatch => [Geometry::Bs1, Geometry::Bs2]
            .into_iter()
            .map(|g| (g.name().to_string(), all_speeds(&|s| s.geometry = g)))
            .collect(),
        Suite::FrequencyMismatch => [28.0, 60.0]
            .into_iter()
            .map(|f| (format!("fc{f}"), all_speeds(&|s| s.carrier_freq_ghz = f)))
            .collect(),
        Suite::Antenna => [32usize, 64, 128]
            .into_iter()
            .map(|a| (format!("m{a}"), all_speeds(&|s| s.num_antennas = a)))
            .collect(),
        Suite::VariableAblation | Suite::ComponentAblation => {
            vec![("all".to_string(), all_speeds(&|_| {}))]
        }
    }
}

/// Model variants an ablation suite trains, by predictor name.
fn variants(suite: Suite, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    match suite {
        Suite::VariableAblation => [Variables::Both, Variables::Beam, Variables::Aod]
            .into_iter()
            .map(|v| {
                (
                    v.name().to_string(),
                    ModelConfig {
                        variables: v,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Suite::ComponentAblation => vec![
            ("full".to_string(), base.clone()),
            (
                "wo-pap".to_string(),
                ModelConfig {
                    use_prompt: false,
                    ..base.clone()
                },
            ),
            (
                "wo-patch".to_string(),
                ModelConfig {
                    patch_len: base.u_len,
                    stride: base.u_len,
                    ..base.clone()
                },
            ),
        ],
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutput {
    /// Reports ordered by scenario key, then predictor.
    pub reports: Vec<EvalReport>,
    pub files: Vec<PathBuf>,
    pub train_logs: Vec<(String, TrainLog)>,
}

fn file_stem(suite: Suite) -> String {
    suite.name().replace('-', "_")
}

fn write(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(io_err(&path))?;
    files.push(path);
    Ok(())
}

/// Runs one suite and writes the variant checkpoints (ablation suites), `<suite>.csv` (`step,predictor,scenario,mean_gain,n`),
/// `<suite>_summary.csv`, and with `plotdata` a whitespace-separated
/// `<suite>.dat` into `out_dir`.
pub fn run_suite(suite: Suite, m: &SuiteManifest, out_dir: &Path, plotdata: bool) -> Result<SuiteOutput> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let stem = file_stem(suite);
    let mut files = Vec::new();
    let mut train_logs = Vec::new();
    let mut predictors: Vec<Box<dyn Predictor>> = vec![
        Box::new(Persistence { u: m.model.u_len }),
        Box::new(LinearExtrapolation { u: m.model.u_len }),
    ];

    if suite.trains_variants() {
        let base = match &m.checkpoint {
            Some(p) => forecaster_config(p)?,
            None => m.model.clone(),
        };
        let list = variants(suite, &base);
        let needs_data = list.iter().any(|(name, _)| !reuses_checkpoint(suite, name, m));
        let data = if needs_data { Some(m.training_set()?) } else { None };
        let trained: Vec<(String, Box<dyn Model>, Option<TrainLog>)> = list
            .into_par_iter()
            .map(|(name, cfg)| {
                if reuses_checkpoint(suite, &name, m) {
                    let path = m.checkpoint.as_ref().expect("checked by reuses_checkpoint");
                    return Ok((name, load_model(path)?, None));
                }
                let mut model = Forecaster::new(cfg)?;
                let ckpt = out_dir.join(format!("{stem}-{name}.ckpt"));
                let samples = &data.as_ref().expect("training data built").samples;
                let log = train(&mut model, samples, &m.train, Some(&ckpt))?;
                Ok((name, Box::new(model) as Box<dyn Model>, Some(log)))
            })
            .collect::<Result<Vec<_>>>()?;
        for (name, model, log) in trained {
            // Logs carry wall-clock times, so they are returned rather than
            // written next to the deterministic outputs.
            if let Some(log) = log {
                train_logs.push((name.clone(), log));
            }
            predictors.push(Box::new(ModelPredictor::new(name, model)));
        }
    } else {
        let path = m.checkpoint.as_ref().ok_or_else(|| {
            EvalError::Config(format!("suite {} needs `checkpoint` in the manifest", suite.name()))
        })?;
        predictors.push(Box::new(ModelPredictor::new("forecaster", load_model(path)?)));
    }
    if let Some(p) = &m.lstm_checkpoint {
        predictors.push(Box::new(ModelPredictor::new("lstm", load_model(p)?)));
    }

    let hash = m.resolved.hash();
    let mut grid = suite_grid(suite, m);
    grid.sort_by(|a, b| a.0.cmp(&b.0));
    let h = m.model.h_len;
    let scenario_reports: Vec<Vec<EvalReport>> = grid
        .par_iter()
        .map(|(label, specs)| {
            let mut trajs: Vec<Trajectory> = Vec::new();
            for s in specs {
                trajs.extend(s.simulate()?);
            }
            predictors
                .iter()
                .map(|p| Ok(evaluate(p.as_ref(), &trajs, h, m.eval_stride)?.labeled(label, &hash)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports: Vec<EvalReport> = scenario_reports.into_iter().flatten().collect();
    if suite == Suite::Velocity {
        for p in &predictors {
            let parts: Vec<&EvalReport> = reports.iter().filter(|r| r.predictor == p.name()).collect();
            let merged = merge_reports(&parts, "all")?;
            reports.push(merged);
        }
    }

    let mut csv = String::from("step,predictor,scenario,mean_gain,n\n");
    let mut summary = String::from("predictor,scenario,overall,step1,n,config_hash\n");
    for r in &reports {
        for (k, g) in r.per_step.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{},{:.9},{}", k + 1, r.predictor, r.scenario, g, r.n);
        }
        let _ = writeln!(
            summary,
            "{},{},{:.9},{:.9},{},{}",
            r.predictor, r.scenario, r.overall, r.per_step[0], r.n, r.config_hash
        );
    }
    write(out_dir.join(format!("{stem}.csv")), &csv, &mut files)?;
    write(out_dir.join(format!("{stem}_summary.csv")), &summary, &mut files)?;
    if plotdata {
        let mut dat = String::from("# step");
        for r in &reports {
            let _ = write!(dat, " {}@{}", r.predictor, r.scenario);
        }
        dat.push('\n');
        for k in 0..h {
            let _ = write!(dat, "{}", k + 1);
            for r in &reports {
                let _ = write!(dat, " {:.9}", r.per_step[k]);
            }
            dat.push('\n');
        }
        write(out_dir.join(format!("{stem}.dat")), &dat, &mut files)?;
    }
    write(out_dir.join(format!("{stem}_manifest.txt")), &m.resolved.to_text(), &mut files)?;
    Ok(SuiteOutput {
        reports,
        files,
        train_logs,
    })
}

/// The unablated variant reuses a given checkpoint instead of retraining.
fn reuses_checkpoint(suite: Suite, name: &str, m: &SuiteManifest) -> bool {
    m.checkpoint.is_some()
        && matches!(
            (suite, name),
            (Suite::VariableAblation, "both") | (Suite::ComponentAblation, "full")
        )
}

fn forecaster_config(path: &Path) -> Result<ModelConfig> {
    let side = crate::trainer::sidecar_path(path);
    let mut kv = KvMap::load(&side)?;
    match kv.take_str("kind").as_deref() {
        Some("forecaster") | None => Ok(ModelConfig::from_kv(&mut kv)?),
        Some(other) => Err(EvalError::Config(format!(
            "{}: ablation base must be a forecaster, found `{other}`",
            side.display()
        ))),
    }
}
