use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use beamcast::baselines::{Lstm, LstmConfig};
use beamcast::config::KvMap;
use beamcast::eval::{
    closed_loop_track, evaluate, load_model, merge_reports, run_suite, EvalReport,
    LinearExtrapolation, ModelPredictor, Oracle, Persistence, Predictor, Suite, SuiteManifest,
};
use beamcast::forecaster::{window_prompt, Forecaster, ModelConfig};
use beamcast::model::Model;
use beamcast::scenario::{
    ingest_external_trace, load_trajectories, read_dataset, save_trajectories, window_input,
    window_trace, write_dataset, write_trace_csv, Dataset, Geometry, ScenarioSpec, TraceRecord,
    Trajectory, NUM_VARS,
};
use beamcast::trainer::{train as fit, TrainConfig};

use crate::failure::Failure;

pub struct Context {
    pub out: PathBuf,
    pub plotdata: bool,
    pub verbose: bool,
}

impl Context {
    fn out_dir(&self) -> Result<&Path, Failure> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", self.out.display())))?;
        Ok(&self.out)
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<KvMap, Failure> {
    let mut kv = match path {
        Some(p) => KvMap::load(p)?,
        None => KvMap::new(),
    };
    for s in sets {
        kv.apply_override(s)
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(kv)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Scenario families from `geometry`, `speeds`, `num_antennas`, ...; one
/// spec per speed, seeds offset by the speed index.
fn scenario_specs(kv: &mut KvMap) -> Result<Vec<ScenarioSpec>, Failure> {
    let geometry: Geometry = kv.take_or("geometry", Geometry::Bs1)?;
    let speeds: Vec<f64> = kv.take_list("speeds")?.unwrap_or_else(|| vec![10.0]);
    let num_antennas = kv.take_or("num_antennas", 64)?;
    let carrier = kv.take_or("carrier_ghz", 28.0)?;
    let n = kv.take_or("num_trajectories", 10)?;
    let slots = kv.take_or("num_slots", 80)?;
    let jitter = kv.take_or("aod_jitter_std_rad", 0.002)?;
    let seed: u64 = kv.take_or("seed", 0)?;
    if speeds.is_empty() {
        return Err(Failure::Data(
            "`speeds` must list at least one speed".into(),
        ));
    }
    Ok(speeds
        .iter()
        .enumerate()
        .map(|(i, &v)| ScenarioSpec {
            geometry,
            speed_mps: v,
            num_antennas,
            carrier_freq_ghz: carrier,
            num_trajectories: n,
            num_slots: slots,
            aod_jitter_std_rad: jitter,
            seed: seed + i as u64,
        })
        .collect())
}

fn simulate_all(specs: &[ScenarioSpec]) -> Result<Vec<Trajectory>, Failure> {
    let mut out = Vec::new();
    for s in specs {
        out.extend(s.simulate()?);
    }
    Ok(out)
}

pub fn simulate(mut kv: KvMap, ctx: &Context) -> Result<(), Failure> {
    let specs = scenario_specs(&mut kv)?;
    kv.finish()?;
    let trajs = simulate_all(&specs)?;
    let dir = ctx.out_dir()?;
    save_trajectories(&dir.join("trajectories.json"), &trajs)?;
    for (i, t) in trajs.iter().enumerate() {
        let path = dir.join(format!("trace_{i:03}.csv"));
        write_trace_csv(create(&path)?, &t.trace)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    println!("trajectories {}", trajs.len());
    Ok(())
}

pub fn dataset(mut kv: KvMap, ctx: &Context) -> Result<(), Failure> {
    let u = kv.take_or("u_len", 40)?;
    let h = kv.take_or("h_len", 10)?;
    let stride = kv.take_or("window_stride", 1)?;
    let shuffle_seed = kv.take_or("shuffle_seed", 0)?;
    let ds = if let Some(trace) = kv.take_str("trace") {
        let q = kv.take_or("q_count", 64)?;
        kv.finish()?;
        let records = ingest_external_trace(Path::new(&trace), q)?;
        Dataset {
            c: NUM_VARS,
            u,
            h,
            q_count: q,
            samples: window_trace(&records, u, h, stride, q)?,
        }
    } else if let Some(path) = kv.take_str("trajectories") {
        kv.finish()?;
        let trajs = load_trajectories(Path::new(&path))?;
        Dataset::from_trajectories(&trajs, u, h, stride, shuffle_seed)?
    } else {
        let specs = scenario_specs(&mut kv)?;
        kv.finish()?;
        Dataset::from_trajectories(&simulate_all(&specs)?, u, h, stride, shuffle_seed)?
    };
    let path = ctx.out_dir()?.join("dataset.bpds");
    write_dataset(&path, &ds)?;
    println!("samples {}", ds.len());
    Ok(())
}

pub fn train(kind: &str, mut kv: KvMap, ctx: &Context) -> Result<(), Failure> {
    let ds_path = kv
        .take_str("dataset")
        .ok_or_else(|| Failure::Data("`dataset` key is required".into()))?;
    let ds = read_dataset(Path::new(&ds_path))?;
    for (key, v) in [("u_len", ds.u), ("h_len", ds.h)] {
        if !kv.contains(key) {
            kv.set(key, v);
        }
    }
    let mut model: Box<dyn Model> = match kind {
        "lstm" => Box::new(Lstm::new(LstmConfig::from_kv(&mut kv)?)?),
        _ => Box::new(Forecaster::new(ModelConfig::from_kv(&mut kv)?)?),
    };
    let cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if model.window() != ds.u || model.horizon() != ds.h {
        return Err(Failure::Data(format!(
            "model expects U={} H={}, dataset has U={} H={}",
            model.window(),
            model.horizon(),
            ds.u,
            ds.h
        )));
    }
    let dir = ctx.out_dir()?;
    let ckpt = dir.join(format!("{kind}.ckpt"));
    ctx.note(format!("training {kind} on {} samples", ds.len()));
    let log = fit(model.as_mut(), &ds.samples, &cfg, Some(&ckpt))?;
    let log_path = dir.join(format!("{kind}_log.csv"));
    log.write_csv(create(&log_path)?)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?;
    println!(
        "best_epoch {} best_val_loss {:.6} initial_val_loss {:.6}",
        log.best_epoch, log.best_val_loss, log.initial_val_loss
    );
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn predictor(name: &str, m: &SuiteManifest) -> Result<Box<dyn Predictor>, Failure> {
    let u = m.model.u_len;
    Ok(match name {
        "persistence" => Box::new(Persistence { u }),
        "linear" => Box::new(LinearExtrapolation { u }),
        "oracle" => Box::new(Oracle { u }),
        "forecaster" | "lstm" => {
            let path = match name {
                "lstm" => m.lstm_checkpoint.as_ref().or(m.checkpoint.as_ref()),
                _ => m.checkpoint.as_ref(),
            }
            .ok_or_else(|| Failure::Data(format!("predictor {name} needs a checkpoint")))?;
            let model = load_model(path)?;
            Box::new(ModelPredictor::new(name, model))
        }
        other => {
            return Err(Failure::Data(format!(
                "unknown predictor `{other}` (persistence, linear, oracle, forecaster, lstm)"
            )))
        }
    })
}

fn test_trajectories(m: &SuiteManifest) -> Result<Vec<Trajectory>, Failure> {
    let specs: Vec<ScenarioSpec> = (0..m.speeds.len()).map(|i| m.test_spec(i)).collect();
    simulate_all(&specs)
}

fn report_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("step,predictor,scenario,mean_gain,n\n");
    for r in reports {
        for (k, g) in r.per_step.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{:.9},{}",
                k + 1,
                r.predictor,
                r.scenario,
                g,
                r.n
            );
        }
    }
    s
}

fn print_report(r: &EvalReport) {
    let steps: Vec<String> = r.per_step.iter().map(|g| format!("{g:.4}")).collect();
    println!(
        "{} overall {:.4} n {} config {}",
        r.predictor, r.overall, r.n, r.config_hash
    );
    println!("per_step {}", steps.join(" "));
}

fn manifest_with(mut kv: KvMap) -> Result<(String, SuiteManifest, KvMap), Failure> {
    let name = kv.take_str("predictor").unwrap_or_else(|| {
        if kv.contains("checkpoint") {
            "forecaster".into()
        } else {
            "persistence".into()
        }
    });
    let extra = kv.take_prefixed("track.");
    let m = SuiteManifest::from_kv(kv)?;
    Ok((name, m, extra))
}

pub fn eval(kv: KvMap, ctx: &Context) -> Result<(), Failure> {
    let (name, m, extra) = manifest_with(kv)?;
    extra.finish()?;
    let p = predictor(&name, &m)?;
    let mut resolved = m.resolved.clone();
    resolved.set("predictor", &name);
    let hash = resolved.hash();
    let trajs = test_trajectories(&m)?;
    ctx.note(format!("evaluating {name} on {} trajectories", trajs.len()));
    let report = evaluate(p.as_ref(), &trajs, m.model.h_len, m.eval_stride)?.labeled("all", &hash);
    let dir = ctx.out_dir()?;
    write_text(
        &dir.join("eval.csv"),
        &report_csv(std::slice::from_ref(&report)),
    )?;
    write_text(&dir.join("eval_manifest.txt"), &resolved.to_text())?;
    print_report(&report);
    Ok(())
}

pub fn track(kv: KvMap, ctx: &Context) -> Result<(), Failure> {
    let (name, m, mut extra) = manifest_with(kv)?;
    let refresh: usize = extra.take_or("refresh_every", 5)?;
    let half_width: usize = extra.take_or("neighborhood", m.num_antennas)?;
    extra.finish()?;
    let p = predictor(&name, &m)?;
    let mut resolved = m.resolved.clone();
    resolved.set("predictor", &name);
    resolved.set("track.refresh_every", refresh);
    resolved.set("track.neighborhood", half_width);
    let hash = resolved.hash();
    let trajs = test_trajectories(&m)?;
    let parts = trajs
        .iter()
        .map(|t| closed_loop_track(p.as_ref(), t, m.model.h_len, refresh, half_width))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&EvalReport> = parts.iter().collect();
    let report = merge_reports(&refs, "track")?.labeled("track", &hash);
    let dir = ctx.out_dir()?;
    write_text(
        &dir.join("track.csv"),
        &report_csv(std::slice::from_ref(&report)),
    )?;
    write_text(&dir.join("track_manifest.txt"), &resolved.to_text())?;
    print_report(&report);
    Ok(())
}

pub fn suite(name: &str, kv: KvMap, ctx: &Context) -> Result<(), Failure> {
    let suite: Suite = name.parse().map_err(Failure::Usage)?;
    let m = SuiteManifest::from_kv(kv)?;
    ctx.note(format!("running suite {name}"));
    let out = run_suite(suite, &m, ctx.out_dir()?, ctx.plotdata)?;
    for (variant, log) in &out.train_logs {
        ctx.note(format!(
            "{variant}: best epoch {} val {:.6}",
            log.best_epoch, log.best_val_loss
        ));
    }
    for r in &out.reports {
        println!(
            "{} {} overall {:.4} step1 {:.4}",
            r.scenario, r.predictor, r.overall, r.per_step[0]
        );
    }
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

pub fn inspect_prompt(mut kv: KvMap) -> Result<(), Failure> {
    let q: usize = kv.take_or("q_count", 64)?;
    let records: Vec<TraceRecord> = if let Some(beams) = kv.take_list::<usize>("beams")? {
        let aods = kv
            .take_list::<f64>("aods")?
            .unwrap_or_else(|| vec![0.0; beams.len()]);
        if aods.len() != beams.len() {
            return Err(Failure::Data(format!(
                "{} beams but {} aods",
                beams.len(),
                aods.len()
            )));
        }
        beams
            .iter()
            .zip(&aods)
            .enumerate()
            .map(|(slot, (&b, &a))| TraceRecord {
                slot,
                opt_beam: b,
                aod_rad: a,
            })
            .collect()
    } else if let Some(trace) = kv.take_str("trace") {
        let start: usize = kv.take_or("start", 0)?;
        let all = ingest_external_trace(Path::new(&trace), q)?;
        let u: usize = kv
            .get("u_len")
            .map(str::parse)
            .transpose()
            .map_err(|_| Failure::Data("`u_len` is not an integer".into()))?
            .unwrap_or(40);
        all.get(start..start + u)
            .ok_or_else(|| {
                Failure::Data(format!(
                    "trace has {} slots, window needs {}",
                    all.len(),
                    start + u
                ))
            })?
            .to_vec()
    } else {
        return Err(Failure::Data(
            "give `beams` (and optionally `aods`) or `trace`".into(),
        ));
    };
    if !kv.contains("u_len") {
        kv.set("u_len", records.len());
    }
    let cfg = ModelConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let x = window_input(&records, q)?;
    let (text, ids) = window_prompt(&x, q, &cfg)?;
    let ids: Vec<String> = ids.iter().map(usize::to_string).collect();
    println!("{text}");
    println!("ids {}", ids.join(" "));
    Ok(())
}

pub fn ingest(input: &Path, mut kv: KvMap, ctx: &Context) -> Result<(), Failure> {
    let q: usize = kv.take_or("q_count", 64)?;
    kv.finish()?;
    let records = ingest_external_trace(input, q)?;
    let path = ctx.out_dir()?.join("trace.csv");
    write_trace_csv(create(&path)?, &records)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    println!("records {}", records.len());
    Ok(())
}
