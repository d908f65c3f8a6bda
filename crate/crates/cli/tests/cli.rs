use std::path::Path;
use std::process::{Command, Output};

fn beamcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamcast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = beamcast(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_config_key_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = beamcast(&["simulate", "--out", path_str(dir.path()), "--set", "num_trajectoriez=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_trajectoriez"));
}

#[test]
fn malformed_override_is_a_usage_error() {
    let o = beamcast(&["simulate", "--set", "no_equals_sign"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fifty_slot_trace_gives_one_window() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    let mut text = String::from("slot,opt_beam,aod_rad\n");
    for t in 0..50 {
        text.push_str(&format!("{t},{},{}\n", 10 + t / 5, 0.3 + 0.001 * t as f64));
    }
    std::fs::write(&trace, text).unwrap();
    let trace_kv = format!("trace={}", path_str(&trace));
    let o = beamcast(&["dataset", "--out", path_str(dir.path()), "--set", &trace_kv]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("samples 1"));
    assert!(dir.path().join("dataset.bpds").exists());

    let o = beamcast(&["ingest", path_str(&trace), "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("records 50"));
}

#[test]
fn out_of_range_trace_beam_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("bad.csv");
    std::fs::write(&trace, "slot,opt_beam,aod_rad\n0,64,0.3\n").unwrap();
    let o = beamcast(&["ingest", path_str(&trace), "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn increasing_window_prompt_says_upward() {
    let beams: Vec<String> = (0..40).map(|i| (5 + i).to_string()).collect();
    let set = format!("beams={}", beams.join(","));
    let o = beamcast(&["inspect-prompt", "--set", &set]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("upward"), "{text}");
    assert!(text.contains("min 5 max 44"), "{text}");
    assert!(text.lines().nth(1).unwrap().starts_with("ids "));
}

#[test]
fn simulate_and_dataset_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = path_str(d.path());
        let o = beamcast(&["simulate", "--out", out, "--set", "num_trajectories=2", "--set", "num_slots=60"]);
        assert_eq!(o.status.code(), Some(0));
        let traj = format!("trajectories={}", path_str(&d.path().join("trajectories.json")));
        let o = beamcast(&["dataset", "--out", out, "--set", &traj, "--set", "window_stride=3"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trajectories.json", "trace_000.csv", "trace_001.csv", "dataset.bpds"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
}

#[test]
fn lstm_training_is_deterministic_and_evaluable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = path_str(d.path());
        let o = beamcast(&[
            "dataset", "--out", out, "--set", "num_trajectories=2", "--set", "num_slots=70",
            "--set", "window_stride=4",
        ]);
        assert_eq!(o.status.code(), Some(0));
        let ds = format!("dataset={}", path_str(&d.path().join("dataset.bpds")));
        let o = beamcast(&[
            "train", "lstm", "--out", out, "--set", &ds, "--set", "epochs=2", "--set",
            "hidden_size=8", "--set", "layers=1", "--set", "batch_size=4",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["lstm.ckpt", "lstm.ckpt.cfg"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
    let ck = format!("lstm_checkpoint={}", path_str(&a.path().join("lstm.ckpt")));
    let o = beamcast(&[
        "eval", "--out", path_str(a.path()), "--set", "predictor=lstm", "--set", &ck,
        "--set", "speeds=10", "--set", "test_trajectories=2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("lstm overall"));
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = beamcast(&[
        "eval", "--out", path_str(dir.path()), "--set", "predictor=forecaster",
        "--set", "checkpoint=/nonexistent/f.ckpt",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

fn config_hash(extra: &[&str]) -> String {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "eval", "--out", path_str(dir.path()), "--set", "speeds=10", "--set", "test_trajectories=2",
    ];
    args.extend_from_slice(extra);
    let o = beamcast(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text.lines().next().unwrap();
    line.split_whitespace().last().unwrap().to_string()
}

#[test]
fn overrides_change_the_config_hash() {
    let base = config_hash(&[]);
    assert_eq!(base, config_hash(&[]));
    assert_ne!(base, config_hash(&["--set", "test_seed=1"]));
    assert_ne!(base, config_hash(&["--set", "predictor=linear"]));
}

#[test]
fn config_file_and_override_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# test\nspeeds = 10\ntest_trajectories = 2\ntest_seed = 1\n").unwrap();
    let from_file = {
        let o = beamcast(&["eval", "--out", path_str(dir.path()), "--config", path_str(&cfg), "--set", "test_seed=0"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o).lines().next().unwrap().split_whitespace().last().unwrap().to_string()
    };
    assert_eq!(from_file, config_hash(&["--set", "test_seed=0"]));
}
