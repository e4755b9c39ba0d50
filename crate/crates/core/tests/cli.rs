use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn exe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aerotact"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    exe().args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_logs_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("balloon.cfg");
    let out = run(&["run", path_str(&cfg), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ticks = std::fs::read_to_string(dir.path().join("ticks.csv")).unwrap();
    assert!(ticks.starts_with("t,px,py,pz,"));
    assert_eq!(ticks.lines().count(), 1501);
    let forces = std::fs::read_to_string(dir.path().join("forces.csv")).unwrap();
    assert!(forces.starts_with("t,node,fx,fy,fz,fext_x,fext_y,fext_z,f_g,flags"));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metrics.lines().all(|l| l.contains(" = ")));
    assert!(metrics.contains("burst = false"));
}

#[test]
fn validate_rejects_broken_config_with_paths() {
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.cfg");
    std::fs::write(&broken, "scenario = \"custom\"\nduration = 5.0\ncontrol.K.q = 1.0\n").unwrap();
    let out = run(&["validate", path_str(&broken)]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("control.K.q"), "{stderr}");

    std::fs::write(&broken, "scenario = \"custom\"\nduration = -5.0\ngrasp.B = 0.0\n").unwrap();
    let out = run(&["validate", path_str(&broken)]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("duration: must be positive"), "{stderr}");
    assert!(stderr.contains("grasp.B"), "{stderr}");

    let out = run(&["run", path_str(&broken)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_prints_canonical_form() {
    let out = run(&["validate", path_str(&configs().join("bottle.cfg"))]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("object.kind = \"bottle\""));
    let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn ablate_writes_both_runs_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["ablate", path_str(&configs().join("bottle.cfg")), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for side in ["with", "without"] {
        assert!(dir.path().join(side).join("ticks.csv").is_file());
        assert!(dir.path().join(side).join("metrics.txt").is_file());
    }
    let cmp = std::fs::read_to_string(dir.path().join("comparison.txt")).unwrap();
    assert!(cmp.contains("ground = false | true"), "{cmp}");
}

#[test]
fn sweep_and_calibrate_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("sweep.cfg");
    let out = run(&["sweep", path_str(&cfg), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("sweep_node1.csv").is_file());
    let out = run(&["calibrate", path_str(&cfg), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let bundle = std::fs::read_to_string(dir.path().join("calibration.toml")).unwrap();
    let parsed = aerotact::tactile::CalibrationBundle::from_toml_str(&bundle).unwrap();
    assert_eq!(parsed.sensors.len(), 6);
}

#[test]
fn run_with_calibration_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["calibrate", path_str(&configs().join("sweep.cfg")), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = dir.path().join("bottle.cfg");
    let mut text = std::fs::read_to_string(configs().join("bottle.cfg")).unwrap();
    text.push_str(&format!("sensors.calibration_file = {:?}\n", path_str(&dir.path().join("calibration.toml"))));
    std::fs::write(&cfg, text).unwrap();
    let out = run(&["run", path_str(&cfg), "--out", path_str(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = dir.path().join("missing.cfg");
    std::fs::write(&missing, "scenario = \"custom\"\nduration = 1.0\nsensors.calibration_file = \"/nonexistent.toml\"\n").unwrap();
    assert_eq!(run(&["run", path_str(&missing)]).status.code(), Some(1));
}

#[test]
fn divergence_exits_two_with_partial_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("unstable.cfg");
    std::fs::write(
        &cfg,
        "scenario = \"custom\"\nduration = 3.0\nhover = { x = 0.5, y = 0.0, z = 1.0 }\n\
         control.kp_omega = { x = 1000.0, y = 1000.0, z = 1000.0 }\n",
    )
    .unwrap();
    let out = run(&["run", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let metrics = std::fs::read_to_string(dir.path().join("o/metrics.txt")).unwrap();
    assert!(metrics.contains("completed = false"));
    assert!(metrics.contains("error = "));
}

#[test]
fn replay_decodes_recorded_stream() {
    let dir = tempfile::tempdir().unwrap();
    let stream = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_stream.bin");
    let out = run(&["replay", path_str(&stream), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("frames = 349"));
    assert!(stdout.contains("framing_errors = 1"));
    assert!(dir.path().join("replay.csv").is_file());
}

#[test]
fn usage_errors_are_nonzero() {
    assert_ne!(run(&[]).status.code(), Some(0));
    assert_ne!(run(&["launch", "x.cfg"]).status.code(), Some(0));
    assert_eq!(run(&["run", "/nonexistent.cfg"]).status.code(), Some(1));
}

#[test]
fn seed_override_changes_noise_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("balloon.cfg");
    let mut logs = Vec::new();
    for seed in ["7", "8"] {
        let o = dir.path().join(seed);
        assert_eq!(run(&["run", path_str(&cfg), "--seed", seed, "--out", path_str(&o)]).status.code(), Some(0));
        logs.push(std::fs::read_to_string(o.join("ticks.csv")).unwrap());
    }
    assert_ne!(logs[0], logs[1]);
    assert_eq!(logs[0].lines().count(), logs[1].lines().count());
}
