use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mfk(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mfk"));
    cmd.args(args).env_remove("MFK_THREADS");
    if let Some(t) = threads {
        cmd.env("MFK_THREADS", t);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_session(dir: &Path, seed: &str) -> std::path::PathBuf {
    let spec = dir.join("spec.json");
    fs::write(&spec, r#"{"frames": 60, "rom_frames": 30, "drop": [40, 50]}"#).unwrap();
    let out = dir.join(format!("session{seed}"));
    let o = mfk(&["gen-synthetic", "--seed", seed, "--config", s(&spec), "--out", s(&out)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn gen_synthetic_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_session(dir.path(), "7");
    let b = dir.path().join("again");
    let spec = dir.path().join("spec.json");
    assert_eq!(code(&mfk(&["gen-synthetic", "--seed", "7", "--config", s(&spec), "--out", s(&b)], None)), 0);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "metrics.json"));
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_file() {
            assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap(), "{n:?}");
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = mfk(&["track-objects", "--session", s(&missing), "--out", s(&dir.path().join("t"))], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[validation]"));

    let session = small_session(dir.path(), "3");
    // Writing into the session is refused.
    let o = mfk(&["track-objects", "--session", s(&session), "--out", s(&session.join("out"))], None);
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    let o = mfk(&["track-objects", "--session", s(&session), "--config", s(&bad), "--out", s(&dir.path().join("t2"))], None);
    assert_eq!(code(&o), 2);

    let starve = dir.path().join("starve.json");
    fs::write(&starve, r#"{"min_corners": 100000}"#).unwrap();
    let o = mfk(&["calibrate-body", "--session", s(&session), "--config", s(&starve), "--out", s(&dir.path().join("cb"))], None);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let o = mfk(&["gen-synthetic", "--seed", "1", "--out", s(&dir.path().join("g"))], Some("zero"));
    assert_eq!(code(&o), 2);
}

#[test]
fn drop_recover_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dr");
    let o = mfk(&["evaluate", "drop-recover", "--windows", "5,15,30,60", "--frames", "600", "--placements", "4", "--seed", "2", "--out", s(&out)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(&out.join("drop_recover.csv"));
    assert_eq!(rows[0][0], "window");
    let windows: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(windows, ["5", "15", "30", "60"]);
    for r in &rows[1..] {
        let fill: f64 = r[2].parse().unwrap();
        let lerp: f64 = r[4].parse().unwrap();
        assert!(fill.is_finite() && lerp.is_finite());
    }
    assert!(out.join("wrist_recover.csv").is_file());
    assert!(out.join("metrics.json").is_file());
}

#[test]
fn occlusion_study_and_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path, threads: Option<&str>| {
        let args =
            ["simulate", "occlusion", "--markers", "4,7,10,20,40", "--window", "60", "--cameras", "20", "--frames", "300", "--seed", "4", "--out", s(out)];
        let o = mfk(&args, threads);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&a, None);
    run(&b, Some("1"));
    let rows = csv(&a.join("occlusion.csv"));
    assert_eq!(rows[0], ["size", "mean", "stddev", "samples"]);
    let means: Vec<f64> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(means.len(), 5);
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");
    assert_eq!(fs::read(a.join("occlusion.csv")).unwrap(), fs::read(b.join("occlusion.csv")).unwrap());
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
}

#[test]
fn camera_study_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = mfk(&["simulate", "cameras", "--cameras", "20", "--frames", "120", "--sizes", "5,10,20", "--samples", "20", "--seed", "1", "--out", s(&out)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["results"]["full_rig_ratio"].as_f64(), Some(1.0));
    assert_eq!(m["results"]["monotone_2pct"], true);
    assert_eq!(m["seed"], 1);
}
