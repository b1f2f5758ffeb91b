use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn posematch(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posematch")).args(args).current_dir(cwd).output().expect("spawn posematch")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn synth(dir: &Path, tier: &str, count: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--tier", tier, "--count", count, "--seed", "11", "-o", "ds"];
    args.extend_from_slice(extra);
    ok(&posematch(&args, dir));
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    synth(a.path(), "medium", "2", &[]);
    synth(b.path(), "medium", "2", &[]);
    for f in ["scene-medium-0000.json", "scene-medium-0001.json", "manifest-medium.json"] {
        assert_eq!(read(a.path().join("ds").join(f)), read(b.path().join("ds").join(f)), "{f}");
    }
}

#[test]
fn synth_count_zero_writes_manifest_only() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "hard", "0", &[]);
    let names: Vec<_> = std::fs::read_dir(d.path().join("ds")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("manifest-hard.json")]);
    let m: serde_json::Value = serde_json::from_slice(&read(d.path().join("ds/manifest-hard.json"))).unwrap();
    assert_eq!(m["scenes"].as_array().unwrap().len(), 0);
}

#[test]
fn match_scene_reports_pose_and_gt() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "easy", "1", &[]);
    let out = posematch(&["match", "--scene", "ds/scene-easy-0000.json", "--no-timing"], d.path());
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["final_pose"].is_array());
    assert!(v["gt"]["rot_err"].as_f64().unwrap() < 5.0);
    assert!(v["iteration"].as_array().unwrap().iter().all(|r| r["ms"].as_f64() == Some(0.0)));
}

#[test]
fn match_no_timing_is_byte_stable() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "easy", "1", &[]);
    let args = ["match", "--scene", "ds/scene-easy-0000.json", "--no-timing", "--pooling", "adaptive"];
    assert_eq!(ok(&posematch(&args, d.path())), ok(&posematch(&args, d.path())));
}

#[test]
fn adaptive_pooling_never_grows_kept_counts() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "medium", "1", &[]);
    let out = posematch(&["match", "--scene", "ds/scene-medium-0000.json", "--pooling", "adaptive", "--no-stop"], d.path());
    let v: serde_json::Value = serde_json::from_slice(ok(&out).as_bytes()).unwrap();
    let iters = v["iteration"].as_array().unwrap();
    assert_eq!(iters.len(), 9);
    for w in iters.windows(2) {
        for key in ["kept_x", "kept_y"] {
            assert!(w[1][key].as_u64() <= w[0][key].as_u64(), "{key}: {} -> {}", w[0][key], w[1][key]);
        }
    }
    assert!(iters.last().unwrap()["kept_x"].as_u64().unwrap() < 1024);
}

#[test]
fn match_without_pose_exits_2() {
    let d = TempDir::new().unwrap();
    // Fewer keypoints than the RANSAC minimum: the run completes but finds no pose.
    let mut csv = String::from("u,v,c,d0,d1\n");
    for i in 0..6 {
        csv += &format!("{},{},0.9,{},{}\n", 10 * i, 20 + i, (i as f64).cos(), (i as f64).sin());
    }
    std::fs::write(d.path().join("a.csv"), &csv).unwrap();
    std::fs::write(d.path().join("b.csv"), &csv).unwrap();
    let out = posematch(&["match", "--x", "a.csv", "--y", "b.csv"], d.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["final_pose"].is_null());
}

fn match_exported(dir: &Path, ext: &str) -> serde_json::Value {
    let x = format!("ds/keypoints-easy-0000-x.{ext}");
    let y = format!("ds/keypoints-easy-0000-y.{ext}");
    let args = [
        "match", "--x", &x, "--y", &y, "--no-timing",
        "--intrinsics-x", "500,500,320,240", "--intrinsics-y", "520,515,318,242",
    ];
    serde_json::from_str(&ok(&posematch(&args, dir))).unwrap()
}

#[test]
fn exported_keypoints_round_trip_through_match() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "easy", "1", &["--export", "csv"]);
    synth(d.path(), "easy", "1", &["--export", "impk"]);
    let from_scene: serde_json::Value =
        serde_json::from_str(&ok(&posematch(&["match", "--scene", "ds/scene-easy-0000.json", "--no-timing"], d.path()))).unwrap();
    // CSV keeps full precision: identical run.
    let csv = match_exported(d.path(), "csv");
    assert_eq!(csv["matches"], from_scene["matches"]);
    assert_eq!(csv["final_pose"], from_scene["final_pose"]);
    // IMPK stores f32: same geometry up to rounding.
    let impk = match_exported(d.path(), "impk");
    let a: Vec<f64> = serde_json::from_value(impk["final_pose"].clone()).unwrap();
    let b: Vec<f64> = serde_json::from_value(from_scene["final_pose"].clone()).unwrap();
    let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
    let cos = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    assert!(cos.abs() > 0.999, "cos {cos}");
}

#[test]
fn missing_descriptor_column_is_input_error() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("a.csv"), "u,v,c,d0,d1\n1,2,0.5,0.1,0.2\n").unwrap();
    std::fs::write(d.path().join("b.csv"), "u,v,c,d0\n1,2,0.5,0.1\n").unwrap();
    let out = posematch(&["match", "--x", "a.csv", "--y", "b.csv"], d.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_flag_and_bad_config_exit_1() {
    let d = TempDir::new().unwrap();
    assert_eq!(posematch(&["synth", "--frobnicate"], d.path()).status.code(), Some(1));
    std::fs::write(d.path().join("c.json"), r#"{"t_max": 3, "bogus": 1}"#).unwrap();
    synth(d.path(), "easy", "1", &[]);
    let out = posematch(&["match", "--scene", "ds/scene-easy-0000.json", "--config", "c.json"], d.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "medium", "1", &[]);
    std::fs::write(d.path().join("c.json"), r#"{"t_max": 3, "early_stop": false}"#).unwrap();
    let run = |extra: &[&str]| -> serde_json::Value {
        let mut args = vec!["match", "--scene", "ds/scene-medium-0000.json", "--config", "c.json"];
        args.extend_from_slice(extra);
        serde_json::from_str(&ok(&posematch(&args, d.path()))).unwrap()
    };
    assert_eq!(run(&[])["iteration"].as_array().unwrap().len(), 3);
    let v = run(&["--t-max", "5"]);
    assert_eq!(v["iteration"].as_array().unwrap().len(), 5);
    assert_eq!(v["config"]["t_max"], 5);
}

fn auc_from_errors(errors: &[f64], threshold: f64) -> f64 {
    // Independent oracle: trapezoid of the empirical recall curve on a fine grid.
    let steps = 200_000;
    let h = threshold / steps as f64;
    let recall = |x: f64| errors.iter().filter(|&&e| e <= x).count() as f64 / errors.len() as f64;
    let mut s = 0.0;
    for k in 0..steps {
        s += 0.5 * (recall(k as f64 * h) + recall((k + 1) as f64 * h)) * h;
    }
    s / threshold
}

#[test]
fn eval_report_shape_and_auc_recomputed_from_csv() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "medium", "3", &[]);
    let out = ok(&posematch(&["eval", "ds", "--configs", "imp,eimp", "-o", "ev"], d.path()));
    assert!(out.lines().next().unwrap().starts_with("config"));
    assert_eq!(out.lines().count(), 3);

    let report: serde_json::Value = serde_json::from_slice(&read(d.path().join("ev/report.json"))).unwrap();
    assert_eq!(report["pairs"].as_array().unwrap().len(), 6);
    let mut rdr = csv::Reader::from_path(d.path().join("ev/report.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let h = rdr.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    for summary in report["summaries"].as_array().unwrap() {
        let cfg = summary["config"].as_str().unwrap();
        let errors: Vec<f64> = rows
            .iter()
            .filter(|r| &r[col("config")] == cfg)
            .map(|r| {
                let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::INFINITY);
                parse(&r[col("rot_err")]).max(parse(&r[col("trans_err")]))
            })
            .collect();
        for (key, t) in [("auc5", 5.0), ("auc10", 10.0), ("auc20", 20.0)] {
            let want = auc_from_errors(&errors, t);
            let got = summary[key].as_f64().unwrap();
            assert!((got - want).abs() < 1e-4, "{cfg} {key}: {got} vs {want}");
        }
    }
}

#[test]
fn eval_resume_reuses_cache_and_matches() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "easy", "2", &[]);
    ok(&posematch(&["eval", "ds", "--configs", "eimp", "-o", "ev"], d.path()));
    let first = read(d.path().join("ev/report.json"));
    let cache: Vec<_> = std::fs::read_dir(d.path().join("ev/cache")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(cache.len(), 2);
    ok(&posematch(&["eval", "ds", "--configs", "eimp", "-o", "ev", "--resume"], d.path()));
    assert_eq!(first, read(d.path().join("ev/report.json")));
    // A different config list must not hit the old entries.
    ok(&posematch(&["eval", "ds", "--configs", "imp", "-o", "ev", "--resume"], d.path()));
    assert_eq!(std::fs::read_dir(d.path().join("ev/cache")).unwrap().count(), 4);
}

#[test]
fn eval_jobs_do_not_change_the_report() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "hard", "3", &[]);
    ok(&posematch(&["eval", "ds", "--configs", "imp,r50", "-o", "e1", "--jobs", "1"], d.path()));
    ok(&posematch(&["eval", "ds", "--configs", "imp,r50", "-o", "e3", "--jobs", "3"], d.path()));
    assert_eq!(read(d.path().join("e1/report.json")), read(d.path().join("e3/report.json")));
    assert_eq!(read(d.path().join("e1/report.csv")), read(d.path().join("e3/report.csv")));
}

#[test]
fn weights_init_random_and_inspect() {
    let d = TempDir::new().unwrap();
    ok(&posematch(&["weights", "init-random", "w1.impw", "--seed", "5", "--blocks", "2"], d.path()));
    ok(&posematch(&["weights", "init-random", "w2.impw", "--seed", "5", "--blocks", "2"], d.path()));
    ok(&posematch(&["weights", "init-random", "w3.impw", "--seed", "6", "--blocks", "2"], d.path()));
    assert_eq!(read(d.path().join("w1.impw")), read(d.path().join("w2.impw")));
    assert_ne!(read(d.path().join("w1.impw")), read(d.path().join("w3.impw")));
    let out = ok(&posematch(&["weights", "inspect", "w1.impw"], d.path()));
    assert!(out.contains("architecture d=32 h=4 T=2"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("block1/")));

    let bytes = read(d.path().join("w1.impw"));
    std::fs::write(d.path().join("cut.impw"), &bytes[..bytes.len() / 2]).unwrap();
    let out = posematch(&["weights", "inspect", "cut.impw"], d.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
}

#[test]
fn random_weights_drive_match() {
    let d = TempDir::new().unwrap();
    synth(d.path(), "easy", "1", &[]);
    ok(&posematch(&["weights", "init-random", "w.impw", "--blocks", "2"], d.path()));
    let out = posematch(&["match", "--scene", "ds/scene-easy-0000.json", "--weights", "w.impw", "--t-max", "2"], d.path());
    assert!(matches!(out.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!v["iteration"].as_array().unwrap().is_empty());
}
