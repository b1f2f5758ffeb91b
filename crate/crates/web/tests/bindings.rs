use posematch_web::{auc_json, run_demo_json, sinkhorn_json};

#[test]
fn demo_runs_and_is_deterministic() {
    let run = || {
        let mut v: serde_json::Value = serde_json::from_str(&run_demo_json("easy", 4, "adaptive", true, 0).unwrap()).unwrap();
        for it in v["iterations"].as_array_mut().unwrap() {
            it["ms"] = 0.0.into();
        }
        v
    };
    let v = run();
    assert_eq!(v, run());
    assert_eq!(v["x"].as_array().unwrap().len(), 1024);
    assert!(v["rot_err"].as_f64().unwrap() < 5.0);
    assert!(v["precision"].as_f64().unwrap() > 0.9);
}

#[test]
fn demo_rejects_bad_names() {
    assert!(run_demo_json("extreme", 1, "off", true, 0).is_err());
    assert!(run_demo_json("easy", 1, "maybe", true, 0).is_err());
}

#[test]
fn sinkhorn_playground_matches_the_diagonal() {
    let out = sinkhorn_json("0.1, 0.9, 0.9; 0.9, 0.1, 0.9\n0.9 0.9 0.1", 10.0, -6.0, 10, 0.2).unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let e = v["expanded"].as_array().unwrap();
    assert_eq!(e.len(), 4);
    assert_eq!(e[0].as_array().unwrap().len(), 4);
    let m: Vec<(usize, usize)> =
        v["matches"].as_array().unwrap().iter().map(|t| (t[0].as_u64().unwrap() as usize, t[1].as_u64().unwrap() as usize)).collect();
    assert_eq!(m, vec![(0, 0), (1, 1), (2, 2)]);
    assert!(sinkhorn_json("0.1, x", 10.0, -6.0, 10, 0.2).is_err());
    assert!(sinkhorn_json("0.1, 0.2; 0.3", 10.0, -6.0, 10, 0.2).is_err());
}

#[test]
fn auc_calculator() {
    // One perfect pair and one failure: AUC = 0.5 at every threshold.
    let v: Vec<(f64, f64)> = serde_json::from_str(&auc_json("0, inf").unwrap()).unwrap();
    assert_eq!(v.len(), 3);
    for (_, a) in v {
        assert!((a - 0.5).abs() < 1e-12);
    }
    // A single error of 5°: recall steps to 1 at 5, so AUC@10 = 0.5, AUC@20 = 0.75.
    let v: Vec<(f64, f64)> = serde_json::from_str(&auc_json("5").unwrap()).unwrap();
    assert!((v[1].1 - 0.5).abs() < 1e-12 && (v[2].1 - 0.75).abs() < 1e-12);
    assert!(auc_json("").is_err());
}
