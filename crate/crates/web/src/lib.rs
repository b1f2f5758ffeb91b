//! Browser bindings. Each export takes plain arguments and returns JSON; the
//! `*_json` functions hold the logic so they can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use posematch_core::driver::{run_pair, IterationRecord, PipelineConfig, PoolingMode};
use posematch_core::epipolar::pose_error_parts;
use posematch_core::numerics::DenseMatrix;
use posematch_core::synthbench::{auc_exact, generate_scene, match_metrics, Tier, AUC_THRESHOLDS};
use posematch_core::transport::{extract_matches, sinkhorn, SinkhornParams};

#[derive(Serialize)]
struct DemoMatch {
    i: usize,
    j: usize,
    correct: bool,
}

#[derive(Serialize)]
struct DemoOutput {
    width: f64,
    height: f64,
    x: Vec<[f64; 2]>,
    y: Vec<[f64; 2]>,
    matches: Vec<DemoMatch>,
    /// Keypoints still active in the last iteration.
    active_x: Vec<usize>,
    active_y: Vec<usize>,
    iterations: Vec<IterationRecord>,
    rescued: usize,
    rot_err: Option<f64>,
    trans_err: Option<f64>,
    precision: f64,
    matching_score: f64,
}

pub fn run_demo_json(tier: &str, seed: u64, pooling: &str, early_stop: bool, twins: usize) -> Result<String, String> {
    let tier: Tier = tier.parse()?;
    let pooling: PoolingMode = pooling.parse()?;
    let mut params = tier.params();
    params.twins = twins;
    let scene = generate_scene(&params, seed).map_err(|e| e.to_string())?;
    let (x, y) = scene.keypoint_sets().map_err(|e| e.to_string())?;
    let cfg = PipelineConfig { pooling, early_stop, seed, ..PipelineConfig::default() };
    let result = run_pair(&x, &y, None, &cfg).map_err(|e| e.to_string())?;

    let gt: std::collections::HashSet<(usize, usize)> = scene.gt_pairs.iter().copied().collect();
    let pairs: Vec<(usize, usize)> = result.matches.iter().map(|m| (m.i, m.j)).collect();
    let metrics = match_metrics(&pairs, &scene.gt_pairs, x.len(), y.len());
    let errs = result.relative_pose.as_ref().map(|p| pose_error_parts(p, &scene.pose));
    let (active_x, active_y) = result.active_history.last().cloned().unwrap_or_default();
    let out = DemoOutput {
        width: scene.image_size.0,
        height: scene.image_size.1,
        x: scene.keypoints_x.iter().map(|k| [k.u, k.v]).collect(),
        y: scene.keypoints_y.iter().map(|k| [k.u, k.v]).collect(),
        matches: pairs.iter().map(|&(i, j)| DemoMatch { i, j, correct: gt.contains(&(i, j)) }).collect(),
        active_x,
        active_y,
        iterations: result.trace.iteration.clone(),
        rescued: result.trace.rescued,
        rot_err: errs.map(|e| e.0),
        trans_err: errs.map(|e| e.1),
        precision: metrics.precision,
        matching_score: metrics.matching_score,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SinkhornOutput {
    /// `(m+1)×(n+1)` rows, dustbins last.
    expanded: Vec<Vec<f64>>,
    matches: Vec<(usize, usize, f64)>,
}

/// `distances`: rows separated by newlines or `;`, entries by commas or spaces.
pub fn sinkhorn_json(distances: &str, beta: f64, alpha: f64, iterations: usize, threshold: f64) -> Result<String, String> {
    let rows: Vec<Vec<f64>> = distances
        .split(['\n', ';'])
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            r.split([',', ' ', '\t'])
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: `{t}`")))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let d = DenseMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
    let mm = sinkhorn(&d, &SinkhornParams { iterations, beta, alpha }).map_err(|e| e.to_string())?;
    let e = mm.expanded();
    let out = SinkhornOutput {
        expanded: (0..e.rows()).map(|i| e.row(i).to_vec()).collect(),
        matches: extract_matches(&mm, threshold, true).into_iter().map(|m| (m.i, m.j, m.score)).collect(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Pose errors in degrees, comma/whitespace separated; `inf` marks a failure.
pub fn auc_json(errors: &str) -> Result<String, String> {
    let errors: Vec<f64> = errors
        .split([',', ' ', '\n', '\t'])
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: `{t}`")))
        .collect::<Result<_, _>>()?;
    let auc = auc_exact(&errors, &AUC_THRESHOLDS).map_err(|e| e.to_string())?;
    let out: Vec<(f64, f64)> = AUC_THRESHOLDS.iter().copied().zip(auc).collect();
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn run_demo(tier: &str, seed: u64, pooling: &str, early_stop: bool, twins: usize) -> Result<String, JsValue> {
    run_demo_json(tier, seed, pooling, early_stop, twins).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sinkhorn_playground(distances: &str, beta: f64, alpha: f64, iterations: usize, threshold: f64) -> Result<String, JsValue> {
    sinkhorn_json(distances, beta, alpha, iterations, threshold).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn pose_auc(errors: &str) -> Result<String, JsValue> {
    auc_json(errors).map_err(|e| JsValue::from_str(&e))
}
