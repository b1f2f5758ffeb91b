use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::metrics::{auc_exact, match_metrics, AUC_THRESHOLDS};
use super::scene::{SyntheticScene, Tier};
use crate::attention::Model;
use crate::driver::{derive_seed, run_pair, PairResult, PipelineConfig, PoolingMode};
use crate::epipolar::pose_error_parts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub name: String,
    pub pipeline: PipelineConfig,
}

impl BenchConfig {
    pub fn new(name: impl Into<String>, pipeline: PipelineConfig) -> Self {
        Self { name: name.into(), pipeline }
    }
}

/// IMP, EIMP, R50 and IMP without early stopping, all from `base`.
pub fn standard_configs(base: &PipelineConfig) -> Vec<BenchConfig> {
    let with = |pooling, early_stop| PipelineConfig { pooling, early_stop, ..*base };
    vec![
        BenchConfig::new("imp", with(PoolingMode::Off, true)),
        BenchConfig::new("eimp", with(PoolingMode::Adaptive, true)),
        BenchConfig::new("r50", with(PoolingMode::R50, true)),
        BenchConfig::new("imp-nostop", with(PoolingMode::Off, false)),
    ]
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub seed: u64,
    pub tier: Tier,
    pub config: String,
    /// Degrees; empty when no pose was recovered.
    pub rot_err: Option<f64>,
    pub trans_err: Option<f64>,
    pub n_matches: usize,
    pub precision: f64,
    pub matching_score: f64,
    pub iters: usize,
    pub rescued: usize,
    pub error: Option<String>,
}

impl PairRecord {
    /// `max(rot, trans)`, `+∞` on failure.
    pub fn pose_error(&self) -> f64 {
        match (self.rot_err, self.trans_err) {
            (Some(r), Some(t)) => r.max(t),
            _ => f64::INFINITY,
        }
    }
}

/// All results for one scene; the unit of caching and parallelism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub seed: u64,
    pub tier: Tier,
    pub records: Vec<PairRecord>,
    /// Per pooled config: fraction of the reference run's final matched
    /// keypoints still active at each iteration.
    pub retention: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config: String,
    pub tier: Tier,
    pub pairs: usize,
    pub failures: usize,
    pub auc5: f64,
    pub auc10: f64,
    pub auc20: f64,
    pub mean_matching_score: f64,
    pub mean_precision: f64,
    pub mean_iters: f64,
    /// `iteration_histogram[k]` pairs ended after `k` iterations.
    pub iteration_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub config: String,
    pub tier: Tier,
    pub reference: String,
    /// Mean retention per iteration over scenes reaching it.
    pub retention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub configs: Vec<BenchConfig>,
    pub summaries: Vec<ConfigSummary>,
    pub retention: Vec<RetentionCurve>,
    pub pairs: Vec<PairRecord>,
}

fn reference_config(configs: &[BenchConfig]) -> Option<&BenchConfig> {
    configs.iter().find(|c| c.pipeline.pooling == PoolingMode::Off && !c.pipeline.early_stop)
}

/// Retention of `reference`'s final matched keypoints in each iteration's
/// active sets of `pooled`.
pub fn retention_curve(reference: &PairResult, pooled: &PairResult) -> Option<Vec<f64>> {
    let fx: HashSet<usize> = reference.matches.iter().map(|m| m.i).collect();
    let fy: HashSet<usize> = reference.matches.iter().map(|m| m.j).collect();
    let total = fx.len() + fy.len();
    if total == 0 {
        return None;
    }
    Some(
        pooled
            .active_history
            .iter()
            .map(|(ax, ay)| {
                let kept = ax.iter().filter(|i| fx.contains(i)).count() + ay.iter().filter(|j| fy.contains(j)).count();
                kept as f64 / total as f64
            })
            .collect(),
    )
}

fn record(scene: &SyntheticScene, config: &BenchConfig, result: Result<&PairResult, String>) -> PairRecord {
    let mut rec = PairRecord {
        seed: scene.seed,
        tier: scene.tier,
        config: config.name.clone(),
        rot_err: None,
        trans_err: None,
        n_matches: 0,
        precision: 1.0,
        matching_score: 0.0,
        iters: 0,
        rescued: 0,
        error: None,
    };
    match result {
        Ok(r) => {
            let pairs: Vec<(usize, usize)> = r.matches.iter().map(|m| (m.i, m.j)).collect();
            let mm = match_metrics(&pairs, &scene.gt_pairs, scene.keypoints_x.len(), scene.keypoints_y.len());
            if let Some(p) = &r.relative_pose {
                let (rot, trans) = pose_error_parts(p, &scene.pose);
                rec.rot_err = Some(rot);
                rec.trans_err = Some(trans);
            }
            rec.n_matches = pairs.len();
            rec.precision = mm.precision;
            rec.matching_score = mm.matching_score;
            rec.iters = r.trace.total_iters;
            rec.rescued = r.trace.rescued;
        }
        Err(e) => rec.error = Some(e),
    }
    rec
}

/// Runs every config on one scene. Failures are recorded per pair.
pub fn evaluate_scene(scene: &SyntheticScene, configs: &[BenchConfig], model: Option<&Model>) -> SceneOutcome {
    let sets = scene.keypoint_sets().map_err(|e| e.to_string());
    let results: Vec<Result<PairResult, String>> = configs
        .iter()
        .map(|c| {
            let (x, y) = sets.as_ref().map_err(Clone::clone)?;
            let cfg = PipelineConfig { seed: derive_seed(c.pipeline.seed, scene.seed), ..c.pipeline };
            run_pair(x, y, model, &cfg).map_err(|e| e.to_string())
        })
        .collect();
    let records = configs.iter().zip(&results).map(|(c, r)| record(scene, c, r.as_ref().map_err(Clone::clone))).collect();

    let mut retention = BTreeMap::new();
    if let Some(reference) = reference_config(configs) {
        let ref_idx = configs.iter().position(|c| c.name == reference.name).expect("present");
        if let Ok(ref_result) = &results[ref_idx] {
            for (c, r) in configs.iter().zip(&results) {
                if let (PoolingMode::Adaptive | PoolingMode::R50, Ok(r)) = (c.pipeline.pooling, r) {
                    if let Some(curve) = retention_curve(ref_result, r) {
                        retention.insert(c.name.clone(), curve);
                    }
                }
            }
        }
    }
    SceneOutcome { seed: scene.seed, tier: scene.tier, records, retention }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Aggregates outcomes (in their given order) into a report.
pub fn assemble_report(outcomes: &[SceneOutcome], configs: &[BenchConfig]) -> EvalReport {
    let mut tiers: Vec<Tier> = Vec::new();
    for o in outcomes {
        if !tiers.contains(&o.tier) {
            tiers.push(o.tier);
        }
    }
    let pairs: Vec<PairRecord> = outcomes.iter().flat_map(|o| o.records.iter().cloned()).collect();
    let mut summaries = Vec::new();
    let mut retention = Vec::new();
    for &tier in &tiers {
        for c in configs {
            let recs: Vec<&PairRecord> = pairs.iter().filter(|p| p.tier == tier && p.config == c.name).collect();
            if recs.is_empty() {
                continue;
            }
            let errors: Vec<f64> = recs.iter().map(|r| r.pose_error()).collect();
            let auc = auc_exact(&errors, &AUC_THRESHOLDS).expect("non-empty, non-negative");
            let mut hist = vec![0; c.pipeline.t_max + 1];
            for r in &recs {
                if r.iters < hist.len() {
                    hist[r.iters] += 1;
                }
            }
            summaries.push(ConfigSummary {
                config: c.name.clone(),
                tier,
                pairs: recs.len(),
                failures: errors.iter().filter(|e| e.is_infinite()).count(),
                auc5: auc[0],
                auc10: auc[1],
                auc20: auc[2],
                mean_matching_score: mean(recs.iter().map(|r| r.matching_score)),
                mean_precision: mean(recs.iter().map(|r| r.precision)),
                mean_iters: mean(recs.iter().map(|r| r.iters as f64)),
                iteration_histogram: hist,
            });
            if let Some(reference) = reference_config(configs).filter(|_| c.pipeline.pooling != PoolingMode::Off) {
                let curves: Vec<&Vec<f64>> =
                    outcomes.iter().filter(|o| o.tier == tier).filter_map(|o| o.retention.get(&c.name)).collect();
                let len = curves.iter().map(|v| v.len()).max().unwrap_or(0);
                let per_iter = (0..len).map(|t| mean(curves.iter().filter_map(|v| v.get(t).copied()))).collect();
                retention.push(RetentionCurve { config: c.name.clone(), tier, reference: reference.name.clone(), retention: per_iter });
            }
        }
    }
    EvalReport { thresholds: AUC_THRESHOLDS.to_vec(), configs: configs.to_vec(), summaries, retention, pairs }
}

/// Evaluates `scenes` under `configs` on `jobs` threads; the report does
/// not depend on `jobs`.
pub fn run_benchmark(scenes: &[SyntheticScene], configs: &[BenchConfig], model: Option<&Model>, jobs: usize) -> EvalReport {
    let outcomes = map_scenes(scenes, jobs, |s| evaluate_scene(s, configs, model));
    assemble_report(&outcomes, configs)
}

/// Order-preserving map over scenes, parallel when built with `parallel`.
pub fn map_scenes<T: Send>(scenes: &[SyntheticScene], jobs: usize, f: impl Fn(&SyntheticScene) -> T + Sync) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(|| scenes.par_iter().map(&f).collect());
        }
    }
    let _ = jobs;
    scenes.iter().map(f).collect()
}
