//! The iterative pair loop: augmentation, transport, robust pose, stop
//! check and pooling per iteration, then one pose-guided rescue.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{encode_position, iteration_block, AttentionError, AttentionState, KeypointSet, Model};
use crate::epipolar::{
    decompose_essential, epipolar_error, essential_from_fundamental, pose_error, ransac_fundamental, Correspondence,
    EpipolarPose, GeometryError, ImagePoint, RansacParams, RelativePose, ScoredMatch,
};
use crate::pooling::{
    adaptive_sample, parameter_free_scores, pose_uncertainty, r50_sample, PoolingScores, SamplingDecision, ScoredPoints,
    KEYPOINT_FLOOR,
};
use crate::transport::{distance_from_gram, extract_matches, pairwise_distance, sinkhorn, MatchMatrix, SinkhornParams, TransportError};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("image {0} has no keypoints")]
    EmptyImage(char),
    #[error("descriptor dimensions differ: {0} vs {1}")]
    DescriptorDim(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Every keypoint stays active (IMP).
    #[default]
    Off,
    /// Geometry-aware sampling (EIMP).
    Adaptive,
    /// Top-ratio by attention score.
    R50,
}

impl std::str::FromStr for PoolingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(Self::Off),
            "adaptive" => Ok(Self::Adaptive),
            "r50" => Ok(Self::R50),
            other => Err(format!("unknown pooling mode `{other}` (off|adaptive|r50)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub t_max: usize,
    pub theta_m: f64,
    /// Stop threshold on consecutive pose change, degrees.
    pub theta_p: f64,
    /// Sampson bound for pose uncertainty, normalized coordinates.
    pub theta_e: f64,
    pub sinkhorn: SinkhornParams,
    pub pooling: PoolingMode,
    pub r50_ratio: f64,
    pub keypoint_floor: usize,
    pub early_stop: bool,
    pub rescue: bool,
    /// Pixel bound of the pose mask.
    pub rescue_px: f64,
    /// Rescue extraction threshold is `theta_m * rescue_factor`.
    pub rescue_factor: f64,
    pub ransac: RansacParams,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_max: 9,
            theta_m: 0.2,
            theta_p: 1.5,
            theta_e: 0.005,
            sinkhorn: SinkhornParams::default(),
            pooling: PoolingMode::Off,
            r50_ratio: 0.5,
            keypoint_floor: KEYPOINT_FLOOR,
            early_stop: true,
            rescue: true,
            rescue_px: 12.0,
            rescue_factor: 0.5,
            ransac: RansacParams::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), DriverError> {
        let positive = [self.theta_m, self.theta_p, self.theta_e, self.rescue_px, self.rescue_factor, self.r50_ratio];
        if self.t_max == 0 {
            return Err(DriverError::Config("t_max must be at least 1"));
        }
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DriverError::Config("thresholds must be positive and finite"));
        }
        if self.r50_ratio > 1.0 {
            return Err(DriverError::Config("r50_ratio must be in (0, 1]"));
        }
        if self.sinkhorn.iterations == 0 {
            return Err(DriverError::Config("sinkhorn iterations must be at least 1"));
        }
        Ok(())
    }
}

/// SplitMix64 step over `base ^ salt`; decorrelates per-iteration and
/// per-pair seeds.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = (base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub kept_x: usize,
    pub kept_y: usize,
    pub n_matches: usize,
    /// Row-major normalized F, `null` when RANSAC failed this iteration.
    pub pose: Option<[f64; 9]>,
    pub pose_delta_deg: Option<f64>,
    pub r: f64,
    pub stopped: bool,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: Vec<IterationRecord>,
    pub rescued: usize,
    pub total_iters: usize,
    pub final_pose: Option<[f64; 9]>,
}

impl IterationTrace {
    /// Zeroes wall-clock fields so serialized traces compare byte-for-byte.
    pub fn without_timing(mut self) -> Self {
        for it in &mut self.iteration {
            it.ms = 0.0;
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct PairResult {
    /// Final matches in original keypoint indices.
    pub matches: Vec<ScoredMatch>,
    /// Matches of the last iteration before rescue.
    pub pre_rescue: Vec<ScoredMatch>,
    pub pose: Option<EpipolarPose>,
    /// Decomposed relative pose, when both images are calibrated.
    pub relative_pose: Option<RelativePose>,
    pub trace: IterationTrace,
    /// Original indices active during each iteration.
    pub active_history: Vec<(Vec<usize>, Vec<usize>)>,
}

/// True iff both poses exist and differ by less than `theta_p` degrees.
pub fn stop_check(pose_t: Option<&RelativePose>, pose_prev: Option<&RelativePose>, theta_p: f64) -> bool {
    match (pose_t, pose_prev) {
        (Some(a), Some(b)) => pose_error(a, b) < theta_p,
        _ => false,
    }
}

/// Masks `mm` to pairs within `threshold_px` (√Sampson, pixels) of the
/// epipolar geometry of `f`, then extracts mutual matches at
/// `extract_threshold`. Indices are local to `x`/`y`.
pub fn pose_guided_match(
    x: &[ImagePoint],
    y: &[ImagePoint],
    mm: &MatchMatrix,
    f: &EpipolarPose,
    threshold_px: f64,
    extract_threshold: f64,
) -> Vec<ScoredMatch> {
    let masked = mm.masked(|i, j| epipolar_error(f.matrix(), &x[i], &y[j]) <= threshold_px);
    extract_matches(&masked, extract_threshold, true)
}

struct Timer {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Timer {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64() * 1e3;
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

fn relative_pose(f: &EpipolarPose, x: &KeypointSet, y: &KeypointSet, corr: &[(ImagePoint, ImagePoint)]) -> Option<RelativePose> {
    let (k1, k2) = (x.intrinsics()?, y.intrinsics()?);
    let e = essential_from_fundamental(f, k1, k2).ok()?;
    match decompose_essential(&e, corr, k1, k2) {
        Ok(p) => Some(p),
        Err(GeometryError::CheiralityTie { .. }) | Err(_) => None,
    }
}

fn to_original(matches: &[ScoredMatch], ax: &[usize], ay: &[usize]) -> Vec<ScoredMatch> {
    matches.iter().map(|m| ScoredMatch { i: ax[m.i], j: ay[m.j], score: m.score }).collect()
}

/// Runs the full loop on one pair. Pose failures are recorded, never
/// raised; errors are reserved for invalid inputs.
pub fn run_pair(x: &KeypointSet, y: &KeypointSet, model: Option<&Model>, cfg: &PipelineConfig) -> Result<PairResult, DriverError> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(DriverError::EmptyImage('X'));
    }
    if y.is_empty() {
        return Err(DriverError::EmptyImage('Y'));
    }
    if x.descriptor_dim() != y.descriptor_dim() {
        return Err(DriverError::DescriptorDim(x.descriptor_dim(), y.descriptor_dim()));
    }
    let mut sk = cfg.sinkhorn;
    let t_max = match model {
        Some(m) => {
            sk.alpha = m.alpha;
            cfg.t_max.min(m.blocks.len())
        }
        None => cfg.t_max,
    };
    if t_max == 0 {
        return Err(DriverError::Config("model has no attention blocks"));
    }
    let a_x = x.normalizing_transform();
    let a_y = y.normalizing_transform();

    let mut state = match model {
        Some(m) => AttentionState::new(encode_position(x, &m.encoder)?, encode_position(y, &m.encoder)?),
        None => AttentionState::new(x.descriptors().clone(), y.descriptors().clone()),
    };
    let mut records = Vec::with_capacity(t_max);
    let mut history = Vec::with_capacity(t_max);
    let mut carried: Option<EpipolarPose> = None;
    let mut prev_rel: Option<RelativePose> = None;
    let mut last_mm = None;
    let mut last_matches = Vec::new();

    for t in 1..=t_max {
        let timer = Timer::start();
        history.push((state.active_x.clone(), state.active_y.clone()));
        let xc: Vec<ImagePoint> = state.active_x.iter().map(|&i| x.coords()[i]).collect();
        let yc: Vec<ImagePoint> = state.active_y.iter().map(|&j| y.coords()[j]).collect();

        let mut gram = None;
        let d = match model {
            Some(m) => {
                state = iteration_block(&state, &m.blocks[t - 1])?;
                pairwise_distance(&state.x, &state.y)?
            }
            None => {
                let g = state.x.matmul_transposed(&state.y).map_err(AttentionError::from)?;
                let d = distance_from_gram(&state.x, &state.y, &g);
                gram = Some(g);
                d
            }
        };
        let mm = sinkhorn(&d, &sk)?;
        drop(d);
        let matches = extract_matches(&mm, cfg.theta_m, true);
        let corr: Vec<Correspondence> = matches.iter().map(|m| Correspondence::new(xc[m.i], yc[m.j], m.score)).collect();

        let fresh = ransac_fundamental(&corr, &cfg.ransac, derive_seed(cfg.seed, t as u64)).ok();
        let rel = fresh.as_ref().and_then(|(f, inliers)| {
            let pts: Vec<_> = corr.iter().zip(inliers).filter(|(_, &k)| k).map(|(c, _)| (c.x, c.y)).collect();
            relative_pose(f, x, y, &pts)
        });
        let pose_delta_deg = match (&rel, &prev_rel) {
            (Some(a), Some(b)) => Some(pose_error(a, b)),
            _ => None,
        };
        let stopped = cfg.early_stop && stop_check(rel.as_ref(), prev_rel.as_ref(), cfg.theta_p);
        if let Some((f, _)) = &fresh {
            carried = Some(*f);
        }
        prev_rel = rel;

        let r = match &carried {
            Some(f) => {
                let pts: Vec<ScoredPoints> = corr.iter().map(|c| ScoredPoints { x: c.x, y: c.y, score: c.weight }).collect();
                pose_uncertainty(&pts, f.matrix(), &a_x, &a_y, cfg.theta_e, cfg.theta_m)
            }
            None => 0.0,
        };

        if !stopped && t < t_max && cfg.pooling != PoolingMode::Off {
            let scores = match (&state.maps, &gram) {
                (Some(maps), _) => PoolingScores::from_maps(maps),
                (None, Some(g)) => parameter_free_scores(&state.x, &state.y, g)?,
                (None, None) => unreachable!("model iterations always carry maps"),
            };
            let decision = sample(&mm, &scores, cfg, r);
            state.retain(&decision.x.kept, &decision.y.kept);
        }

        records.push(IterationRecord {
            t,
            kept_x: xc.len(),
            kept_y: yc.len(),
            n_matches: matches.len(),
            pose: fresh.as_ref().map(|(f, _)| f.to_row_major()),
            pose_delta_deg,
            r,
            stopped,
            ms: timer.ms(),
        });
        last_matches = to_original(&matches, &history[t - 1].0, &history[t - 1].1);
        last_mm = Some((mm, xc, yc, t - 1));
        if stopped {
            break;
        }
    }

    let mut final_matches = last_matches.clone();
    let mut rescued = 0;
    if let (true, Some(f), Some((mm, xc, yc, h))) = (cfg.rescue, &carried, &last_mm) {
        let local = pose_guided_match(xc, yc, mm, f, cfg.rescue_px, cfg.theta_m * cfg.rescue_factor);
        rescued = local.len();
        final_matches = to_original(&local, &history[*h].0, &history[*h].1);
    }

    let relative_pose = carried.as_ref().and_then(|f| {
        let pts: Vec<_> = final_matches.iter().map(|m| (x.coords()[m.i], y.coords()[m.j])).collect();
        relative_pose(f, x, y, &pts)
    });
    let trace = IterationTrace {
        total_iters: records.len(),
        iteration: records,
        rescued,
        final_pose: carried.as_ref().map(EpipolarPose::to_row_major),
    };
    Ok(PairResult {
        matches: final_matches,
        pre_rescue: last_matches,
        pose: carried,
        relative_pose,
        trace,
        active_history: history,
    })
}

fn sample(mm: &MatchMatrix, scores: &PoolingScores, cfg: &PipelineConfig, r: f64) -> SamplingDecision {
    match cfg.pooling {
        PoolingMode::R50 => SamplingDecision {
            x: r50_sample(&scores.x_self, &scores.x_cross, cfg.r50_ratio, cfg.keypoint_floor),
            y: r50_sample(&scores.y_self, &scores.y_cross, cfg.r50_ratio, cfg.keypoint_floor),
            threshold: cfg.theta_m,
            r,
        },
        _ => adaptive_sample(mm, scores, cfg.theta_m, r, cfg.keypoint_floor),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::random_weights;
    use crate::numerics::mat3;
    use crate::numerics::weights::ArchMeta;
    use crate::synthbench::{generate_scene, SceneParams, Tier};

    fn small(tier: Tier, n: usize, seed: u64) -> crate::synthbench::SyntheticScene {
        generate_scene(&SceneParams { n_keypoints: n, ..tier.params() }, seed).unwrap()
    }

    fn rotated(angle_deg: f64) -> (RelativePose, RelativePose) {
        let a = RelativePose { r: mat3::rotation(&[0.0, 1.0, 0.0], 0.3), t: [1.0, 0.0, 0.0] };
        let extra = mat3::rotation(&[0.0, 0.0, 1.0], angle_deg.to_radians());
        (a, RelativePose { r: mat3::mul(&extra, &a.r), t: a.t })
    }

    #[test]
    fn stop_check_straddles_threshold() {
        let (a, _) = rotated(0.0);
        assert!(stop_check(Some(&a), Some(&a), 1.5));
        let (a, b) = rotated(2.0);
        assert!(!stop_check(Some(&a), Some(&b), 1.5));
        let (a, b) = rotated(1.0);
        assert!(stop_check(Some(&a), Some(&b), 1.5));
        assert!(!stop_check(None, Some(&a), 1.5));
    }

    #[test]
    fn easy_scene_stops_early_and_accurately() {
        let s = small(Tier::Easy, 512, 3);
        let (x, y) = s.keypoint_sets().unwrap();
        let r = run_pair(&x, &y, None, &PipelineConfig::default()).unwrap();
        assert!(r.trace.total_iters < 9, "{:?}", r.trace);
        assert!(r.trace.iteration.last().unwrap().stopped);
        assert_eq!(r.trace.iteration.iter().filter(|i| i.stopped).count(), 1);
        let (rot, _) = crate::epipolar::pose_error_parts(r.relative_pose.as_ref().unwrap(), &s.pose);
        assert!(rot < 1.0, "{rot}");
    }

    #[test]
    fn zero_overlap_yields_no_pose() {
        let a = small(Tier::Medium, 300, 1);
        let b = small(Tier::Medium, 300, 2);
        let (x, _) = a.keypoint_sets().unwrap();
        let (_, y) = b.keypoint_sets().unwrap();
        let r = run_pair(&x, &y, None, &PipelineConfig::default()).unwrap();
        assert!(r.pose.is_none() && r.relative_pose.is_none());
        assert_eq!(r.trace.total_iters, 9);
        assert_eq!(r.trace.rescued, 0);
        assert!(r.trace.final_pose.is_none());
        assert!(r.trace.iteration.iter().all(|i| i.pose.is_none() && i.r == 0.0));
    }

    #[test]
    fn traces_are_reproducible() {
        let s = small(Tier::Hard, 400, 5);
        let (x, y) = s.keypoint_sets().unwrap();
        let cfg = PipelineConfig { pooling: PoolingMode::Adaptive, seed: 11, ..Default::default() };
        let a = run_pair(&x, &y, None, &cfg).unwrap().trace.without_timing();
        let b = run_pair(&x, &y, None, &cfg).unwrap().trace.without_timing();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn kept_counts_constant_without_pooling_and_non_increasing_with() {
        let s = small(Tier::Medium, 1024, 8);
        let (x, y) = s.keypoint_sets().unwrap();
        for (mode, constant) in [(PoolingMode::Off, true), (PoolingMode::Adaptive, false), (PoolingMode::R50, false)] {
            let cfg = PipelineConfig { pooling: mode, early_stop: false, ..Default::default() };
            let r = run_pair(&x, &y, None, &cfg).unwrap();
            let kx: Vec<usize> = r.trace.iteration.iter().map(|i| i.kept_x).collect();
            assert!(kx.windows(2).all(|w| w[1] <= w[0]), "{mode:?} {kx:?}");
            assert_eq!(kx.iter().all(|&k| k == 1024), constant, "{mode:?} {kx:?}");
            assert!(kx.iter().all(|&k| k >= KEYPOINT_FLOOR));
        }
    }

    #[test]
    fn rescued_matches_satisfy_mask() {
        let s = generate_scene(&SceneParams { twins: 40, ..Tier::Medium.params() }, 4).unwrap();
        let (x, y) = s.keypoint_sets().unwrap();
        let r = run_pair(&x, &y, None, &PipelineConfig::default()).unwrap();
        let f = r.pose.unwrap();
        assert_eq!(r.trace.rescued, r.matches.len());
        for m in &r.matches {
            assert!(epipolar_error(f.matrix(), &x.coords()[m.i], &y.coords()[m.j]) <= 12.0);
        }
    }

    #[test]
    fn all_ones_mask_is_plain_extraction() {
        let s = small(Tier::Medium, 200, 6);
        let (x, y) = s.keypoint_sets().unwrap();
        let mm = sinkhorn(&pairwise_distance(x.descriptors(), y.descriptors()).unwrap(), &SinkhornParams::default()).unwrap();
        let f = s.gt_fundamental();
        let rescued = pose_guided_match(x.coords(), y.coords(), &mm, &f, f64::INFINITY, 0.1);
        assert_eq!(rescued, extract_matches(&mm, 0.1, true));
        let masked = pose_guided_match(x.coords(), y.coords(), &mm, &f, 12.0, 0.1);
        assert!(masked.iter().all(|m| epipolar_error(f.matrix(), &x.coords()[m.i], &y.coords()[m.j]) <= 12.0));
    }

    #[test]
    fn uncalibrated_pairs_run_fixed_iterations() {
        let s = generate_scene(&SceneParams { n_keypoints: 300, calibrated: false, ..Tier::Easy.params() }, 9).unwrap();
        let (x, y) = s.keypoint_sets().unwrap();
        let r = run_pair(&x, &y, None, &PipelineConfig::default()).unwrap();
        assert_eq!(r.trace.total_iters, 9);
        assert!(r.pose.is_some() && r.relative_pose.is_none());
        assert!(r.trace.iteration.iter().all(|i| i.pose_delta_deg.is_none()));
    }

    #[test]
    fn random_model_runs_block_count() {
        let store = random_weights(ArchMeta { d: 32, h: 4, t: 3 }, -6.0, 1);
        let model = Model::from_store(&store).unwrap().unwrap();
        let s = small(Tier::Easy, 300, 2);
        let (x, y) = s.keypoint_sets().unwrap();
        let cfg = PipelineConfig { pooling: PoolingMode::Adaptive, early_stop: false, ..Default::default() };
        let r = run_pair(&x, &y, Some(&model), &cfg).unwrap();
        assert_eq!(r.trace.total_iters, 3);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let s = small(Tier::Easy, 100, 2);
        let (x, y) = s.keypoint_sets().unwrap();
        let bad = PipelineConfig { t_max: 0, ..Default::default() };
        assert!(matches!(run_pair(&x, &y, None, &bad), Err(DriverError::Config(_))));
        let bad = PipelineConfig { theta_m: -1.0, ..Default::default() };
        assert!(run_pair(&x, &y, None, &bad).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig { pooling: PoolingMode::R50, seed: 99, ..Default::default() };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&s).unwrap(), cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"t_max": 4}"#).unwrap();
        assert_eq!(partial.t_max, 4);
        assert_eq!(partial.theta_m, 0.2);
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|t| derive_seed(7, t)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(derive_seed(1, 2), derive_seed(2, 1));
    }
}
