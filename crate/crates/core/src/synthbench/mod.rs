//! Synthetic two-view scenes with planted correspondences, the pose and
//! matching metrics, and a benchmark runner over config ladders.

mod bench;
mod metrics;
mod scene;

pub use bench::{
    assemble_report, evaluate_scene, map_scenes, retention_curve, run_benchmark, standard_configs, BenchConfig, ConfigSummary,
    EvalReport, PairRecord, RetentionCurve, SceneOutcome,
};
pub use metrics::{auc_exact, match_metrics, MatchMetrics, AUC_THRESHOLDS};
pub use scene::{generate_scene, SceneKeypoint, SceneParams, SyntheticScene, Tier, IMAGE_SIZE};

use thiserror::Error;

use crate::attention::AttentionError;
use crate::driver::derive_seed;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid scene parameters")]
    InvalidParams,
    #[error("no common visibility after {0} attempts")]
    InfeasibleGeometry(usize),
    #[error("error list is empty")]
    EmptyErrors,
    #[error("errors must be non-negative (use +inf for failures)")]
    InvalidError,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// Seed of scene `index` in a ladder seeded with `seed`.
pub fn scene_seed(seed: u64, tier: Tier, index: usize) -> u64 {
    derive_seed(derive_seed(seed, tier as u64 + 1), index as u64)
}

/// `count` scenes of `tier`.
pub fn generate_tier(tier: Tier, count: usize, seed: u64) -> Result<Vec<SyntheticScene>, BenchError> {
    let params = tier.params();
    (0..count).map(|i| generate_scene(&params, scene_seed(seed, tier, i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::PipelineConfig;
    use crate::epipolar::{epipolar_error, sampson_distance};
    use crate::transport::pairwise_distance;
    use proptest::prelude::*;

    #[test]
    fn planted_pairs_are_exact_before_noise() {
        for seed in 0..20 {
            for tier in Tier::LADDER {
                let s = generate_scene(&SceneParams { n_keypoints: 200, ..tier.params() }, seed).unwrap();
                let f = s.gt_fundamental();
                for (x, y) in s.clean_projections() {
                    assert!(sampson_distance(f.matrix(), &x, &y) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn noiseless_nearest_neighbour_is_perfect() {
        let p = SceneParams {
            n_keypoints: 300,
            inlier_fraction: 1.0,
            inlier_max: 300,
            pixel_noise: 0.0,
            descriptor_noise: 0.0,
            ..SceneParams::default()
        };
        let s = generate_scene(&p, 3).unwrap();
        assert_eq!(s.gt_pairs.len(), 300);
        let (x, y) = s.keypoint_sets().unwrap();
        let d = pairwise_distance(x.descriptors(), y.descriptors()).unwrap();
        for &(i, j) in &s.gt_pairs {
            let nn = (0..d.cols()).min_by(|&a, &b| d.get(i, a).total_cmp(&d.get(i, b))).unwrap();
            assert_eq!(nn, j);
        }
    }

    #[test]
    fn default_inlier_fraction() {
        let fr: Vec<f64> = (0..100)
            .map(|i| {
                let s = generate_scene(&SceneParams::default(), scene_seed(1, Tier::Medium, i)).unwrap();
                s.gt_pairs.len() as f64 / s.keypoints_x.len() as f64
            })
            .collect();
        let mean = fr.iter().sum::<f64>() / fr.len() as f64;
        assert!((mean - 0.30).abs() <= 0.02, "{mean}");
        assert!(fr.iter().all(|f| (32.0 / 1024.0..=512.0 / 1024.0).contains(f)));
    }

    #[test]
    fn scenes_are_deterministic_and_round_trip() {
        let a = generate_scene(&Tier::Hard.params(), 17).unwrap();
        let b = generate_scene(&Tier::Hard.params(), 17).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        assert_eq!(ja, serde_json::to_string(&b).unwrap());
        assert_eq!(serde_json::from_str::<SyntheticScene>(&ja).unwrap(), a);
        assert_ne!(a, generate_scene(&Tier::Hard.params(), 18).unwrap());
    }

    #[test]
    fn twins_copy_inliers_off_the_epipolar_line() {
        let s = generate_scene(&SceneParams { twins: 25, ..SceneParams::default() }, 5).unwrap();
        assert_eq!(s.twins.len(), 25);
        let f = s.gt_fundamental();
        let (x, y) = s.keypoint_sets().unwrap();
        let d = pairwise_distance(x.descriptors(), y.descriptors()).unwrap();
        // The k-th twin copies the inlier of gt pair k.
        for (k, &t) in s.twins.iter().enumerate() {
            let (i, j) = s.gt_pairs[k];
            assert!(epipolar_error(f.matrix(), &x.coords()[i], &y.coords()[t]) >= 50.0);
            assert!((d.get(i, t) - d.get(i, j)).abs() < 0.2);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = SceneParams { rotation_bound_deg: 120.0, ..SceneParams::default() };
        assert!(matches!(generate_scene(&bad, 0), Err(BenchError::InvalidParams)));
        let bad = SceneParams { twins: 2000, ..SceneParams::default() };
        assert!(generate_scene(&bad, 0).is_err());
    }

    #[test]
    fn auc_hand_cases() {
        let t = [5.0, 10.0, 20.0];
        assert_eq!(auc_exact(&[0.0; 7], &t).unwrap(), vec![1.0; 3]);
        assert_eq!(auc_exact(&[f64::INFINITY; 4], &t).unwrap(), vec![0.0; 3]);
        assert!((auc_exact(&[2.5], &[5.0]).unwrap()[0] - 0.5).abs() < 1e-12);
        // {1, 3, ∞} at τ=4: (3 + 1) / (3·4).
        assert!((auc_exact(&[1.0, 3.0, f64::INFINITY], &[4.0]).unwrap()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(auc_exact(&[], &t).is_err());
        assert!(auc_exact(&[-1.0], &t).is_err());
        assert!(auc_exact(&[f64::NAN], &t).is_err());
    }

    proptest! {
        #[test]
        fn auc_monotone(errors in prop::collection::vec(prop_oneof![0.0f64..30.0, Just(f64::INFINITY)], 1..40), k in 0usize..40, shrink in 0.0f64..1.0) {
            let t = AUC_THRESHOLDS;
            let a = auc_exact(&errors, &t).unwrap();
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(a.windows(2).all(|w| w[0] <= w[1] + 1e-15));
            let mut better = errors.clone();
            let k = k % errors.len();
            better[k] = if better[k].is_finite() { better[k] * shrink } else { 25.0 * shrink };
            let b = auc_exact(&better, &t).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| y + 1e-15 >= *x));
        }
    }

    #[test]
    fn match_metric_cases() {
        let gt = vec![(0, 0), (1, 2), (2, 1), (3, 3)];
        let m = match_metrics(&gt, &gt, 10, 8);
        assert_eq!((m.precision, m.matching_score), (1.0, 4.0 / 8.0));
        let e = match_metrics(&[], &gt, 10, 8);
        assert!(e.empty && e.precision == 1.0 && e.matching_score == 0.0);
        let half = [(0, 0), (1, 2), (4, 4), (5, 6)];
        assert_eq!(match_metrics(&half, &gt, 10, 8).precision, 0.5);
    }

    #[test]
    fn benchmark_is_deterministic_across_jobs() {
        let params = SceneParams { n_keypoints: 160, ..Tier::Medium.params() };
        let scenes: Vec<_> = (0..6).map(|i| generate_scene(&params, scene_seed(3, Tier::Medium, i)).unwrap()).collect();
        let configs = standard_configs(&PipelineConfig { t_max: 4, keypoint_floor: 64, ..Default::default() });
        let a = serde_json::to_string(&run_benchmark(&scenes, &configs, None, 1)).unwrap();
        let b = serde_json::to_string(&run_benchmark(&scenes, &configs, None, 3)).unwrap();
        assert_eq!(a, b);
        let report: EvalReport = serde_json::from_str(&a).unwrap();
        assert_eq!(report.pairs.len(), 6 * configs.len());
        assert_eq!(report.summaries.len(), configs.len());
        assert_eq!(report.retention.len(), 2);
        for s in &report.summaries {
            assert!(s.auc5 <= s.auc10 && s.auc10 <= s.auc20);
            assert_eq!(s.iteration_histogram.iter().sum::<usize>(), 6);
        }
    }
}
