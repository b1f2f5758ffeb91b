use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epipolar_error, weighted_eight_point, Correspondence, EpipolarPose, GeometryError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Hypothesis cap.
    pub iterations: usize,
    /// Inlier threshold on `√sampson`, in pixels.
    pub threshold_px: f64,
    /// Early-exit confidence for the adaptive hypothesis count.
    pub confidence: f64,
    /// Support a model needs to be reported. The minimal sample fits its
    /// own eight points exactly, so this must exceed 8 to reject noise.
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 1000,
            threshold_px: 3.0,
            confidence: 0.999,
            min_inliers: 16,
        }
    }
}

fn inlier_mask(f: &EpipolarPose, matches: &[Correspondence], threshold: f64) -> Vec<bool> {
    matches
        .iter()
        .map(|m| epipolar_error(f.matrix(), &m.x, &m.y) <= threshold)
        .collect()
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> usize {
    let p_good = inlier_ratio.powi(8);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Robust fundamental matrix: 8-point hypotheses on random minimal
/// samples, scored by inlier count, then a weighted refit on the best
/// consensus set with the matches' own weights.
pub fn ransac_fundamental(
    matches: &[Correspondence],
    params: &RansacParams,
    seed: u64,
) -> Result<(EpipolarPose, Vec<bool>), GeometryError> {
    if matches.len() < 8 {
        return Err(GeometryError::InsufficientMatches {
            needed: 8,
            got: matches.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(EpipolarPose, Vec<bool>, usize)> = None;
    let mut needed = params.iterations;
    let mut iter = 0;
    while iter < needed.min(params.iterations) {
        iter += 1;
        let idx = sample(&mut rng, matches.len(), 8);
        let minimal: Vec<Correspondence> = idx
            .iter()
            .map(|i| Correspondence { weight: 1.0, ..matches[i] })
            .collect();
        let Ok(model) = weighted_eight_point(&minimal) else {
            continue;
        };
        let mask = inlier_mask(&model, matches, params.threshold_px);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(_, _, c)| count > *c) {
            needed = required_iterations(count as f64 / matches.len() as f64, params.confidence);
            best = Some((model, mask, count));
        }
    }
    let Some((model, mask, count)) = best else {
        return Err(GeometryError::NoPose);
    };
    if count < params.min_inliers.max(8) {
        return Err(GeometryError::NoPose);
    }

    let inliers: Vec<Correspondence> = matches
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|(m, _)| *m)
        .collect();
    if let Ok(refit) = weighted_eight_point(&inliers) {
        let refit_mask = inlier_mask(&refit, matches, params.threshold_px);
        let refit_count = refit_mask.iter().filter(|&&b| b).count();
        if refit_count >= count {
            return Ok((refit, refit_mask));
        }
    }
    Ok((model, mask))
}
