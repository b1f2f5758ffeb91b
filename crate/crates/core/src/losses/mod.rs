//! Forward evaluation of the training objective: matching negative
//! log-likelihood, pose and epipolar-consistency terms, their weighted
//! combination, and the mean over iterations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{encode_position, iteration_block, AttentionError, AttentionState, KeypointSet, Model};
use crate::epipolar::{
    sampson_distance, weighted_eight_point, Correspondence, EpipolarPose, GeometryError, ImagePoint,
};
use crate::numerics::mat3;
use crate::transport::{extract_matches, pairwise_distance, sinkhorn, MatchMatrix, SinkhornParams, TransportError};

/// Entries of the expanded matrix are clamped here before the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("ground truth has no pairs and no unmatched keypoints")]
    EmptySupervision,
    #[error("ground truth index {index} out of bounds for {len} keypoints")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("keypoint {0} is both matched and unmatched in the ground truth")]
    Overlap(usize),
    #[error("total loss over zero iterations")]
    NoIterations,
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Supervision for one pair: matched index pairs, the keypoints of each
/// image without a correspondence, and the true fundamental matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_x: Vec<usize>,
    pub unmatched_y: Vec<usize>,
    pub pose: EpipolarPose,
}

impl GroundTruth {
    /// Derives the unmatched sets from `pairs` over `m`/`n` keypoints.
    pub fn from_pairs(pairs: Vec<(usize, usize)>, m: usize, n: usize, pose: EpipolarPose) -> Self {
        let mut in_x = vec![false; m];
        let mut in_y = vec![false; n];
        for &(i, j) in &pairs {
            in_x[i] = true;
            in_y[j] = true;
        }
        Self {
            pairs,
            unmatched_x: (0..m).filter(|&i| !in_x[i]).collect(),
            unmatched_y: (0..n).filter(|&j| !in_y[j]).collect(),
            pose,
        }
    }

    /// Disjointness and bounds of the supervision sets.
    pub fn validate(&self, m: usize, n: usize) -> Result<(), LossError> {
        let mut seen_x = vec![false; m];
        let mut seen_y = vec![false; n];
        let mark = |seen: &mut [bool], idx: usize| -> Result<(), LossError> {
            let len = seen.len();
            let slot = seen.get_mut(idx).ok_or(LossError::IndexOutOfBounds { index: idx, len })?;
            if *slot {
                return Err(LossError::Overlap(idx));
            }
            *slot = true;
            Ok(())
        };
        for &(i, j) in &self.pairs {
            mark(&mut seen_x, i)?;
            mark(&mut seen_y, j)?;
        }
        for &i in &self.unmatched_x {
            mark(&mut seen_x, i)?;
        }
        for &j in &self.unmatched_y {
            mark(&mut seen_y, j)?;
        }
        Ok(())
    }

    /// The supervision restricted to surviving keypoints; `active_*` are
    /// increasing original indices and the result uses local positions.
    pub fn restricted(&self, active_x: &[usize], active_y: &[usize]) -> Self {
        let local = |active: &[usize], i: usize| active.binary_search(&i).ok();
        Self {
            pairs: self
                .pairs
                .iter()
                .filter_map(|&(i, j)| Some((local(active_x, i)?, local(active_y, j)?)))
                .collect(),
            unmatched_x: self.unmatched_x.iter().filter_map(|&i| local(active_x, i)).collect(),
            unmatched_y: self.unmatched_y.iter().filter_map(|&j| local(active_y, j)).collect(),
            pose: self.pose,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Each of the three sums divided by its own count.
    #[default]
    Mean,
    /// Plain sums.
    Sum,
}

/// Negative log-likelihood of the supervised cells of the expanded matrix.
pub fn matching_loss(mm: &MatchMatrix, gt: &GroundTruth, mode: LossMode) -> Result<f64, LossError> {
    if gt.pairs.is_empty() && gt.unmatched_x.is_empty() && gt.unmatched_y.is_empty() {
        return Err(LossError::EmptySupervision);
    }
    let (m, n) = (mm.rows(), mm.cols());
    gt.validate(m, n)?;
    let nll = |v: f64| -v.max(LOG_CLAMP).ln();
    let pairs: f64 = gt.pairs.iter().map(|&(i, j)| nll(mm.get(i, j))).sum();
    let dust_x: f64 = gt.unmatched_x.iter().map(|&i| nll(mm.get(i, n))).sum();
    let dust_y: f64 = gt.unmatched_y.iter().map(|&j| nll(mm.get(m, j))).sum();
    Ok(match mode {
        LossMode::Sum => pairs + dust_x + dust_y,
        LossMode::Mean => {
            let avg = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
            avg(pairs, gt.pairs.len()) + avg(dust_x, gt.unmatched_x.len()) + avg(dust_y, gt.unmatched_y.len())
        }
    })
}

/// Frobenius distance between two normalized fundamental matrices.
pub fn pose_loss(p: &EpipolarPose, pgt: &EpipolarPose) -> f64 {
    mat3::frobenius(&mat3::sub(p.matrix(), pgt.matrix()))
}

/// Mean Sampson distances: ground-truth matches under the prediction, and
/// predicted matches under the ground truth. An empty set yields 0 with
/// its flag raised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyLosses {
    pub l_pg: f64,
    pub l_mg: f64,
    pub no_gt_matches: bool,
    pub no_predicted_matches: bool,
}

pub fn epipolar_consistency_losses(
    p: &EpipolarPose,
    pgt: &EpipolarPose,
    gt_matches: &[(ImagePoint, ImagePoint)],
    predicted: &[(ImagePoint, ImagePoint)],
) -> ConsistencyLosses {
    let mean = |f: &EpipolarPose, set: &[(ImagePoint, ImagePoint)]| {
        if set.is_empty() {
            0.0
        } else {
            set.iter().map(|(x, y)| sampson_distance(f.matrix(), x, y)).sum::<f64>() / set.len() as f64
        }
    };
    ConsistencyLosses {
        l_pg: mean(p, gt_matches),
        l_mg: mean(pgt, predicted),
        no_gt_matches: gt_matches.is_empty(),
        no_predicted_matches: predicted.is_empty(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub matching: f64,
    pub pose: f64,
    pub geometric: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            matching: 0.6,
            pose: 0.2,
            geometric: 0.2,
        }
    }
}

/// `α_m L_m + α_p L_p + α_g L_pg + α_g L_mg`, summed term by term so unit
/// components with the default weights give exactly `1.2`.
pub fn combined_loss(l_m: f64, l_p: f64, l_pg: f64, l_mg: f64, w: &LossWeights) -> f64 {
    w.matching * l_m + w.pose * l_p + w.geometric * l_pg + w.geometric * l_mg
}

/// Mean of the per-iteration losses.
pub fn total_loss(per_iteration: &[f64]) -> Result<f64, LossError> {
    if per_iteration.is_empty() {
        return Err(LossError::NoIterations);
    }
    Ok(per_iteration.iter().sum::<f64>() / per_iteration.len() as f64)
}

/// Settings of the forward training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub sinkhorn: SinkhornParams,
    pub weights: LossWeights,
    pub mode: LossMode,
    /// Matches with score at or above this feed the weighted 8-point fit.
    pub match_threshold: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            sinkhorn: SinkhornParams::default(),
            weights: LossWeights::default(),
            mode: LossMode::Mean,
            match_threshold: 0.2,
        }
    }
}

/// The training objective of a pair evaluated forward: for every block,
/// transport on the augmented descriptors, matching loss, a weighted
/// 8-point pose from the thresholded matches and its consistency terms;
/// averaged over blocks. Without a model, one pass on the raw descriptors.
///
/// An iteration whose matches cannot support an 8-point fit contributes
/// only its matching term.
pub fn forward_objective(
    x: &KeypointSet,
    y: &KeypointSet,
    gt: &GroundTruth,
    model: Option<&Model>,
    cfg: &ObjectiveConfig,
) -> Result<f64, LossError> {
    let mut sinkhorn_params = cfg.sinkhorn;
    let mut states = Vec::new();
    match model {
        Some(model) => {
            sinkhorn_params.alpha = model.alpha;
            let mut state = AttentionState::new(encode_position(x, &model.encoder)?, encode_position(y, &model.encoder)?);
            for block in &model.blocks {
                state = iteration_block(&state, block)?;
                states.push((state.x.clone(), state.y.clone()));
            }
        }
        None => states.push((x.descriptors().clone(), y.descriptors().clone())),
    }

    let gt_points: Vec<(ImagePoint, ImagePoint)> =
        gt.pairs.iter().map(|&(i, j)| (x.coords()[i], y.coords()[j])).collect();
    let mut per_iteration = Vec::with_capacity(states.len());
    for (xd, yd) in &states {
        let mm = sinkhorn(&pairwise_distance(xd, yd)?, &sinkhorn_params)?;
        let l_m = matching_loss(&mm, gt, cfg.mode)?;
        let matches = extract_matches(&mm, cfg.match_threshold, true);
        let corr: Vec<Correspondence> = matches
            .iter()
            .map(|m| Correspondence::new(x.coords()[m.i], y.coords()[m.j], m.score))
            .collect();
        let loss = match weighted_eight_point(&corr) {
            Ok(p) => {
                let predicted: Vec<_> = corr.iter().map(|c| (c.x, c.y)).collect();
                let c = epipolar_consistency_losses(&p, &gt.pose, &gt_points, &predicted);
                combined_loss(l_m, pose_loss(&p, &gt.pose), c.l_pg, c.l_mg, &cfg.weights)
            }
            Err(_) => cfg.weights.matching * l_m,
        };
        per_iteration.push(loss);
    }
    total_loss(&per_iteration)
}
