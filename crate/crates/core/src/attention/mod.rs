//! Descriptor augmentation: position encoding, self/cross attention with a
//! shared-attention second pass, and the per-iteration block.

mod block;
mod params;

pub use block::{attention_pass, iteration_block, parameter_free_maps, shared_attention_pass, PassOutput};
pub use params::{random_weights, BlockParams, BranchParams, Model};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epipolar::{CameraIntrinsics, ImagePoint};
use crate::numerics::weights::WeightsError;
use crate::numerics::mat3::Mat3;
use crate::numerics::{DenseMatrix, MlpParams, NumericsError};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("keypoint set is empty")]
    EmptyKeypoints,
    #[error("keypoint set fields disagree: {coords} coordinates, {confidences} confidences, {descriptors} descriptors")]
    LengthMismatch {
        coords: usize,
        confidences: usize,
        descriptors: usize,
    },
    #[error("descriptor {0} has zero norm")]
    ZeroDescriptor(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("image size must be positive, got {0}x{1}")]
    BadImageSize(f64, f64),
    #[error("descriptor dimension {d} is not divisible by {h} heads")]
    HeadSplit { d: usize, h: usize },
    #[error("cached attention map is {found:?}, expected {expected:?}")]
    MapShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// One image's keypoints: pixel coordinates, detection confidences and
/// unit-norm descriptors (one per row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    coords: Vec<ImagePoint>,
    confidences: Vec<f64>,
    descriptors: DenseMatrix,
    intrinsics: Option<CameraIntrinsics>,
    image_size: (f64, f64),
    /// Set when any descriptor had to be rescaled to unit norm on ingestion.
    renormalized: bool,
}

impl KeypointSet {
    pub fn new(
        coords: Vec<ImagePoint>,
        confidences: Vec<f64>,
        descriptors: DenseMatrix,
        intrinsics: Option<CameraIntrinsics>,
        image_size: (f64, f64),
    ) -> Result<Self, AttentionError> {
        let n = coords.len();
        if n == 0 {
            return Err(AttentionError::EmptyKeypoints);
        }
        if confidences.len() != n || descriptors.rows() != n {
            return Err(AttentionError::LengthMismatch {
                coords: n,
                confidences: confidences.len(),
                descriptors: descriptors.rows(),
            });
        }
        if !(image_size.0 > 0.0 && image_size.1 > 0.0 && image_size.0.is_finite() && image_size.1.is_finite()) {
            return Err(AttentionError::BadImageSize(image_size.0, image_size.1));
        }
        if !coords.iter().all(|p| p.u.is_finite() && p.v.is_finite()) {
            return Err(AttentionError::NonFinite("keypoint coordinates"));
        }
        if !confidences.iter().all(|c| c.is_finite()) {
            return Err(AttentionError::NonFinite("confidences"));
        }
        if !descriptors.is_finite() {
            return Err(AttentionError::NonFinite("descriptors"));
        }
        let mut descriptors = descriptors;
        let mut renormalized = false;
        for i in 0..n {
            let row = descriptors.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(AttentionError::ZeroDescriptor(i));
            }
            if (norm - 1.0).abs() > 1e-12 {
                renormalized = true;
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(Self {
            coords,
            confidences,
            descriptors,
            intrinsics,
            image_size,
            renormalized,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[ImagePoint] {
        &self.coords
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn descriptors(&self) -> &DenseMatrix {
        &self.descriptors
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn intrinsics(&self) -> Option<&CameraIntrinsics> {
        self.intrinsics.as_ref()
    }

    pub fn image_size(&self) -> (f64, f64) {
        self.image_size
    }

    pub fn was_renormalized(&self) -> bool {
        self.renormalized
    }

    /// `(u, v)` mapped to `[-1, 1]` per axis by the image size.
    pub fn normalized_coords(&self) -> Vec<(f64, f64)> {
        let (w, h) = self.image_size;
        self.coords.iter().map(|p| (2.0 * p.u / w - 1.0, 2.0 * p.v / h - 1.0)).collect()
    }

    /// Maps homogeneous pixels to the frame where epipolar thresholds
    /// are dimensionless: `K⁻¹` when calibrated, else division by the
    /// image diagonal.
    pub fn normalizing_transform(&self) -> Mat3 {
        match &self.intrinsics {
            Some(k) => k.inverse_matrix(),
            None => {
                let s = 1.0 / self.image_size.0.hypot(self.image_size.1);
                [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]]
            }
        }
    }

    /// The subset at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            confidences: indices.iter().map(|&i| self.confidences[i]).collect(),
            descriptors: self.descriptors.select_rows(indices),
            intrinsics: self.intrinsics,
            image_size: self.image_size,
            renormalized: self.renormalized,
        }
    }
}

/// `d'_i = d_i + f_enc(u_i, v_i, c_i)` with coordinates normalized to `[-1, 1]`.
pub fn encode_position(k: &KeypointSet, enc: &MlpParams) -> Result<DenseMatrix, AttentionError> {
    let mut input = DenseMatrix::zeros(k.len(), 3);
    for (i, ((u, v), c)) in k.normalized_coords().into_iter().zip(k.confidences()).enumerate() {
        input.row_mut(i).copy_from_slice(&[u, v, *c]);
    }
    let e = enc.forward_rows(&input)?;
    Ok(k.descriptors().add(&e)?)
}

/// Attention weights of every head stacked vertically: head `k` occupies
/// rows `k·q .. (k+1)·q` for `q` queries. Each row is a softmax over keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    heads: usize,
    stacked: DenseMatrix,
}

impl AttentionMap {
    pub fn new(heads: usize, stacked: DenseMatrix) -> Result<Self, AttentionError> {
        if heads == 0 || !stacked.rows().is_multiple_of(heads) {
            return Err(AttentionError::MapShape {
                expected: (heads, stacked.cols()),
                found: stacked.shape(),
            });
        }
        Ok(Self { heads, stacked })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn queries(&self) -> usize {
        self.stacked.rows() / self.heads
    }

    pub fn keys(&self) -> usize {
        self.stacked.cols()
    }

    pub fn stacked(&self) -> &DenseMatrix {
        &self.stacked
    }

    /// Weight of key `j` for query `i` in head `k`.
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.stacked.get(k * self.queries() + i, j)
    }

    pub fn head(&self, k: usize) -> DenseMatrix {
        let q = self.queries();
        self.stacked.row_block(k * q, (k + 1) * q)
    }

    /// Largest deviation of any row sum from 1.
    pub fn row_sum_residual(&self) -> f64 {
        (0..self.stacked.rows())
            .map(|r| (self.stacked.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Same map with query rows re-ordered by `q` and key columns by `k`.
    pub fn permuted(&self, q: &[usize], k: &[usize]) -> Self {
        let nq = self.queries();
        let rows: Vec<usize> = (0..self.heads).flat_map(|h| q.iter().map(move |&i| h * nq + i)).collect();
        let picked = self.stacked.select_rows(&rows);
        let stacked = DenseMatrix::from_fn(picked.rows(), k.len(), |r, c| picked.get(r, k[c]));
        Self {
            heads: self.heads,
            stacked,
        }
    }
}

/// Augmented descriptors at the current iteration plus the maps that
/// produced them, and the surviving keypoints' indices into the original
/// sets (strictly increasing).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub x: DenseMatrix,
    pub y: DenseMatrix,
    pub maps: Option<BlockMaps>,
    pub active_x: Vec<usize>,
    pub active_y: Vec<usize>,
}

/// The four maps of one block: X→X, X→Y, Y→Y, Y→X (query→key).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMaps {
    pub xs: AttentionMap,
    pub xc: AttentionMap,
    pub ys: AttentionMap,
    pub yc: AttentionMap,
}

impl AttentionState {
    /// Fresh state over all keypoints.
    pub fn new(x: DenseMatrix, y: DenseMatrix) -> Self {
        let active_x = (0..x.rows()).collect();
        let active_y = (0..y.rows()).collect();
        Self {
            x,
            y,
            maps: None,
            active_x,
            active_y,
        }
    }

    /// Keeps the rows at local positions `keep_x` / `keep_y` (increasing).
    /// Maps are dropped since their shapes no longer apply.
    pub fn retain(&mut self, keep_x: &[usize], keep_y: &[usize]) {
        self.x = self.x.select_rows(keep_x);
        self.y = self.y.select_rows(keep_y);
        self.active_x = keep_x.iter().map(|&i| self.active_x[i]).collect();
        self.active_y = keep_y.iter().map(|&i| self.active_y[i]).collect();
        self.maps = None;
    }

    /// Checks the bookkeeping invariants.
    pub fn is_consistent(&self, original_x: usize, original_y: usize) -> bool {
        let increasing = |v: &[usize], bound: usize| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&i| i < bound);
        increasing(&self.active_x, original_x)
            && increasing(&self.active_y, original_y)
            && self.active_x.len() == self.x.rows()
            && self.active_y.len() == self.y.rows()
    }
}
