//! Two-view geometry: Sampson distance, weighted 8-point estimation,
//! essential matrix decomposition, pose error and RANSAC.

mod eight_point;
mod essential;
mod ransac;

pub use eight_point::{weighted_eight_point, DEGENERACY_RATIO};
pub use essential::{decompose_essential, essential_from_fundamental, pose_error, pose_error_parts, triangulate_depths};
pub use ransac::{ransac_fundamental, RansacParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::mat3::{self, Mat3, Vec3};
use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("need at least {needed} positively weighted matches, got {got}")]
    InsufficientMatches { needed: usize, got: usize },
    /// Constraint matrix is (numerically) rank deficient, e.g. coplanar points.
    #[error("degenerate configuration: sigma8/sigma1 = {ratio:e}")]
    DegenerateConfiguration { ratio: f64 },
    #[error("cheirality tie between pose candidates ({votes} votes each)")]
    CheiralityTie { votes: usize },
    #[error("no model reached the minimum inlier support")]
    NoPose,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A pixel location; lifted to `(u, v, 1)` where needed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    #[inline]
    pub fn homogeneous(&self) -> Vec3 {
        [self.u, self.v, 1.0]
    }
}

/// Pinhole intrinsics without skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Option<Self> {
        (fx > 0.0 && fy > 0.0 && [fx, fy, cx, cy].iter().all(|v| v.is_finite()))
            .then_some(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        [
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Pixel → normalized image coordinates.
    pub fn normalize(&self, p: &ImagePoint) -> ImagePoint {
        ImagePoint::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy)
    }

    pub fn project(&self, p: &Vec3) -> ImagePoint {
        ImagePoint::new(self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

/// Rotation and unit translation with `X₂ = R·X₁ + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub r: Mat3,
    pub t: Vec3,
}

/// A fundamental matrix, unit Frobenius norm with its largest-magnitude
/// entry positive, plus the decomposed pose when intrinsics were known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpipolarPose {
    f: Mat3,
    pub pose: Option<RelativePose>,
}

impl EpipolarPose {
    /// Normalizes `f` (scale and sign) and wraps it. No rank projection.
    pub fn from_matrix(f: &Mat3) -> Self {
        Self {
            f: normalize_fundamental(f),
            pose: None,
        }
    }

    /// Fundamental matrix of a calibrated pair with known relative pose.
    pub fn from_pose(pose: &RelativePose, k1: &CameraIntrinsics, k2: &CameraIntrinsics) -> Self {
        let e = mat3::mul(&mat3::skew(&pose.t), &pose.r);
        let f = mat3::mul(&mat3::mul(&mat3::transpose(&k2.inverse_matrix()), &e), &k1.inverse_matrix());
        Self {
            f: normalize_fundamental(&f),
            pose: Some(*pose),
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.f
    }

    pub fn transposed(&self) -> Self {
        Self::from_matrix(&mat3::transpose(&self.f))
    }

    pub fn sampson(&self, x: &ImagePoint, y: &ImagePoint) -> f64 {
        sampson_distance(&self.f, x, y)
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        mat3::flatten(&self.f)
    }
}

/// Unit Frobenius norm, largest-magnitude entry positive.
pub fn normalize_fundamental(f: &Mat3) -> Mat3 {
    let mut flat = mat3::flatten(f);
    let n = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        flat.iter_mut().for_each(|v| *v /= n);
    }
    crate::numerics::svd_fix_sign(&mut flat);
    mat3::from_flat(&flat)
}

/// First-order geometric error `(yᵀFx)² / ((Fx)₁² + (Fx)₂² + (Fᵀy)₁² + (Fᵀy)₂²)`.
///
/// The value is in squared input units. A denominator at or below `1e-18`
/// returns `+∞`, which every caller treats as an outlier.
pub fn sampson_distance(f: &Mat3, x: &ImagePoint, y: &ImagePoint) -> f64 {
    let xh = x.homogeneous();
    let yh = y.homogeneous();
    let fx = mat3::mul_vec(f, &xh);
    let fty = [
        f[0][0] * yh[0] + f[1][0] * yh[1] + f[2][0] * yh[2],
        f[0][1] * yh[0] + f[1][1] * yh[1] + f[2][1] * yh[2],
    ];
    let num = mat3::dot(&yh, &fx);
    let denom = fx[0] * fx[0] + fx[1] * fx[1] + fty[0] * fty[0] + fty[1] * fty[1];
    if denom <= 1e-18 {
        return f64::INFINITY;
    }
    num * num / denom
}

/// `√sampson`, the epipolar error in the same units as the points.
pub fn epipolar_error(f: &Mat3, x: &ImagePoint, y: &ImagePoint) -> f64 {
    sampson_distance(f, x, y).sqrt()
}

/// One correspondence with its weight (matching score).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub x: ImagePoint,
    pub y: ImagePoint,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(x: ImagePoint, y: ImagePoint, weight: f64) -> Self {
        Self { x, y, weight }
    }
}

/// A predicted match: index into the first set, index into the second set,
/// and its matching score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredMatch {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}
