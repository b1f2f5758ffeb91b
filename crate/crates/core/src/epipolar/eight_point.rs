use super::{normalize_fundamental, Correspondence, EpipolarPose, GeometryError, ImagePoint};
use crate::numerics::mat3::{self, Mat3};
use crate::numerics::{smallest_right_singular_vector, svd3, DenseMatrix};

/// `σ₈/σ₁` below this marks the constraint matrix as degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-12;

/// Similarity taking the points' centroid to the origin and their mean
/// distance to √2.
fn hartley_transform(points: impl Iterator<Item = ImagePoint> + Clone) -> Mat3 {
    let n = points.clone().count() as f64;
    let (su, sv) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p.u, b + p.v));
    let (cu, cv) = (su / n, sv / n);
    let mean_dist = points.map(|p| ((p.u - cu).powi(2) + (p.v - cv).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    [[s, 0.0, -s * cu], [0.0, s, -s * cv], [0.0, 0.0, 1.0]]
}

fn apply(t: &Mat3, p: &ImagePoint) -> ImagePoint {
    ImagePoint::new(t[0][0] * p.u + t[0][2], t[1][1] * p.v + t[1][2])
}

/// Weighted least-squares fundamental matrix from `≥ 8` weighted matches.
///
/// Each constraint row `yᵀFx = 0` is multiplied by its weight; rows with
/// zero weight are dropped before conditioning. The result is rank-2
/// projected and normalized.
pub fn weighted_eight_point(matches: &[Correspondence]) -> Result<EpipolarPose, GeometryError> {
    let used: Vec<&Correspondence> = matches.iter().filter(|m| m.weight > 0.0).collect();
    if used.len() < 8 {
        return Err(GeometryError::InsufficientMatches {
            needed: 8,
            got: used.len(),
        });
    }
    let t1 = hartley_transform(used.iter().map(|m| m.x));
    let t2 = hartley_transform(used.iter().map(|m| m.y));

    let mut a = DenseMatrix::zeros(used.len(), 9);
    for (r, m) in used.iter().enumerate() {
        let x = apply(&t1, &m.x);
        let y = apply(&t2, &m.y);
        let w = m.weight;
        let row = [
            y.u * x.u,
            y.u * x.v,
            y.u,
            y.v * x.u,
            y.v * x.v,
            y.v,
            x.u,
            x.v,
            1.0,
        ];
        for (dst, v) in a.row_mut(r).iter_mut().zip(row) {
            *dst = w * v;
        }
    }
    let (f, sigma) = smallest_right_singular_vector(&a)?;
    let ratio = if sigma[0] > 0.0 { sigma[7] / sigma[0] } else { 0.0 };
    if ratio < DEGENERACY_RATIO {
        return Err(GeometryError::DegenerateConfiguration { ratio });
    }

    let f_norm = mat3::from_flat(&f);
    let f_pix = mat3::mul(&mat3::mul(&mat3::transpose(&t2), &f_norm), &t1);
    let f_rank2 = project_rank2(&f_pix)?;
    Ok(EpipolarPose::from_matrix(&f_rank2))
}

/// Closest rank-2 matrix in Frobenius norm.
pub(crate) fn project_rank2(f: &Mat3) -> Result<Mat3, GeometryError> {
    // Scale first so the SVD works on unit-size entries.
    let f = normalize_fundamental(f);
    let s = svd3(&f)?;
    let d = [[s.sigma[0], 0.0, 0.0], [0.0, s.sigma[1], 0.0], [0.0, 0.0, 0.0]];
    Ok(mat3::mul(&mat3::mul(&s.u, &d), &mat3::transpose(&s.v)))
}
