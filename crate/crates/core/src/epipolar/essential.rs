use super::{CameraIntrinsics, EpipolarPose, GeometryError, ImagePoint, RelativePose};
use crate::numerics::mat3::{self, Mat3, Vec3};
use crate::numerics::svd3;

/// `E = K₂ᵀ F K₁` with the two nonzero singular values averaged and the
/// third set to zero.
pub fn essential_from_fundamental(
    f: &EpipolarPose,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Result<Mat3, GeometryError> {
    let e = mat3::mul(&mat3::mul(&mat3::transpose(&k2.matrix()), f.matrix()), &k1.matrix());
    let s = svd3(&e)?;
    let avg = 0.5 * (s.sigma[0] + s.sigma[1]);
    let d = [[avg, 0.0, 0.0], [0.0, avg, 0.0], [0.0, 0.0, 0.0]];
    Ok(mat3::mul(&mat3::mul(&s.u, &d), &mat3::transpose(&s.v)))
}

/// Depths `(λ₁, λ₂)` with `λ₂·y ≈ λ₁·R·x + t` in least squares, for
/// normalized image points `x`, `y`.
pub fn triangulate_depths(pose: &RelativePose, x: &ImagePoint, y: &ImagePoint) -> (f64, f64) {
    let a = mat3::mul_vec(&pose.r, &x.homogeneous());
    let b = y.homogeneous();
    let t = pose.t;
    // Normal equations of [a, -b]·[λ₁, λ₂]ᵀ = -t.
    let aa = mat3::dot(&a, &a);
    let bb = mat3::dot(&b, &b);
    let ab = mat3::dot(&a, &b);
    let at = mat3::dot(&a, &t);
    let bt = mat3::dot(&b, &t);
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-300 {
        return (0.0, 0.0);
    }
    let l1 = (-at * bb + ab * bt) / det;
    let l2 = (aa * bt - ab * at) / det;
    (l1, l2)
}

/// Picks the `(R, t)` among the four decompositions of `e` that puts the
/// most triangulated correspondences in front of both cameras.
///
/// Correspondences are in pixels; they are normalized with `k1`, `k2`.
pub fn decompose_essential(
    e: &Mat3,
    correspondences: &[(ImagePoint, ImagePoint)],
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Result<RelativePose, GeometryError> {
    if correspondences.is_empty() {
        return Err(GeometryError::InsufficientMatches { needed: 1, got: 0 });
    }
    let s = svd3(e)?;
    let mut u = s.u;
    let mut v = s.v;
    if mat3::det(&u) < 0.0 {
        for row in u.iter_mut() {
            row[2] = -row[2];
        }
    }
    if mat3::det(&v) < 0.0 {
        for row in v.iter_mut() {
            row[2] = -row[2];
        }
    }
    let w = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    let vt = mat3::transpose(&v);
    let r1 = mat3::mul(&mat3::mul(&u, &w), &vt);
    let r2 = mat3::mul(&mat3::mul(&u, &mat3::transpose(&w)), &vt);
    let t: Vec3 = mat3::normalize(&[u[0][2], u[1][2], u[2][2]]);
    let neg = [-t[0], -t[1], -t[2]];
    let candidates = [
        RelativePose { r: r1, t },
        RelativePose { r: r1, t: neg },
        RelativePose { r: r2, t },
        RelativePose { r: r2, t: neg },
    ];

    let normalized: Vec<(ImagePoint, ImagePoint)> = correspondences
        .iter()
        .map(|(x, y)| (k1.normalize(x), k2.normalize(y)))
        .collect();
    let votes: Vec<usize> = candidates
        .iter()
        .map(|c| {
            normalized
                .iter()
                .filter(|(x, y)| {
                    let (l1, l2) = triangulate_depths(c, x, y);
                    l1 > 0.0 && l2 > 0.0
                })
                .count()
        })
        .collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| votes[b].cmp(&votes[a]));
    let (best, second) = (order[0], order[1]);
    if votes[best] == votes[second] {
        return Err(GeometryError::CheiralityTie { votes: votes[best] });
    }
    Ok(candidates[best])
}

/// Maximum of the rotation angle between `a.r` and `b.r` and the
/// sign-invariant angle between `a.t` and `b.t`, in degrees.
pub fn pose_error(a: &RelativePose, b: &RelativePose) -> f64 {
    let (rot, trans) = pose_error_parts(a, b);
    rot.max(trans)
}

/// `(rotation error, translation error)` in degrees.
pub fn pose_error_parts(a: &RelativePose, b: &RelativePose) -> (f64, f64) {
    let rel = mat3::mul(&mat3::transpose(&a.r), &b.r);
    let rot = mat3::rotation_angle(&rel).abs().to_degrees();
    // atan2(|ta×tb|, |ta·tb|) equals arccos(|ta·tb|) for unit vectors and
    // stays accurate near zero.
    let cross = mat3::norm(&mat3::cross(&a.t, &b.t));
    let dot = mat3::dot(&a.t, &b.t).abs();
    let trans = cross.atan2(dot).to_degrees();
    (rot, trans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epipolar::{weighted_eight_point, Correspondence};
    use crate::numerics::mat3::IDENTITY;
    use crate::testutil::planted;

    fn estimated(seed: u64, n: usize) -> (crate::testutil::Planted, EpipolarPose) {
        let s = planted(n, seed);
        let m: Vec<_> = s.x.iter().zip(&s.y).map(|(a, b)| Correspondence::new(*a, *b, 1.0)).collect();
        let f = weighted_eight_point(&m).unwrap();
        (s, f)
    }

    fn normalized(e: &Mat3) -> Mat3 {
        crate::epipolar::normalize_fundamental(e)
    }

    #[test]
    fn identity_intrinsics_keep_f() {
        let (_, f) = estimated(1, 20);
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let e = essential_from_fundamental(&f, &k, &k).unwrap();
        let s = svd3(&e).unwrap();
        assert!((s.sigma[0] - s.sigma[1]).abs() < 1e-12 && s.sigma[2] < 1e-12);
        let sf = svd3(f.matrix()).unwrap();
        let avg = 0.5 * (sf.sigma[0] + sf.sigma[1]);
        let d = [[avg, 0.0, 0.0], [0.0, avg, 0.0], [0.0, 0.0, 0.0]];
        let expect = mat3::mul(&mat3::mul(&sf.u, &d), &mat3::transpose(&sf.v));
        assert!(mat3::frobenius(&mat3::sub(&e, &expect)) < 1e-12);
    }

    #[test]
    fn planted_essential_is_tx_r() {
        let (s, f) = estimated(2, 30);
        let e = essential_from_fundamental(&f, &s.k1, &s.k2).unwrap();
        let truth = mat3::mul(&mat3::skew(&s.pose.t), &s.pose.r);
        let d = mat3::frobenius(&mat3::sub(&normalized(&e), &normalized(&truth)));
        assert!(d < 1e-8, "{d}");
    }

    #[test]
    fn swapping_unequal_intrinsics_changes_e() {
        let (s, f) = estimated(3, 30);
        let e = normalized(&essential_from_fundamental(&f, &s.k1, &s.k2).unwrap());
        let swapped = normalized(&essential_from_fundamental(&f, &s.k2, &s.k1).unwrap());
        let truth = normalized(&mat3::mul(&mat3::skew(&s.pose.t), &s.pose.r));
        assert!(mat3::frobenius(&mat3::sub(&e, &truth)) < 1e-8);
        assert!(mat3::frobenius(&mat3::sub(&swapped, &truth)) > 1e-4);
    }

    #[test]
    fn decomposition_recovers_planted_pose() {
        let (s, f) = estimated(4, 50);
        let e = essential_from_fundamental(&f, &s.k1, &s.k2).unwrap();
        let corr: Vec<_> = s.x.iter().copied().zip(s.y.iter().copied()).collect();
        let pose = decompose_essential(&e, &corr, &s.k1, &s.k2).unwrap();
        let (rot, _) = pose_error_parts(&pose, &s.pose);
        // Sign of t matters here: cheirality fixes it.
        let tdot = mat3::dot(&pose.t, &s.pose.t);
        assert!(rot < 1e-6, "rotation error {rot}");
        assert!(tdot > 0.0);
        assert!(pose_error(&pose, &s.pose) < 1e-6);
    }

    #[test]
    fn single_correspondence_still_votes() {
        let (s, f) = estimated(5, 20);
        let e = essential_from_fundamental(&f, &s.k1, &s.k2).unwrap();
        let pose = decompose_essential(&e, &[(s.x[0], s.y[0])], &s.k1, &s.k2).unwrap();
        assert!(pose_error(&pose, &s.pose) < 1e-6);
    }

    #[test]
    fn half_mirrored_scene_ties() {
        // A correspondence of X under (R, -t) satisfies the same epipolar
        // constraint as one under (R, t) but triangulates behind both
        // cameras for (R, t). Ten of each give two candidates equal support.
        let (s, f) = estimated(6, 40);
        let e = essential_from_fundamental(&f, &s.k1, &s.k2).unwrap();
        let mut corr: Vec<_> = s.x.iter().copied().zip(s.y.iter().copied()).take(10).collect();
        let flipped_t = [-s.pose.t[0], -s.pose.t[1], -s.pose.t[2]];
        let mut added = 0;
        for p in s.points.iter().skip(10) {
            let q = mat3::mul_vec(&s.pose.r, p);
            let q = [q[0] + flipped_t[0], q[1] + flipped_t[1], q[2] + flipped_t[2]];
            if q[2] > 0.0 && added < 10 {
                corr.push((s.k1.project(p), s.k2.project(&q)));
                added += 1;
            }
        }
        assert_eq!(added, 10);
        match decompose_essential(&e, &corr, &s.k1, &s.k2) {
            Err(GeometryError::CheiralityTie { votes: 10 }) => {}
            other => panic!("expected tie, got {other:?}"),
        }
    }

    #[test]
    fn pose_error_cases() {
        let a = RelativePose { r: IDENTITY, t: [1.0, 0.0, 0.0] };
        assert_eq!(pose_error(&a, &a), 0.0);
        let b = RelativePose {
            r: mat3::rotation(&[0.0, 0.0, 1.0], 10f64.to_radians()),
            t: a.t,
        };
        assert!((pose_error(&a, &b) - 10.0).abs() < 1e-12);
        let c = RelativePose { r: IDENTITY, t: [-1.0, 0.0, 0.0] };
        assert_eq!(pose_error(&a, &c), 0.0);
        // Symmetry.
        assert!((pose_error(&a, &b) - pose_error(&b, &a)).abs() < 1e-12);
    }
}
