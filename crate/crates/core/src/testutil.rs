//! Planted two-view scenes shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::epipolar::{CameraIntrinsics, ImagePoint, RelativePose};
use crate::numerics::mat3::{self, Vec3};

pub struct Planted {
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    pub pose: RelativePose,
    pub points: Vec<Vec3>,
    pub x: Vec<ImagePoint>,
    pub y: Vec<ImagePoint>,
}

/// Noiseless correspondences of `n` points in front of both cameras.
pub fn planted(n: usize, seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k1 = CameraIntrinsics::new(520.0, 510.0, 320.0, 240.0).unwrap();
    let k2 = CameraIntrinsics::new(480.0, 490.0, 300.0, 250.0).unwrap();
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)];
    let angle = rng.random_range(0.05..0.4);
    let r = mat3::rotation(&axis, angle);
    let t = mat3::normalize(&[rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2)]);
    let pose = RelativePose { r, t };
    let mut points = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    while points.len() < n {
        let p = [rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..9.0)];
        let q = mat3::mul_vec(&r, &p);
        let q = [q[0] + t[0], q[1] + t[1], q[2] + t[2]];
        if q[2] <= 0.5 {
            continue;
        }
        points.push(p);
        x.push(k1.project(&p));
        y.push(k2.project(&q));
    }
    Planted { k1, k2, pose, points, x, y }
}
