use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::attention::KeypointSet;
use crate::epipolar::{epipolar_error, CameraIntrinsics, EpipolarPose, ImagePoint, RelativePose};
use crate::losses::GroundTruth;
use crate::numerics::mat3::{self, Vec3};
use crate::numerics::DenseMatrix;

pub const IMAGE_SIZE: (f64, f64) = (640.0, 480.0);
const MAX_ATTEMPTS: usize = 100;
/// Twin distractors sit at least this far (√Sampson, px) from the true
/// epipolar geometry.
const TWIN_OFFSET_PX: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
    Custom,
}

impl Tier {
    pub const LADDER: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn params(self) -> SceneParams {
        let base = SceneParams::default();
        match self {
            Tier::Easy => SceneParams {
                tier: self,
                rotation_bound_deg: 10.0,
                pixel_noise: 0.2,
                inlier_fraction: 0.6,
                // 60% of 1024 is above the default 512 cap.
                inlier_max: usize::MAX,
                ..base
            },
            Tier::Medium | Tier::Custom => SceneParams { tier: self, ..base },
            Tier::Hard => SceneParams {
                tier: self,
                rotation_bound_deg: 60.0,
                pixel_noise: 1.0,
                inlier_fraction: 0.15,
                ..base
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
            Tier::Custom => "custom",
        }
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Tier {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "easy" => Ok(Tier::Easy),
            "medium" => Ok(Tier::Medium),
            "hard" => Ok(Tier::Hard),
            "custom" => Ok(Tier::Custom),
            other => Err(format!("unknown tier `{other}` (easy|medium|hard)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub tier: Tier,
    pub n_keypoints: usize,
    pub inlier_fraction: f64,
    pub inlier_min: usize,
    pub inlier_max: usize,
    pub rotation_bound_deg: f64,
    /// Gaussian pixel noise per coordinate.
    pub pixel_noise: f64,
    pub descriptor_dim: usize,
    /// Expected norm of the per-view descriptor noise.
    pub descriptor_noise: f64,
    /// Repeated-texture distractors in Y, each a copy of an inlier's
    /// descriptor placed off its epipolar line.
    pub twins: usize,
    pub calibrated: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            tier: Tier::Medium,
            n_keypoints: 1024,
            inlier_fraction: 0.3,
            inlier_min: 32,
            inlier_max: 512,
            rotation_bound_deg: 30.0,
            pixel_noise: 0.5,
            descriptor_dim: 32,
            descriptor_noise: 0.1,
            twins: 0,
            calibrated: true,
        }
    }
}

impl SceneParams {
    pub fn inlier_count(&self) -> usize {
        let target = (self.inlier_fraction * self.n_keypoints as f64).round() as usize;
        target.clamp(self.inlier_min.min(self.n_keypoints), self.inlier_max.min(self.n_keypoints))
    }

    fn validate(&self) -> Result<(), BenchError> {
        let ok = self.n_keypoints >= 8
            && self.descriptor_dim >= 1
            && (0.0..=1.0).contains(&self.inlier_fraction)
            && self.inlier_min <= self.inlier_max
            && self.rotation_bound_deg >= 0.0
            && self.rotation_bound_deg < 90.0
            && self.pixel_noise >= 0.0
            && self.descriptor_noise >= 0.0
            && self.twins <= self.inlier_count().min(self.n_keypoints - self.inlier_count());
        if ok {
            Ok(())
        } else {
            Err(BenchError::InvalidParams)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneKeypoint {
    pub u: f64,
    pub v: f64,
    pub c: f64,
    pub descriptor: Vec<f64>,
}

/// A two-view scene with known geometry. `points[k]` is the 3D point of
/// `gt_pairs[k]`, in the first camera's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub tier: Tier,
    pub image_size: (f64, f64),
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    pub pose: RelativePose,
    pub points: Vec<Vec3>,
    pub keypoints_x: Vec<SceneKeypoint>,
    pub keypoints_y: Vec<SceneKeypoint>,
    pub gt_pairs: Vec<(usize, usize)>,
    /// Y indices of twin distractors.
    #[serde(default)]
    pub twins: Vec<usize>,
    pub calibrated: bool,
}

impl SyntheticScene {
    pub fn gt_fundamental(&self) -> EpipolarPose {
        EpipolarPose::from_pose(&self.pose, &self.k1, &self.k2)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::from_pairs(self.gt_pairs.clone(), self.keypoints_x.len(), self.keypoints_y.len(), self.gt_fundamental())
    }

    pub fn keypoint_sets(&self) -> Result<(KeypointSet, KeypointSet), BenchError> {
        let build = |kps: &[SceneKeypoint], k: &CameraIntrinsics| {
            let d = kps.first().map_or(0, |p| p.descriptor.len());
            let desc = DenseMatrix::new(kps.len(), d, kps.iter().flat_map(|p| p.descriptor.iter().copied()).collect())?;
            Ok::<_, BenchError>(KeypointSet::new(
                kps.iter().map(|p| ImagePoint::new(p.u, p.v)).collect(),
                kps.iter().map(|p| p.c).collect(),
                desc,
                self.calibrated.then_some(*k),
                self.image_size,
            )?)
        };
        Ok((build(&self.keypoints_x, &self.k1)?, build(&self.keypoints_y, &self.k2)?))
    }

    /// Noise-free projections of the planted points, `(x, y)` per gt pair.
    pub fn clean_projections(&self) -> Vec<(ImagePoint, ImagePoint)> {
        self.points
            .iter()
            .map(|p| (self.k1.project(p), self.k2.project(&transform(&self.pose, p))))
            .collect()
    }
}

fn transform(pose: &RelativePose, p: &Vec3) -> Vec3 {
    let q = mat3::mul_vec(&pose.r, p);
    [q[0] + pose.t[0], q[1] + pose.t[1], q[2] + pose.t[2]]
}

fn in_image(p: &ImagePoint) -> bool {
    p.u >= 0.0 && p.u < IMAGE_SIZE.0 && p.v >= 0.0 && p.v < IMAGE_SIZE.1
}

fn unit_random(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// `base` plus isotropic noise of expected norm `sigma`, renormalized.
fn noisy_view(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let s = sigma / (base.len() as f64).sqrt();
    let v: Vec<f64> = base.iter().map(|b| b + s * gauss(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform_pixel(rng: &mut ChaCha8Rng) -> ImagePoint {
    ImagePoint::new(rng.random_range(0.0..IMAGE_SIZE.0), rng.random_range(0.0..IMAGE_SIZE.1))
}

struct Geometry {
    pose: RelativePose,
    points: Vec<Vec3>,
}

/// Second camera rotated by up to the bound and aimed at the scene
/// centre from a laterally shifted position; points are back-projected
/// from random first-view pixels and kept when visible in the second.
fn sample_geometry(rng: &mut ChaCha8Rng, p: &SceneParams, k1: &CameraIntrinsics, k2: &CameraIntrinsics, n: usize) -> Option<Geometry> {
    let axis = unit_random(rng, 3);
    let bound = p.rotation_bound_deg.to_radians();
    let angle = if bound > 0.0 { rng.random_range(0.25 * bound..=bound) } else { 0.0 };
    let r = mat3::rotation(&[axis[0], axis[1], axis[2]], angle);
    let depth = 8.0;
    let centre = [0.0, 0.0, depth];
    let back = mat3::mul_vec(&mat3::transpose(&r), &[0.0, 0.0, depth]);
    let lateral = unit_random(rng, 2);
    let shift = rng.random_range(1.0..2.0);
    let c2 = [
        centre[0] - back[0] + shift * lateral[0],
        centre[1] - back[1] + shift * lateral[1],
        centre[2] - back[2],
    ];
    let t = mat3::mul_vec(&r, &c2);
    let t = [-t[0], -t[1], -t[2]];
    let scale = mat3::norm(&t);
    let pose = RelativePose { r, t: mat3::scale_vec(&t, 1.0 / scale) };

    let kinv = k1.inverse_matrix();
    let mut points = Vec::with_capacity(n);
    let mut tries = 0;
    while points.len() < n {
        tries += 1;
        if tries > 200 * n.max(1) {
            return None;
        }
        let px = uniform_pixel(rng);
        let ray = mat3::mul_vec(&kinv, &px.homogeneous());
        let z = rng.random_range(5.0..11.0);
        let world = [ray[0] * z / scale, ray[1] * z / scale, z / scale];
        let q = transform(&pose, &world);
        if q[2] <= 0.5 / scale || !in_image(&k2.project(&q)) {
            continue;
        }
        points.push(world);
    }
    Some(Geometry { pose, points })
}

/// Deterministic scene for `(params, seed)`.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<SyntheticScene, BenchError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k1 = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).expect("valid");
    let k2 = CameraIntrinsics::new(520.0, 515.0, 318.0, 242.0).expect("valid");
    let n = params.n_keypoints;
    let inliers = params.inlier_count();
    let geometry = (0..MAX_ATTEMPTS)
        .find_map(|_| sample_geometry(&mut rng, params, &k1, &k2, inliers))
        .ok_or(BenchError::InfeasibleGeometry(MAX_ATTEMPTS))?;
    let gt_f = EpipolarPose::from_pose(&geometry.pose, &k1, &k2);

    let noise = |rng: &mut ChaCha8Rng, p: ImagePoint| {
        let s = params.pixel_noise;
        ImagePoint::new(p.u + s * gauss(rng), p.v + s * gauss(rng))
    };
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut bases = Vec::with_capacity(inliers);
    for p in &geometry.points {
        let base = unit_random(&mut rng, params.descriptor_dim);
        let px = noise(&mut rng, k1.project(p));
        let py = noise(&mut rng, k2.project(&transform(&geometry.pose, p)));
        xs.push((px, noisy_view(&mut rng, &base, params.descriptor_noise)));
        ys.push((py, noisy_view(&mut rng, &base, params.descriptor_noise)));
        bases.push(base);
    }
    for _ in inliers..n {
        xs.push((uniform_pixel(&mut rng), unit_random(&mut rng, params.descriptor_dim)));
        ys.push((uniform_pixel(&mut rng), unit_random(&mut rng, params.descriptor_dim)));
    }
    // Twins replace the first Y distractors.
    for k in 0..params.twins {
        let x = xs[k].0;
        let loc = loop {
            let c = uniform_pixel(&mut rng);
            if epipolar_error(gt_f.matrix(), &x, &c) >= TWIN_OFFSET_PX {
                break c;
            }
        };
        ys[inliers + k] = (loc, noisy_view(&mut rng, &bases[k], params.descriptor_noise));
    }

    let mut perm_x: Vec<usize> = (0..n).collect();
    let mut perm_y: Vec<usize> = (0..n).collect();
    perm_x.shuffle(&mut rng);
    perm_y.shuffle(&mut rng);
    // perm[new] = old; invert to place each original at its new slot.
    let inverse = |perm: &[usize]| {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        inv
    };
    let (inv_x, inv_y) = (inverse(&perm_x), inverse(&perm_y));
    let mut keypoint = |(p, d): &(ImagePoint, Vec<f64>)| SceneKeypoint {
        u: p.u,
        v: p.v,
        c: rng.random_range(0.5..1.0),
        descriptor: d.clone(),
    };
    let keypoints_x: Vec<SceneKeypoint> = perm_x.iter().map(|&o| keypoint(&xs[o])).collect();
    let keypoints_y: Vec<SceneKeypoint> = perm_y.iter().map(|&o| keypoint(&ys[o])).collect();

    Ok(SyntheticScene {
        seed,
        tier: params.tier,
        image_size: IMAGE_SIZE,
        k1,
        k2,
        pose: geometry.pose,
        points: geometry.points,
        keypoints_x,
        keypoints_y,
        gt_pairs: (0..inliers).map(|k| (inv_x[k], inv_y[k])).collect(),
        twins: (0..params.twins).map(|k| inv_y[inliers + k]).collect(),
        calibrated: params.calibrated,
    })
}
