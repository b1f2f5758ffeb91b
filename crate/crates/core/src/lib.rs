//! Iterative feature matching and relative pose estimation.
//!
//! Two keypoint sets are matched repeatedly: each iteration augments the
//! descriptors with attention, solves a dustbin-augmented optimal transport
//! problem, estimates a fundamental matrix from the matches, and (optionally)
//! prunes keypoints that are unlikely to ever match. Iteration stops once
//! consecutive poses agree; a final pose-guided pass rescues matches the
//! descriptors alone could not disambiguate.

pub mod attention;
pub mod driver;
pub mod epipolar;
pub mod losses;
pub mod pooling;
pub mod synthbench;
pub mod numerics;
pub mod transport;

#[cfg(test)]
mod testutil;
