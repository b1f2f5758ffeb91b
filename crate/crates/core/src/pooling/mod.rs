//! Keypoint pooling between iterations: attention-score reduction, pose
//! uncertainty, the adaptive sampler and the fixed-ratio baseline.

use serde::{Deserialize, Serialize};

use crate::attention::{parameter_free_maps, AttentionError, AttentionMap, BlockMaps};
use crate::epipolar::{sampson_distance, ImagePoint};
use crate::numerics::mat3::{self, Mat3};
use crate::numerics::{dot_slices, DenseMatrix};
use crate::transport::MatchMatrix;

/// Images at or below this many active keypoints are never pooled.
pub const KEYPOINT_FLOOR: usize = 256;

/// Attention received by each key, averaged over heads and queries and
/// normalized to sum 1.
///
/// Averaging over keys instead would be constant: every softmax row sums
/// to one, so a per-query mean is `1/keys` for any map.
pub fn attention_scores(map: &AttentionMap) -> Vec<f64> {
    let s = map.stacked();
    let mut acc = vec![0.0; s.cols()];
    for r in 0..s.rows() {
        for (a, v) in acc.iter_mut().zip(s.row(r)) {
            *a += v;
        }
    }
    if acc.iter().sum::<f64>() > 0.0 {
        normalized(acc)
    } else {
        let u = 1.0 / acc.len() as f64;
        acc.iter().map(|_| u).collect()
    }
}

/// Self and cross scores per image; the cross score of an X keypoint is
/// the attention it receives from Y.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingScores {
    pub x_self: Vec<f64>,
    pub x_cross: Vec<f64>,
    pub y_self: Vec<f64>,
    pub y_cross: Vec<f64>,
}

impl PoolingScores {
    pub fn from_maps(maps: &BlockMaps) -> Self {
        Self {
            x_self: attention_scores(&maps.xs),
            x_cross: attention_scores(&maps.yc),
            y_self: attention_scores(&maps.ys),
            y_cross: attention_scores(&maps.xc),
        }
    }
}

/// Largest logit spread handled with a single global shift before `exp`
/// may underflow whole rows.
const SHARED_SHIFT_RANGE: f64 = 600.0;

/// Scores of the single-head identity-projection maps (see
/// `parameter_free_maps`) without materializing them: each self logit is
/// exponentiated once for the symmetric pair, and the cross exponentials
/// serve both directions. `gram` is `X·Yᵀ`.
pub fn parameter_free_scores(x: &DenseMatrix, y: &DenseMatrix, gram: &DenseMatrix) -> Result<PoolingScores, AttentionError> {
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let (lo, hi) = gram.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if (hi - lo) * scale > SHARED_SHIFT_RANGE {
        return Ok(PoolingScores::from_maps(&parameter_free_maps(x, y, Some(gram))?));
    }
    let (m, n) = gram.shape();
    let shift = hi * scale;
    let mut row_sum = vec![0.0; m];
    let mut col_sum = vec![0.0; n];
    let mut e = DenseMatrix::zeros(m, n);
    for i in 0..m {
        for (j, (out, g)) in e.row_mut(i).iter_mut().zip(gram.row(i)).enumerate() {
            let v = (g * scale - shift).exp();
            *out = v;
            row_sum[i] += v;
            col_sum[j] += v;
        }
    }
    // X keys receive from Y queries (column-normalized), Y keys from X.
    let inv_col: Vec<f64> = col_sum.iter().map(|c| 1.0 / c).collect();
    let mut x_cross = vec![0.0; m];
    let mut y_cross = vec![0.0; n];
    for i in 0..m {
        let inv_row = 1.0 / row_sum[i];
        let mut acc = 0.0;
        for ((v, ic), yc) in e.row(i).iter().zip(&inv_col).zip(y_cross.iter_mut()) {
            acc += v * ic;
            *yc += v * inv_row;
        }
        x_cross[i] = acc;
    }
    Ok(PoolingScores {
        x_self: self_scores(x, scale)?,
        x_cross: normalized(x_cross),
        y_self: self_scores(y, scale)?,
        y_cross: normalized(y_cross),
    })
}

fn self_scores(x: &DenseMatrix, scale: f64) -> Result<Vec<f64>, AttentionError> {
    let m = x.rows();
    let mut g = DenseMatrix::zeros(m, m);
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for i in 0..m {
        for j in i..m {
            let v = dot_slices(x.row(i), x.row(j)) * scale;
            g.set(i, j, v);
            hi = hi.max(v);
            lo = lo.min(v);
        }
    }
    if hi - lo > SHARED_SHIFT_RANGE {
        return Ok(attention_scores(&parameter_free_maps(x, x, None)?.xs));
    }
    let mut row_sum = vec![0.0; m];
    for i in 0..m {
        for j in i..m {
            let v = (g.get(i, j) - hi).exp();
            g.set(i, j, v);
            row_sum[i] += v;
            if j != i {
                row_sum[j] += v;
            }
        }
    }
    let inv: Vec<f64> = row_sum.iter().map(|r| 1.0 / r).collect();
    let mut acc = vec![0.0; m];
    for i in 0..m {
        let row = &g.row(i)[i..];
        acc[i] += row[0] * inv[i];
        let mut own = 0.0;
        for ((v, a), iv) in row[1..].iter().zip(&mut acc[i + 1..]).zip(&inv[i + 1..]) {
            *a += v * inv[i];
            own += v * iv;
        }
        acc[i] += own;
    }
    Ok(normalized(acc))
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|a| *a /= total);
    }
    v
}

/// A predicted match in pixels with its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPoints {
    pub x: ImagePoint,
    pub y: ImagePoint,
    pub score: f64,
}

/// `F` re-expressed for points mapped by `a_x`, `a_y` (pixel → normalized).
pub fn fundamental_in_frame(f: &Mat3, a_x: &Mat3, a_y: &Mat3) -> Mat3 {
    mat3::mul(&mat3::mul(&mat3::transpose(&inverse(a_y)), f), &inverse(a_x))
}

fn inverse(a: &Mat3) -> Mat3 {
    // Only affine point normalizations reach here: [[sx,0,tx],[0,sy,ty],[0,0,1]].
    [
        [1.0 / a[0][0], 0.0, -a[0][2] / a[0][0]],
        [0.0, 1.0 / a[1][1], -a[1][2] / a[1][1]],
        [0.0, 0.0, 1.0],
    ]
}

fn apply(a: &Mat3, p: &ImagePoint) -> ImagePoint {
    ImagePoint::new(a[0][0] * p.u + a[0][2], a[1][1] * p.v + a[1][2])
}

/// Fraction of matches scoring at least `theta_m` whose Sampson error in
/// the normalized frame is within `theta_e`. Zero matches give `r = 0`.
pub fn pose_uncertainty(matches: &[ScoredPoints], f: &Mat3, a_x: &Mat3, a_y: &Mat3, theta_e: f64, theta_m: f64) -> f64 {
    let fn_ = fundamental_in_frame(f, a_x, a_y);
    let mut total = 0usize;
    let mut consistent = 0usize;
    for m in matches.iter().filter(|m| m.score >= theta_m) {
        total += 1;
        if sampson_distance(&fn_, &apply(a_x, &m.x), &apply(a_y, &m.y)) <= theta_e {
            consistent += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        consistent as f64 / total as f64
    }
}

/// Pooling result for one image, in local (active-list) positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDecision {
    pub kept: Vec<usize>,
    pub matched: Vec<usize>,
    pub self_expanded: Vec<usize>,
    pub cross_expanded: Vec<usize>,
    pub floor_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDecision {
    pub x: ImageDecision,
    pub y: ImageDecision,
    pub threshold: f64,
    pub r: f64,
}

/// Lower median: element `(n-1)/2` of the sorted values.
fn lower_median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

fn keep_all(n: usize, matched: Vec<usize>) -> ImageDecision {
    ImageDecision {
        kept: (0..n).collect(),
        matched,
        self_expanded: Vec::new(),
        cross_expanded: Vec::new(),
        floor_applied: true,
    }
}

fn union_sorted(n: usize, sets: &[&[usize]]) -> Vec<usize> {
    let mut mark = vec![false; n];
    for s in sets {
        for &i in *s {
            mark[i] = true;
        }
    }
    (0..n).filter(|&i| mark[i]).collect()
}

fn adaptive_image(best: &[f64], self_s: &[f64], cross_s: &[f64], threshold: f64, floor: usize) -> ImageDecision {
    let n = best.len();
    let matched: Vec<usize> = (0..n).filter(|&i| best[i] >= threshold).collect();
    if matched.is_empty() || n <= floor {
        return keep_all(n, matched);
    }
    let expand = |s: &[f64]| {
        let med = lower_median(matched.iter().map(|&i| s[i]).collect()).expect("non-empty");
        (0..n).filter(|&i| s[i] >= med).collect::<Vec<_>>()
    };
    let self_expanded = expand(self_s);
    let cross_expanded = expand(cross_s);
    let kept = union_sorted(n, &[&matched, &self_expanded, &cross_expanded]);
    if kept.len() < floor {
        return ImageDecision {
            self_expanded,
            cross_expanded,
            ..keep_all(n, matched)
        };
    }
    ImageDecision {
        kept,
        matched,
        self_expanded,
        cross_expanded,
        floor_applied: false,
    }
}

/// Matched keypoints (best real score ≥ `θ_m·r`) plus those whose self or
/// cross score reaches the lower median over the matched ones.
pub fn adaptive_sample(mm: &MatchMatrix, scores: &PoolingScores, theta_m: f64, r: f64, floor: usize) -> SamplingDecision {
    let threshold = theta_m * r.clamp(0.0, 1.0);
    SamplingDecision {
        x: adaptive_image(&mm.row_max(), &scores.x_self, &scores.x_cross, threshold, floor),
        y: adaptive_image(&mm.col_max(), &scores.y_self, &scores.y_cross, threshold, floor),
        threshold,
        r,
    }
}

/// Indices of the `k` largest scores, ties to the lower index.
fn top_k(s: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Union of the top `⌈ratio·n⌉` by self score and by cross score.
pub fn r50_sample(self_s: &[f64], cross_s: &[f64], ratio: f64, floor: usize) -> ImageDecision {
    let n = self_s.len();
    if n <= floor {
        return keep_all(n, Vec::new());
    }
    let k = (ratio * n as f64).ceil() as usize;
    let a = top_k(self_s, k);
    let b = top_k(cross_s, k);
    let kept = union_sorted(n, &[&a, &b]);
    if kept.len() < floor {
        return ImageDecision {
            self_expanded: a,
            cross_expanded: b,
            ..keep_all(n, Vec::new())
        };
    }
    ImageDecision {
        kept,
        matched: Vec::new(),
        self_expanded: a,
        cross_expanded: b,
        floor_applied: false,
    }
}
