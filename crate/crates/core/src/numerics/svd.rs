//! Jacobi singular value decompositions.
//!
//! One-sided (Hestenes) Jacobi: plane rotations are applied to column pairs
//! until every pair is orthogonal, which diagonalizes `AᵀA` without ever
//! forming it. Tall inputs are first reduced to their `n×n` triangular factor
//! by Householder QR, so cost per sweep does not grow with the row count.

use super::mat3::Mat3;
use super::{DenseMatrix, NumericsError};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;
/// Relative orthogonality tolerance between column pairs.
const OFF_DIAGONAL_TOL: f64 = 1e-14;

/// Thin decomposition of an `m×n` matrix: `A = U·diag(σ)·Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Singular values, descending.
    pub sigma: Vec<f64>,
    /// Right singular vectors as columns, `n×n`.
    pub v: DenseMatrix,
}

/// Full 3×3 decomposition with orthogonal `U` and `V`.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: [f64; 3],
    pub v: Mat3,
}

/// Right singular vectors and singular values of `a`.
pub fn svd(a: &DenseMatrix) -> Result<Svd, NumericsError> {
    if !a.is_finite() {
        return Err(NumericsError::NonFinite("svd input"));
    }
    let n = a.cols();
    // Work on columns: store the (possibly QR-reduced) matrix column-major.
    let work = if a.rows() > n {
        householder_r(a)
    } else {
        a.clone()
    };
    let m = work.rows();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    jacobi_sweeps(&mut cols, &mut v, m)?;

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (norm(c), j))
        .collect();
    // Stable descending order; equal values keep column order.
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let sigma = order.iter().map(|(s, _)| *s).collect();
    let v_sorted = DenseMatrix::from_fn(n, n, |i, k| v[order[k].1][i]);
    Ok(Svd { sigma, v: v_sorted })
}

fn jacobi_sweeps(
    cols: &mut [Vec<f64>],
    v: &mut [Vec<f64>],
    m: usize,
) -> Result<(), NumericsError> {
    let n = cols.len();
    // Columns that have collapsed to rounding level relative to the whole
    // matrix carry no direction worth orthogonalizing; rotating them only
    // churns noise (wide or rank-deficient inputs).
    let total: f64 = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>()).sum();
    let negligible = total * (f64::EPSILON * f64::EPSILON);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for i in 0..m {
                        a += cp[i] * cp[i];
                        b += cq[i] * cq[i];
                        g += cp[i] * cq[i];
                    }
                    (a, b, g)
                };
                if gamma == 0.0
                    || gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt()
                    || alpha.min(beta) <= negligible
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(cols, p, q, c, s);
                rotate_pair(v, p, q, c, s);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(NumericsError::NoConvergence(MAX_SWEEPS))
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Upper-triangular `R` (n×n) of the Householder QR of a tall `a`.
fn householder_r(a: &DenseMatrix) -> DenseMatrix {
    let (m, n) = a.shape();
    let mut w = a.clone();
    for k in 0..n {
        let mut x: Vec<f64> = (k..m).map(|i| w.get(i, k)).collect();
        let alpha = norm(&x);
        if alpha == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -alpha } else { alpha };
        x[0] -= alpha;
        let vnorm2: f64 = x.iter().map(|v| v * v).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..n {
            let mut s = 0.0;
            for (r, xi) in x.iter().enumerate() {
                s += xi * w.get(k + r, j);
            }
            let f = 2.0 * s / vnorm2;
            for (r, xi) in x.iter().enumerate() {
                let val = w.get(k + r, j) - f * xi;
                w.set(k + r, j, val);
            }
        }
    }
    DenseMatrix::from_fn(n, n, |i, j| if j >= i { w.get(i, j) } else { 0.0 })
}

/// Flips the sign so the largest-magnitude entry is positive.
pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Unit vector `v` minimizing `‖a·v‖`, largest-magnitude entry positive.
///
/// Also returns the singular values of `a` (descending) so callers can
/// inspect conditioning.
pub fn smallest_right_singular_vector(
    a: &DenseMatrix,
) -> Result<(Vec<f64>, Vec<f64>), NumericsError> {
    let dec = svd(a)?;
    let n = a.cols();
    let mut v = dec.v.column(n - 1);
    let len = norm(&v);
    v.iter_mut().for_each(|x| *x /= len);
    fix_sign(&mut v);
    Ok((v, dec.sigma))
}

/// Full SVD of a 3×3 matrix.
pub fn svd3(m: &Mat3) -> Result<Svd3, NumericsError> {
    let a = DenseMatrix::from_fn(3, 3, |i, j| m[i][j]);
    if !a.is_finite() {
        return Err(NumericsError::NonFinite("svd3 input"));
    }
    let mut cols: Vec<Vec<f64>> = (0..3).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..3)
        .map(|j| {
            let mut e = vec![0.0; 3];
            e[j] = 1.0;
            e
        })
        .collect();
    jacobi_sweeps(&mut cols, &mut v, 3)?;

    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, c)| (norm(c), j)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let scale = order[0].0.max(f64::MIN_POSITIVE);
    let mut sigma = [0.0; 3];
    let mut u_cols: Vec<[f64; 3]> = Vec::with_capacity(3);
    let mut v_cols: Vec<[f64; 3]> = Vec::with_capacity(3);
    for (k, &(s, j)) in order.iter().enumerate() {
        sigma[k] = s;
        v_cols.push([v[j][0], v[j][1], v[j][2]]);
        if s > scale * 1e-15 && s > 0.0 {
            u_cols.push([cols[j][0] / s, cols[j][1] / s, cols[j][2] / s]);
        }
    }
    complete_basis(&mut u_cols);
    let mut u = [[0.0; 3]; 3];
    let mut vm = [[0.0; 3]; 3];
    for k in 0..3 {
        for i in 0..3 {
            u[i][k] = u_cols[k][i];
            vm[i][k] = v_cols[k][i];
        }
    }
    Ok(Svd3 { u, sigma, v: vm })
}

/// Extends an orthonormal set of 3-vectors to a basis by Gram-Schmidt over
/// the standard basis.
fn complete_basis(cols: &mut Vec<[f64; 3]>) {
    // Re-orthogonalize what is there: tiny singular values leave U columns
    // only approximately orthogonal.
    let mut basis: Vec<[f64; 3]> = Vec::with_capacity(3);
    for c in cols.iter() {
        if let Some(q) = orthogonalize(c, &basis) {
            basis.push(q);
        }
    }
    let mut e = 0;
    while basis.len() < 3 && e < 3 {
        let mut cand = [0.0; 3];
        cand[e] = 1.0;
        if let Some(q) = orthogonalize(&cand, &basis) {
            basis.push(q);
        }
        e += 1;
    }
    *cols = basis;
}

fn orthogonalize(c: &[f64; 3], basis: &[[f64; 3]]) -> Option<[f64; 3]> {
    let mut w = *c;
    for _ in 0..2 {
        for b in basis {
            let d = w[0] * b[0] + w[1] * b[1] + w[2] * b[2];
            for i in 0..3 {
                w[i] -= d * b[i];
            }
        }
    }
    let n = norm(&w);
    if n < 1e-8 {
        return None;
    }
    Some([w[0] / n, w[1] / n, w[2] / n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mat3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-sided cyclic Jacobi eigen-decomposition of a symmetric matrix;
    /// test-only oracle, independent of the one-sided path above.
    fn jacobi_eigen(s: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
        let n = s.rows();
        let mut a = s.clone();
        let mut v = DenseMatrix::identity(n);
        for _ in 0..200 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a.get(i, j).powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * c;
                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - sn * akq);
                        a.set(k, q, sn * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - sn * aqk);
                        a.set(q, k, sn * apk + c * aqk);
                    }
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - sn * vkq);
                        v.set(k, q, sn * vkp + c * vkq);
                    }
                }
            }
        }
        ((0..n).map(|i| a.get(i, i)).collect(), v)
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random3(rng: &mut ChaCha8Rng) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        m.iter_mut().flatten().for_each(|v| *v = rng.random_range(-2.0..2.0));
        m
    }

    #[test]
    fn diagonal_case_gives_third_axis() {
        let mut a = DenseMatrix::zeros(9, 9);
        a.set(0, 0, 3.0);
        a.set(1, 1, 2.0);
        a.set(2, 2, 1.0);
        for k in 3..9 {
            a.set(k, k, 10.0 + k as f64);
        }
        let (v, _) = smallest_right_singular_vector(&a).unwrap();
        assert!((v[2] - 1.0).abs() < 1e-15);
        assert!(v.iter().enumerate().all(|(i, x)| i == 2 || x.abs() < 1e-15));

        let small = DenseMatrix::from_rows(&[[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let (v, s) = smallest_right_singular_vector(&small).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 1.0]);
        assert_eq!(s, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn planted_null_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut null: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&null);
        null.iter_mut().for_each(|x| *x /= n);
        // Rows projected onto the orthogonal complement of `null`.
        let a = DenseMatrix::from_fn(20, 9, |_, _| rng.random_range(-1.0..1.0));
        let mut rows = Vec::new();
        for i in 0..20 {
            let r = a.row(i);
            let d: f64 = r.iter().zip(&null).map(|(x, y)| x * y).sum();
            rows.push(r.iter().zip(&null).map(|(x, y)| x - d * y).collect::<Vec<_>>());
        }
        let a = DenseMatrix::from_rows(&rows).unwrap();
        let (v, _) = smallest_right_singular_vector(&a).unwrap();
        let residual: f64 = (0..20)
            .map(|i| a.row(i).iter().zip(&v).map(|(x, y)| x * y).sum::<f64>().powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(residual < 1e-10, "residual {residual}");
    }

    #[test]
    fn agrees_with_jacobi_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..1000 {
            let rows = if trial % 3 == 0 { 8 } else { 12 };
            let a = random(rows, 9, &mut rng);
            let (v, _) = smallest_right_singular_vector(&a).unwrap();
            let ata = a.transpose().matmul(&a).unwrap();
            let (vals, vecs) = jacobi_eigen(&ata);
            let k = (0..9)
                .min_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap())
                .unwrap();
            let dot: f64 = (0..9).map(|i| vecs.get(i, k) * v[i]).sum();
            assert!(dot.abs() >= 1.0 - 1e-9, "trial {trial}: dot {dot}");
        }
    }

    #[test]
    fn svd3_identity_and_reordering() {
        let s = svd3(&mat3::IDENTITY).unwrap();
        assert_eq!(s.sigma, [1.0, 1.0, 1.0]);
        let d = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 5.0]];
        let s = svd3(&d).unwrap();
        assert_eq!(s.sigma, [5.0, 0.0, 0.0]);
        assert_reconstructs(&d, &s);
    }

    fn assert_reconstructs(m: &Mat3, s: &Svd3) {
        let mut sd = [[0.0; 3]; 3];
        for k in 0..3 {
            sd[k][k] = s.sigma[k];
        }
        let rec = mat3::mul(&mat3::mul(&s.u, &sd), &mat3::transpose(&s.v));
        assert!(mat3::frobenius(&mat3::sub(&rec, m)) < 1e-9);
        for q in [&s.u, &s.v] {
            let qtq = mat3::mul(&mat3::transpose(q), q);
            assert!(mat3::frobenius(&mat3::sub(&qtq, &mat3::IDENTITY)) < 1e-9);
        }
        assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2] && s.sigma[2] >= 0.0);
    }

    #[test]
    fn svd3_random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let m = random3(&mut rng);
            let s = svd3(&m).unwrap();
            assert_reconstructs(&m, &s);
        }
        // Rank-deficient inputs still get a full orthogonal U.
        for _ in 0..100 {
            let a = random3(&mut rng);
            let t = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0];
            let m = mat3::mul(&mat3::skew(&t), &a);
            let s = svd3(&m).unwrap();
            assert_reconstructs(&m, &s);
        }
    }

    #[test]
    fn rank_two_projection_is_closest() {
        // Eckart-Young spot check: zeroing σ₃ beats every random rank-2 matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let m = random3(&mut rng);
            let s = svd3(&m).unwrap();
            let sd = [[s.sigma[0], 0.0, 0.0], [0.0, s.sigma[1], 0.0], [0.0, 0.0, 0.0]];
            let proj = mat3::mul(&mat3::mul(&s.u, &sd), &mat3::transpose(&s.v));
            let best = mat3::frobenius(&mat3::sub(&proj, &m));
            assert!((best - s.sigma[2]).abs() < 1e-9);
            for _ in 0..50 {
                let other = mat3::mul(&mat3::skew(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]), &random3(&mut rng));
                assert!(mat3::frobenius(&mat3::sub(&other, &m)) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let a = DenseMatrix::from_rows(&[[f64::NAN, 0.0, 0.0]]).unwrap();
        assert!(matches!(svd(&a), Err(NumericsError::NonFinite(_))));
    }
}
