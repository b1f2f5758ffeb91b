//! Descriptor distances, dustbin-augmented Sinkhorn transport and match
//! extraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epipolar::ScoredMatch;
use crate::numerics::{DenseMatrix, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("transport needs at least one row and one column, got {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("sinkhorn needs at least one iteration")]
    NoIterations,
}

/// Scores enter the transport as `-beta * D`; the dustbin cells hold `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub iterations: usize,
    /// Inverse temperature applied to distances.
    pub beta: f64,
    /// Dustbin score.
    pub alpha: f64,
}

impl Default for SinkhornParams {
    /// Calibrated for unit-norm descriptors: a true pair sits near
    /// `D ≈ 0.15`, unrelated pairs rarely come closer than `D ≈ 0.75`, and the
    /// dustbin behaves like a candidate at `D = 0.6`.
    fn default() -> Self {
        Self {
            iterations: 10,
            beta: 10.0,
            alpha: -6.0,
        }
    }
}

/// `D_ij = ‖X_i − Y_j‖₂` through `‖a‖² + ‖b‖² − 2aᵀb`, clamped at zero.
pub fn pairwise_distance(x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix, TransportError> {
    let g = x.matmul_transposed(y)?;
    Ok(distance_from_gram(x, y, &g))
}

/// Distances from a precomputed `X·Yᵀ`.
pub fn distance_from_gram(x: &DenseMatrix, y: &DenseMatrix, gram: &DenseMatrix) -> DenseMatrix {
    let nx: Vec<f64> = (0..x.rows()).map(|i| sq_norm(x.row(i))).collect();
    let ny: Vec<f64> = (0..y.rows()).map(|j| sq_norm(y.row(j))).collect();
    let mut data = Vec::with_capacity(x.rows() * y.rows());
    for (i, &a) in nx.iter().enumerate() {
        data.extend(gram.row(i).iter().zip(&ny).map(|(g, &b)| (a + b - 2.0 * g).max(0.0).sqrt()));
    }
    DenseMatrix::new(x.rows(), y.rows(), data).expect("shape matches")
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Transport output: the `(m+1)×(n+1)` expanded matrix whose top-left
/// `m×n` block is the match matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchMatrix {
    expanded: DenseMatrix,
    /// Iteration of the pipeline that produced this matrix.
    pub iteration: usize,
}

impl MatchMatrix {
    pub fn from_expanded(expanded: DenseMatrix, iteration: usize) -> Result<Self, TransportError> {
        if expanded.rows() < 2 || expanded.cols() < 2 {
            return Err(TransportError::Empty {
                rows: expanded.rows().saturating_sub(1),
                cols: expanded.cols().saturating_sub(1),
            });
        }
        Ok(Self { expanded, iteration })
    }

    /// Rows of the match block (`m`).
    pub fn rows(&self) -> usize {
        self.expanded.rows() - 1
    }

    /// Columns of the match block (`n`).
    pub fn cols(&self) -> usize {
        self.expanded.cols() - 1
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.expanded.get(i, j)
    }

    /// Real cells of row `i` (no dustbin).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.expanded.row(i)[..self.cols()]
    }

    pub fn expanded(&self) -> &DenseMatrix {
        &self.expanded
    }

    /// The `m×n` match block as its own matrix.
    pub fn scores(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows(), self.cols(), |i, j| self.get(i, j))
    }

    /// Row sums of the real rows over all `n+1` columns, then column sums of
    /// the real columns over all `m+1` rows.
    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.rows(), self.cols());
        let rows = (0..m).map(|i| self.expanded.row(i).iter().sum()).collect();
        let mut cols = vec![0.0; n];
        for i in 0..=m {
            for (c, v) in cols.iter_mut().zip(self.expanded.row(i)) {
                *c += v;
            }
        }
        (rows, cols)
    }

    /// Largest deviation of the real-row and real-column sums from 1.
    pub fn marginal_residual(&self) -> f64 {
        let (r, c) = self.marginals();
        r.iter().chain(&c).map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Element-wise product of the match block with `keep(i, j) ∈ {0, 1}`;
    /// dustbin cells are left untouched.
    pub fn masked(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut e = self.expanded.clone();
        for i in 0..m {
            let row = e.row_mut(i);
            for (j, v) in row.iter_mut().take(n).enumerate() {
                if !keep(i, j) {
                    *v = 0.0;
                }
            }
        }
        Self {
            expanded: e,
            iteration: self.iteration,
        }
    }

    /// For each real row, the largest real-cell value.
    pub fn row_max(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| self.row(i).iter().copied().fold(0.0, f64::max))
            .collect()
    }

    /// For each real column, the largest real-cell value.
    pub fn col_max(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.cols()];
        for i in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o = o.max(*v);
            }
        }
        out
    }
}

/// Score range above which the scaling-domain iteration could underflow.
const FAST_PATH_RANGE: f64 = 300.0;

/// Entropic transport with dustbins. Scores `-βD` get a dustbin row and
/// column filled with `α`; rows are balanced against `(1,…,1,n)` and columns
/// against `(1,…,1,m)`. Every iteration is a row pass followed by a column
/// pass, so the real columns are exact and the rows converge.
pub fn sinkhorn(d: &DenseMatrix, params: &SinkhornParams) -> Result<MatchMatrix, TransportError> {
    let (m, n) = d.shape();
    if m == 0 || n == 0 {
        return Err(TransportError::Empty { rows: m, cols: n });
    }
    if params.iterations == 0 {
        return Err(TransportError::NoIterations);
    }
    if !d.is_finite() || !params.alpha.is_finite() || !params.beta.is_finite() {
        return Err(TransportError::NonFinite("sinkhorn input"));
    }
    let score = |v: f64| -params.beta * v;
    let (lo, hi) = d
        .data()
        .iter()
        .map(|&v| score(v))
        .fold((params.alpha, params.alpha), |(a, b), v| (a.min(v), b.max(v)));
    let z = || DenseMatrix::from_fn(m + 1, n + 1, |i, j| if i < m && j < n { score(d.get(i, j)) } else { params.alpha });
    let fast = if hi - lo <= FAST_PATH_RANGE {
        // K = exp(Z − max Z), built straight from the distances.
        let mut k = Vec::with_capacity((m + 1) * (n + 1));
        for i in 0..m {
            k.extend(d.row(i).iter().map(|&v| (score(v) - hi).exp()));
            k.push((params.alpha - hi).exp());
        }
        k.extend(std::iter::repeat_n((params.alpha - hi).exp(), n + 1));
        scaling_sinkhorn(DenseMatrix::new(m + 1, n + 1, k)?, params.iterations)
    } else {
        None
    };
    let expanded = fast.unwrap_or_else(|| log_sinkhorn(&z(), params.iterations));
    MatchMatrix::from_expanded(expanded, 0)
}

fn marginals(m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![1.0; m + 1];
    a[m] = n as f64;
    let mut b = vec![1.0; n + 1];
    b[n] = m as f64;
    (a, b)
}

/// Sinkhorn on `K = exp(Z − max Z)`; identical iterates to the log-domain
/// form up to rounding. The plan overwrites `k`. Returns `None` if a scaling
/// vector leaves the representable range.
fn scaling_sinkhorn(mut k: DenseMatrix, iterations: usize) -> Option<DenseMatrix> {
    let (rows, cols) = k.shape();
    let (a, b) = marginals(rows - 1, cols - 1);
    let mut u = vec![1.0; rows];
    let mut v = vec![1.0; cols];
    let mut kt_u = vec![0.0; cols];
    for _ in 0..iterations {
        for i in 0..rows {
            let s = crate::numerics::dot_slices(k.row(i), &v);
            u[i] = a[i] / s;
        }
        kt_u.iter_mut().for_each(|x| *x = 0.0);
        for (i, ui) in u.iter().enumerate() {
            for (acc, kij) in kt_u.iter_mut().zip(k.row(i)) {
                *acc += ui * kij;
            }
        }
        for j in 0..cols {
            v[j] = b[j] / kt_u[j];
        }
        if !u.iter().chain(&v).all(|x| x.is_finite() && *x > 0.0) {
            return None;
        }
    }
    for (i, ui) in u.iter().enumerate() {
        for (p, vj) in k.row_mut(i).iter_mut().zip(&v) {
            *p = ui * *p * vj;
        }
    }
    k.is_finite().then_some(k)
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with potentials `f`, `g`.
fn log_sinkhorn(z: &DenseMatrix, iterations: usize) -> DenseMatrix {
    let (rows, cols) = z.shape();
    let (a, b) = marginals(rows - 1, cols - 1);
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; rows];
    let mut g = vec![0.0; cols];
    for _ in 0..iterations {
        for i in 0..rows {
            let r = z.row(i);
            f[i] = la[i] - log_sum_exp(r.iter().zip(&g).map(|(zij, gj)| zij + gj));
        }
        for j in 0..cols {
            g[j] = lb[j] - log_sum_exp((0..rows).map(|i| z.get(i, j) + f[i]));
        }
    }
    DenseMatrix::from_fn(rows, cols, |i, j| (z.get(i, j) + f[i] + g[j]).exp())
}

/// Matches `(i, j)` with `M_ij ≥ θ`. With `mutual`, `M_ij` must also be the
/// maximum of its row and of its column (ties go to the lowest index), so
/// every row and column appears at most once.
pub fn extract_matches(mm: &MatchMatrix, threshold: f64, mutual: bool) -> Vec<ScoredMatch> {
    let (m, n) = (mm.rows(), mm.cols());
    let mut out = Vec::new();
    if !mutual {
        for i in 0..m {
            for (j, &s) in mm.row(i).iter().enumerate() {
                if s >= threshold {
                    out.push(ScoredMatch { i, j, score: s });
                }
            }
        }
        return out;
    }
    // Column argmax, first index wins ties.
    let mut col_best = vec![(f64::NEG_INFINITY, 0usize); n];
    for i in 0..m {
        for (j, &s) in mm.row(i).iter().enumerate() {
            if s > col_best[j].0 {
                col_best[j] = (s, i);
            }
        }
    }
    for i in 0..m {
        let row = mm.row(i);
        let mut best = 0;
        for (j, &s) in row.iter().enumerate() {
            if s > row[best] {
                best = j;
            }
        }
        let s = row[best];
        if s >= threshold && col_best[best].1 == i {
            out.push(ScoredMatch { i, j: best, score: s });
        }
    }
    out
}
