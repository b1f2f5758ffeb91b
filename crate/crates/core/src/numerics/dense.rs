use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::BadShape {
                    rows: rows.len(),
                    cols,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Keeps the listed rows, in the listed order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Channel-wise concatenation `[self | other]`.
    pub fn hcat(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.rows != other.rows {
            return Err(NumericsError::DimensionMismatch {
                op: "hcat",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Stacks `other` below `self`.
    pub fn vcat(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.cols != other.cols {
            return Err(NumericsError::DimensionMismatch {
                op: "vcat",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Column block `start..end`.
    pub fn col_block(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::DimensionMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self · otherᵀ`, the shape used by attention logits and distances.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.cols != other.cols {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul_transposed",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, n) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(m * n);
        let full = n - n % 4;
        for i in 0..m {
            let a = self.row(i);
            for j in (0..full).step_by(4) {
                out.extend_from_slice(&dot4(a, [other.row(j), other.row(j + 1), other.row(j + 2), other.row(j + 3)]));
            }
            for j in full..n {
                out.push(dot_slices(a, other.row(j)));
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }
}

/// Dot product with a fixed left-to-right summation order.
#[inline]
pub fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the order fixed while letting the loop vectorize.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Four dot products against the same `a`, each bit-identical to
/// [`dot_slices`]; interleaving them hides the add latency.
#[inline]
fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
    let n = a.len();
    if b.iter().any(|r| r.len() != n) {
        return b.map(|r| dot_slices(a, r));
    }
    let mut acc = [[0.0f64; 4]; 4];
    let full = n - n % 4;
    for k in (0..full).step_by(4) {
        let x = &a[k..k + 4];
        for (acc, r) in acc.iter_mut().zip(&b) {
            let y = &r[k..k + 4];
            acc[0] += x[0] * y[0];
            acc[1] += x[1] * y[1];
            acc[2] += x[2] * y[2];
            acc[3] += x[3] * y[3];
        }
    }
    let mut out = [0.0; 4];
    for ((o, acc), r) in out.iter_mut().zip(&acc).zip(&b) {
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for (x, y) in a[full..].iter().zip(&r[full..]) {
            s += x * y;
        }
        *o = s;
    }
    out
}

thread_local! {
    static SOFTMAX_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`softmax_rows`] evaluations made on the current thread.
pub fn softmax_call_count() -> usize {
    SOFTMAX_CALLS.with(Cell::get)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    SOFTMAX_CALLS.with(|c| c.set(c.get() + 1));
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn blocked_gram_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (m, n, d) in [(5, 11, 32), (3, 4, 7), (2, 9, 1), (6, 3, 33)] {
            let (a, b) = (random(m, d, &mut rng), random(n, d, &mut rng));
            let g = a.matmul_transposed(&b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    assert_eq!(g.get(i, j).to_bits(), dot_slices(a.row(i), b.row(j)).to_bits());
                }
            }
        }
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 4, &mut rng);
        assert_eq!(DenseMatrix::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
        let ct = a.matmul_transposed(&b.transpose()).unwrap();
        assert!(c.max_abs_diff(&ct) < 1e-12);
    }

    #[test]
    fn product_dimension_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&a),
            Err(NumericsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_dominant() {
        let m = DenseMatrix::from_rows(&[[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.get(1, 0) - 1.0).abs() < 1e-15);
        assert!(s.get(1, 1) < 1e-300 && s.is_finite());
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(3, 3, &mut rng);
        let s = softmax_rows(&m);
        for i in 0..3 {
            let denom: f64 = m.row(i).iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                assert!((s.get(i, j) - m.get(i, j).exp() / denom).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_counter_is_per_thread() {
        let before = softmax_call_count();
        softmax_rows(&DenseMatrix::zeros(1, 1));
        softmax_rows(&DenseMatrix::zeros(2, 2));
        assert_eq!(softmax_call_count() - before, 2);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-700.0f64..700.0, 12)) {
            let m = DenseMatrix::new(3, 4, values).unwrap();
            let s = softmax_rows(&m);
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-9);
                proptest::prop_assert!(s.row(i).iter().all(|v| *v >= 0.0));
            }
        }
    }
}
