use serde::{Deserialize, Serialize};

use super::BenchError;

pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

/// Exact area under the recall curve up to each threshold, normalized by
/// the threshold. Failures are `+∞` and only count in the denominator.
pub fn auc_exact(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>, BenchError> {
    if errors.is_empty() {
        return Err(BenchError::EmptyErrors);
    }
    if errors.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(BenchError::InvalidError);
    }
    let n = errors.len() as f64;
    // recall(e) steps up by 1/n at each error, so ∫₀^τ recall = Σ_{e<τ} (τ - e)/n.
    Ok(thresholds
        .iter()
        .map(|&tau| errors.iter().filter(|&&e| e < tau).fold(0.0, |s, e| s + (tau - e)) / (n * tau))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchMetrics {
    /// Correct predictions over `min(m, n)`.
    pub matching_score: f64,
    /// Correct over predicted; `1.0` with `empty` set when nothing was predicted.
    pub precision: f64,
    pub correct: usize,
    pub predicted: usize,
    pub empty: bool,
}

/// Correctness is exact membership in `gt`.
pub fn match_metrics(predicted: &[(usize, usize)], gt: &[(usize, usize)], m: usize, n: usize) -> MatchMetrics {
    let mut sorted = gt.to_vec();
    sorted.sort_unstable();
    let correct = predicted.iter().filter(|p| sorted.binary_search(p).is_ok()).count();
    let denom = m.min(n);
    MatchMetrics {
        matching_score: if denom == 0 { 0.0 } else { correct as f64 / denom as f64 },
        precision: if predicted.is_empty() { 1.0 } else { correct as f64 / predicted.len() as f64 },
        correct,
        predicted: predicted.len(),
        empty: predicted.is_empty(),
    }
}
