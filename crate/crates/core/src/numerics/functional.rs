//! Plain (non-tape) numeric entry points with input validation.

use crate::error::{Error, Result};

/// Stabilized softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax: empty input".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("softmax: NaN input".into()));
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Cosine similarity of two equal-length vectors with nonzero norms.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine_similarity: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine_similarity: zero-norm vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Sliding-window mean over the rows of a T×d sequence, edge-replicated
/// asymmetric padding (⌊(k−1)/2⌋ front, ⌈(k−1)/2⌉ back).
pub fn moving_average(seq: &[f64], t: usize, d: usize, k: usize) -> Result<Vec<f64>> {
    if k < 1 || k > 2 * t {
        return Err(Error::InvalidArgument(format!("moving_average: window {k} for T={t}")));
    }
    let front = (k - 1) / 2;
    let inv = 1.0 / k as f64;
    let mut out = vec![0.0; t * d];
    for ot in 0..t {
        for w in 0..k {
            let src = (ot + w).saturating_sub(front).min(t - 1);
            for j in 0..d {
                out[ot * d + j] += seq[src * d + j] * inv;
            }
        }
    }
    Ok(out)
}
