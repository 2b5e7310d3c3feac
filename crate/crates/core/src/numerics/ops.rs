use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, norm, Matrix};

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// A zero-norm argument is an error rather than a similarity of 0.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::mismatch("cosine_sim", (1, u.len()), (1, v.len())));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim"));
    }
    let s = dot(u, v) / (nu * nv);
    if !s.is_finite() {
        return Err(Error::NonFinite("cosine_sim"));
    }
    Ok(s.clamp(-1.0, 1.0))
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Descending by score, ties by ascending index.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest scores, best first; equal scores keep
/// ascending index order.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k with k={k} over {} scores",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(idx)
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Central-difference gradient of `f` at `at`, one entry at a time.
pub fn finite_diff_grad<F>(mut f: F, at: &Matrix, eps: f64) -> Matrix
where
    F: FnMut(&Matrix) -> f64,
{
    let mut x = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.len() {
        let orig = x.as_slice()[i];
        x.as_mut_slice()[i] = orig + eps;
        let plus = f(&x);
        x.as_mut_slice()[i] = orig - eps;
        let minus = f(&x);
        x.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, or 0 when both are (numerically) zero.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius_norm() + numeric.frobenius_norm();
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}
