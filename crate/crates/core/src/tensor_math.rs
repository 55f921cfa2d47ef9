//! Numerically stable vector primitives: softmax, log-sum-exp, temperature
//! scaling and top-k selection.
//!
//! All functions work on plain `f64` slices. Ties in any argmax or ordering
//! are broken by the smaller index.

use std::cmp::Ordering;

use crate::error::{CalibError, Result};

/// Probabilities are clamped to at least this value before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance for a probability vector's sum.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A finite logit vector with at least two classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_logits(&values)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn softmax(&self) -> ProbVector {
        ProbVector(softmax_unchecked(&self.0))
    }
}

/// A non-negative vector summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_probs(&values, PROB_SUM_TOL)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn check_logits(z: &[f64]) -> Result<()> {
    if z.len() < 2 {
        return Err(CalibError::InvalidInput(format!(
            "logit vector needs at least 2 classes, got {}",
            z.len()
        )));
    }
    if let Some(i) = z.iter().position(|x| !x.is_finite()) {
        return Err(CalibError::InvalidInput(format!(
            "logit {i} is not finite ({})",
            z[i]
        )));
    }
    Ok(())
}

pub(crate) fn check_probs(v: &[f64], tol: f64) -> Result<()> {
    if v.len() < 2 {
        return Err(CalibError::InvalidInput(format!(
            "probability vector needs at least 2 classes, got {}",
            v.len()
        )));
    }
    if let Some(i) = v.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(CalibError::InvalidInput(format!(
            "probability {i} is negative or not finite ({})",
            v[i]
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(CalibError::InvalidInput(format!(
            "probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(CalibError::Domain(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// `log(sum(exp(z)))` with the max shifted out.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax with max-shift. Rejects non-finite input.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_logits(z)?;
    Ok(softmax_unchecked(z))
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Element-wise `z / tau`.
pub fn scale_logits(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    Ok(z.iter().map(|x| x / tau).collect())
}

/// `softmax(z / tau)`.
pub fn softmax_at(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_logits(z)?;
    Ok(softmax_unchecked(&scale_logits(z, tau)?))
}

/// Index of the largest entry, smallest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries in descending value order.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(CalibError::Domain(format!(
            "k must be in [1, {}], got {k}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps the smaller index first among equal values
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(Ordering::Equal));
    idx.truncate(k);
    Ok(idx)
}

/// Predicted label and maximum softmax score of `z / tau`.
pub fn max_confidence(z: &[f64], tau: f64) -> Result<(usize, f64)> {
    let p = softmax_at(z, tau)?;
    let label = argmax(z);
    Ok((label, p[label]))
}
