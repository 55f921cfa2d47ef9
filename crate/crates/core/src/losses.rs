//! Correctness-aware (CA) loss, its bounds and decomposition, and the CE / MSE
//! training losses, together with their analytic derivatives with respect to
//! temperature.
//!
//! The CA loss of one sample is the discrepancy between its top-label
//! confidence `ĉ` and the 0/1 correctness indicator. Its batch mean lies in
//! `[(1-ρ)/C, (1-ρ)/C + (C-1)/C]` where `ρ` is the batch accuracy, and under
//! the L1 discrepancy with `ρ ≥ 0.5` it splits exactly into
//! `(1-ρ)·E_diff + (2ρ-1)·E_plus + (1-ρ)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::tensor_math::{argmax, check_logits, softmax_unchecked, PROB_FLOOR};

/// Discrepancy between confidence and correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscrepancyMode {
    L1,
    #[serde(rename = "sq")]
    SquaredL2,
}

impl fmt::Display for DiscrepancyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiscrepancyMode::L1 => write!(f, "l1"),
            DiscrepancyMode::SquaredL2 => write!(f, "sq"),
        }
    }
}

impl FromStr for DiscrepancyMode {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "sq" | "l2" => Ok(Self::SquaredL2),
            other => Err(CalibError::InvalidInput(format!(
                "unknown discrepancy mode `{other}` (expected l1 or sq)"
            ))),
        }
    }
}

/// Training objective for the calibrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ca,
    Ce,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Ca => write!(f, "ca"),
            LossKind::Ce => write!(f, "ce"),
            LossKind::Mse => write!(f, "mse"),
        }
    }
}

impl FromStr for LossKind {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ca" => Ok(Self::Ca),
            "ce" => Ok(Self::Ce),
            "mse" => Ok(Self::Mse),
            other => Err(CalibError::InvalidInput(format!(
                "unknown loss `{other}` (expected ca, ce or mse)"
            ))),
        }
    }
}

/// Closed-form range of the L1 CA batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBounds {
    pub lower: f64,
    pub upper: f64,
    pub rho: f64,
    pub num_classes: usize,
}

/// Which correct samples are paired against the wrong ones in `E_diff`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// The correct samples with the lowest confidence.
    LowestConfidence,
    /// A seeded uniformly random subset.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub e_diff: f64,
    pub e_plus: f64,
    pub rho: f64,
    /// `(1-ρ)·e_diff + (2ρ-1)·e_plus + (1-ρ)`
    pub reconstruction: f64,
    /// The directly evaluated L1 CA batch loss.
    pub loss: f64,
    /// False when `ρ < 0.5`; the terms are then diagnostics only.
    pub identity_applies: bool,
    pub pairing: Pairing,
}

fn indicator(correct: bool) -> f64 {
    if correct {
        1.0
    } else {
        0.0
    }
}

fn discrepancy(residual: f64, mode: DiscrepancyMode) -> f64 {
    match mode {
        DiscrepancyMode::L1 => residual.abs(),
        DiscrepancyMode::SquaredL2 => residual * residual,
    }
}

/// Single-sample CA loss `‖ĉ − I{correct}‖`.
pub fn ca_loss(confidence: f64, correct: bool, mode: DiscrepancyMode) -> Result<f64> {
    if !(confidence > 0.0 && confidence <= 1.0) {
        return Err(CalibError::Domain(format!(
            "confidence must lie in (0, 1], got {confidence}"
        )));
    }
    Ok(discrepancy(confidence - indicator(correct), mode))
}

/// Mean CA loss over a batch.
pub fn ca_loss_batch(confidence: &[f64], correct: &[bool], mode: DiscrepancyMode) -> Result<f64> {
    check_batch(confidence, correct)?;
    let mut sum = 0.0;
    for (c, ok) in confidence.iter().zip(correct) {
        sum += ca_loss(*c, *ok, mode)?;
    }
    Ok(sum / confidence.len() as f64)
}

fn check_batch(confidence: &[f64], correct: &[bool]) -> Result<()> {
    if confidence.is_empty() {
        return Err(CalibError::Domain("empty batch".into()));
    }
    if confidence.len() != correct.len() {
        return Err(CalibError::Domain(format!(
            "{} confidences but {} correctness flags",
            confidence.len(),
            correct.len()
        )));
    }
    Ok(())
}

pub fn ca_bounds(rho: f64, num_classes: usize) -> Result<LossBounds> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(CalibError::Domain(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    if num_classes < 2 {
        return Err(CalibError::Domain(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let c = num_classes as f64;
    let lower = (1.0 - rho) / c;
    Ok(LossBounds {
        lower,
        upper: lower + (c - 1.0) / c,
        rho,
        num_classes,
    })
}

/// Splits the L1 CA batch loss into the wrong-vs-correct confidence gap
/// `e_diff` and the residual mass `e_plus` of the unpaired correct samples.
///
/// When `ρ < 0.5` there are fewer correct samples than wrong ones; `e_diff`
/// then compares the mean wrong confidence with the mean correct confidence,
/// `e_plus` is 0, and `identity_applies` is false.
pub fn decompose(confidence: &[f64], correct: &[bool], pairing: Pairing) -> Result<Decomposition> {
    let loss = ca_loss_batch(confidence, correct, DiscrepancyMode::L1)?;
    let n = confidence.len();
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (c, ok) in confidence.iter().zip(correct) {
        if *ok {
            pos.push(*c);
        } else {
            neg.push(*c);
        }
    }
    let (n_pos, n_neg) = (pos.len(), neg.len());
    let rho = n_pos as f64 / n as f64;

    if n_pos < n_neg {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let e_diff = mean(&neg) - mean(&pos);
        let w = n_neg as f64 / n as f64;
        return Ok(Decomposition {
            e_diff,
            e_plus: 0.0,
            rho,
            reconstruction: w * e_diff + w,
            loss,
            identity_applies: false,
            pairing,
        });
    }

    match pairing {
        Pairing::LowestConfidence => pos.sort_by(|a, b| a.total_cmp(b)),
        Pairing::Random(seed) => pos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let (paired, rest) = pos.split_at(n_neg);

    let e_diff = if n_neg == 0 {
        0.0
    } else {
        (neg.iter().sum::<f64>() - paired.iter().sum::<f64>()) / n_neg as f64
    };
    let e_plus = if rest.is_empty() {
        0.0
    } else {
        rest.iter().map(|c| 1.0 - c).sum::<f64>() / rest.len() as f64
    };
    // weights from integer counts so that 1 - ρ and 2ρ - 1 carry no extra rounding
    let w_wrong = n_neg as f64 / n as f64;
    let w_rest = (n_pos - n_neg) as f64 / n as f64;
    Ok(Decomposition {
        e_diff,
        e_plus,
        rho,
        reconstruction: w_wrong * e_diff + w_rest * e_plus + w_wrong,
        loss,
        identity_applies: true,
        pairing,
    })
}

fn check_label(p: &[f64], label: usize) -> Result<()> {
    if label >= p.len() {
        return Err(CalibError::Domain(format!(
            "label {label} out of range for {} classes",
            p.len()
        )));
    }
    Ok(())
}

/// `−log p[label]` with the probability floored at `PROB_FLOOR`.
pub fn ce_loss(p: &[f64], label: usize) -> Result<f64> {
    check_label(p, label)?;
    Ok(-p[label].max(PROB_FLOOR).ln())
}

/// Squared error between `p` and the one-hot target.
pub fn mse_loss(p: &[f64], label: usize) -> Result<f64> {
    check_label(p, label)?;
    Ok(p.iter()
        .enumerate()
        .map(|(c, x)| {
            let d = x - indicator(c == label);
            d * d
        })
        .sum())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(CalibError::Domain(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// Loss of one sample with logits `z` evaluated at temperature `tau`.
///
/// For CA the prediction is `argmax z` and `ĉ = softmax(z/τ)[argmax z]`.
pub fn loss_at_tau(
    z: &[f64],
    label: usize,
    tau: f64,
    kind: LossKind,
    mode: DiscrepancyMode,
) -> Result<f64> {
    check_logits(z)?;
    check_tau(tau)?;
    check_label(z, label)?;
    Ok(loss_and_grad_unchecked(z, label, tau, kind, mode).0)
}

/// Analytic `dL/dτ` for one sample.
pub fn dloss_dtau(
    z: &[f64],
    label: usize,
    tau: f64,
    kind: LossKind,
    mode: DiscrepancyMode,
) -> Result<f64> {
    check_logits(z)?;
    check_tau(tau)?;
    check_label(z, label)?;
    Ok(loss_and_grad_unchecked(z, label, tau, kind, mode).1)
}

/// Loss and `dL/dτ` in one pass. Inputs must already be validated.
///
/// With `u = z/τ` and `p = softmax(u)`, `du_j/dτ = −z_j/τ²` and
/// `dp_j/dτ = p_j (du_j/dτ − Σ_i p_i du_i/dτ)`.
pub(crate) fn loss_and_grad_unchecked(
    z: &[f64],
    label: usize,
    tau: f64,
    kind: LossKind,
    mode: DiscrepancyMode,
) -> (f64, f64) {
    let scaled: Vec<f64> = z.iter().map(|x| x / tau).collect();
    let p = softmax_unchecked(&scaled);
    let tau2 = tau * tau;
    let du: Vec<f64> = z.iter().map(|x| -x / tau2).collect();
    let mean_du: f64 = p.iter().zip(&du).map(|(a, b)| a * b).sum();
    let dp = |j: usize| p[j] * (du[j] - mean_du);

    match kind {
        LossKind::Ca => {
            let yhat = argmax(z);
            let target = indicator(yhat == label);
            let residual = p[yhat] - target;
            let dc = dp(yhat);
            match mode {
                DiscrepancyMode::L1 => {
                    let sign = if residual > 0.0 {
                        1.0
                    } else if residual < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    (residual.abs(), sign * dc)
                }
                DiscrepancyMode::SquaredL2 => (residual * residual, 2.0 * residual * dc),
            }
        }
        LossKind::Ce => {
            if p[label] > PROB_FLOOR {
                // d(−log p_y)/dτ = −(du_y − mean_du)
                (-p[label].ln(), -(du[label] - mean_du))
            } else {
                (-PROB_FLOOR.ln(), 0.0)
            }
        }
        LossKind::Mse => {
            let mut loss = 0.0;
            let mut grad = 0.0;
            for (j, pj) in p.iter().enumerate() {
                let d = pj - indicator(j == label);
                loss += d * d;
                grad += 2.0 * d * dp(j);
            }
            (loss, grad)
        }
    }
}

#[cfg(test)]
#[allow(clippy::excessive_precision)] // oracle values keep their full printed digits
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    const L1: DiscrepancyMode = DiscrepancyMode::L1;
    const SQ: DiscrepancyMode = DiscrepancyMode::SquaredL2;

    #[test]
    fn single_sample_ca() {
        assert_eq!(ca_loss(1.0, true, L1).unwrap(), 0.0);
        assert_relative_eq!(ca_loss(0.292, false, L1).unwrap(), 0.292);
        assert_relative_eq!(ca_loss(0.6, false, SQ).unwrap(), 0.36, epsilon = 1e-15);
        assert!(matches!(ca_loss(0.0, true, L1), Err(CalibError::Domain(_))));
        assert!(ca_loss(1.2, true, L1).is_err());
        assert!(ca_loss(f64::NAN, true, L1).is_err());
    }

    #[test]
    fn batch_ca() {
        assert_eq!(ca_loss_batch(&[1.0, 1.0], &[true, true], L1).unwrap(), 0.0);
        assert_relative_eq!(
            ca_loss_batch(&[0.9, 0.3], &[true, false], L1).unwrap(),
            0.2,
            epsilon = 1e-15
        );
        assert!(ca_loss_batch(&[], &[], L1).is_err());
        assert!(ca_loss_batch(&[0.5], &[true, false], L1).is_err());
    }

    #[test]
    fn bounds_closed_form() {
        let b = ca_bounds(1.0, 10).unwrap();
        assert_eq!(b.lower, 0.0);
        assert_relative_eq!(b.upper, 0.9);
        let b = ca_bounds(0.0, 4).unwrap();
        assert_eq!(b.lower, 0.25);
        assert_eq!(b.upper, 1.0);
        let b = ca_bounds(0.8, 1000).unwrap();
        assert_relative_eq!(b.lower, 0.0002, max_relative = 1e-12);
        assert_relative_eq!(b.upper, 0.0002 + 0.999, max_relative = 1e-12);
        assert!(ca_bounds(1.5, 4).is_err());
        assert!(ca_bounds(0.5, 1).is_err());
    }

    #[test]
    fn decomposition_hand_example() {
        // direct L1 loss: (0.1 + 0.2 + 0.6) / 3 = 0.3
        // pairing 0.8 with 0.6: e_diff = -0.2, e_plus = 0.1
        let conf = [0.9, 0.8, 0.6];
        let correct = [true, true, false];
        let d = decompose(&conf, &correct, Pairing::LowestConfidence).unwrap();
        assert!(d.identity_applies);
        assert_relative_eq!(d.loss, 0.3, epsilon = 1e-15);
        assert_relative_eq!(d.e_diff, -0.2, epsilon = 1e-15);
        assert_relative_eq!(d.e_plus, 0.1, epsilon = 1e-15);
        assert!((d.reconstruction - d.loss).abs() < 1e-12);
    }

    #[test]
    fn decomposition_all_correct() {
        let d = decompose(&[1.0, 1.0, 1.0], &[true; 3], Pairing::LowestConfidence).unwrap();
        assert_eq!(d.e_plus, 0.0);
        assert_eq!(d.loss, 0.0);
        assert_eq!(d.reconstruction, 0.0);
    }

    #[test]
    fn decomposition_low_accuracy_is_diagnostic_only() {
        let d = decompose(
            &[0.9, 0.5, 0.6],
            &[true, false, false],
            Pairing::LowestConfidence,
        )
        .unwrap();
        assert!(!d.identity_applies);
        assert!(d.reconstruction.is_finite());
    }

    #[test]
    fn e_diff_decreases_when_separating() {
        let correct = [true, true, true, false, false];
        let a = decompose(
            &[0.7, 0.8, 0.9, 0.6, 0.65],
            &correct,
            Pairing::LowestConfidence,
        )
        .unwrap();
        let b = decompose(
            &[0.75, 0.85, 0.9, 0.5, 0.6],
            &correct,
            Pairing::LowestConfidence,
        )
        .unwrap();
        assert!(b.e_diff < a.e_diff);
    }

    #[test]
    fn ce_and_mse_values() {
        let onehot = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(ce_loss(&onehot, 1).unwrap(), 0.0);
        assert_relative_eq!(ce_loss(&[0.25; 4], 2).unwrap(), 4f64.ln());
        assert_eq!(mse_loss(&onehot, 1).unwrap(), 0.0);
        assert_relative_eq!(mse_loss(&[0.25; 4], 3).unwrap(), 0.75);

        // mpmath: softmax([1, 2, 0.1, 0.05]) against label 0
        let p = softmax_unchecked(&[1.0, 2.0, 0.1, 0.05]);
        assert_relative_eq!(
            ce_loss(&p, 0).unwrap(),
            1.506_650_197_983_981_8,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            mse_loss(&p, 0).unwrap(),
            0.984_314_921_286_259_56,
            max_relative = 1e-14
        );

        // floor keeps CE finite
        assert_relative_eq!(ce_loss(&onehot, 0).unwrap(), -PROB_FLOOR.ln());
        assert!(ce_loss(&onehot, 4).is_err());
    }

    #[test]
    fn constant_logits_have_zero_tau_gradient() {
        let z = [1.3; 5];
        for kind in [LossKind::Ca, LossKind::Ce, LossKind::Mse] {
            for mode in [L1, SQ] {
                assert_eq!(dloss_dtau(&z, 2, 0.7, kind, mode).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn ca_gradient_negative_for_wrong_prediction() {
        let z = [1.9, 2.0, 0.1, 0.05];
        for tau in [0.1, 0.5, 1.0, 3.0, 10.0] {
            for mode in [L1, SQ] {
                assert!(dloss_dtau(&z, 0, tau, LossKind::Ca, mode).unwrap() < 0.0);
            }
        }
        assert!(dloss_dtau(&z, 0, 0.0, LossKind::Ca, SQ).is_err());
    }

    #[test]
    fn tau_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..300 {
            let c = rng.random_range(2..12);
            let z: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
            let label = rng.random_range(0..c);
            let tau = rng.random_range(0.3..5.0);
            for kind in [LossKind::Ca, LossKind::Ce, LossKind::Mse] {
                for mode in [L1, SQ] {
                    let g = dloss_dtau(&z, label, tau, kind, mode).unwrap();
                    let fp = loss_at_tau(&z, label, tau + h, kind, mode).unwrap();
                    let fm = loss_at_tau(&z, label, tau - h, kind, mode).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    assert!(
                        (g - fd).abs() / g.abs().max(1.0) < 1e-5,
                        "{kind} {mode}: {g} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn ca_non_increasing_in_tau_for_wrong_sample() {
        let z = [0.5, 2.0, 0.1, 0.05];
        let mut prev = f64::INFINITY;
        let mut tau = 0.05;
        while tau <= 50.0 {
            let l = loss_at_tau(&z, 0, tau, LossKind::Ca, L1).unwrap();
            assert!(l <= prev);
            prev = l;
            tau += 0.05;
        }
    }

    proptest! {
        #[test]
        fn batch_within_bounds(
            c in 2usize..200,
            rows in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..300),
        ) {
            let lo = 1.0 / c as f64;
            let conf: Vec<f64> = rows.iter().map(|(u, _)| 1.0 - u * (1.0 - lo)).collect();
            let correct: Vec<bool> = rows.iter().map(|(_, b)| *b).collect();
            let rho = correct.iter().filter(|b| **b).count() as f64 / correct.len() as f64;
            let b = ca_bounds(rho, c).unwrap();
            let loss = ca_loss_batch(&conf, &correct, L1).unwrap();
            prop_assert!(loss >= b.lower - 1e-12 && loss <= b.upper + 1e-12);
        }

        #[test]
        fn identity_holds_for_any_pairing(
            rows in prop::collection::vec((0.01f64..1.0, 0.0f64..1.0), 2..200),
            seed in any::<u64>(),
        ) {
            let conf: Vec<f64> = rows.iter().map(|(c, _)| *c).collect();
            // bias towards correct so that most batches satisfy ρ ≥ 0.5
            let correct: Vec<bool> = rows.iter().map(|(_, u)| *u < 0.7).collect();
            for pairing in [Pairing::LowestConfidence, Pairing::Random(seed)] {
                let d = decompose(&conf, &correct, pairing).unwrap();
                if d.rho >= 0.5 {
                    prop_assert!(d.identity_applies);
                    prop_assert!((d.reconstruction - d.loss).abs() < 1e-10);
                }
            }
        }
    }
}
