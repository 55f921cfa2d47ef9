//! Calibration and correctness-separability metrics.
//!
//! Every metric takes per-sample top-label confidences and correctness flags
//! and returns a raw value in `[0, 1]`.

use std::cmp::Ordering;

use crate::error::{CalibError, Result};
use crate::records::{
    correctness_view, is_narrowly_wrong, wrongness_ratio, Dataset, NARROWLY_WRONG_THRESHOLD,
};

pub const DEFAULT_BINS: usize = 25;

fn check_inputs(confidence: &[f64], correct: &[bool]) -> Result<()> {
    if confidence.len() != correct.len() {
        return Err(CalibError::Domain(format!(
            "{} confidences but {} correctness flags",
            confidence.len(),
            correct.len()
        )));
    }
    if confidence.is_empty() {
        return Err(CalibError::Domain("no samples".into()));
    }
    if let Some(c) = confidence.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(CalibError::Domain(format!("confidence {c} outside (0, 1]")));
    }
    Ok(())
}

fn as_f64(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Bin of `c` among `bins` equal-width, left-open right-closed bins over (0, 1].
pub fn bin_index(c: f64, bins: usize) -> usize {
    let edge = |b: usize| b as f64 / bins as f64;
    let mut idx = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
    // correct for rounding in c * bins so that edge(idx) < c <= edge(idx + 1)
    while idx > 0 && c <= edge(idx) {
        idx -= 1;
    }
    while idx + 1 < bins && c > edge(idx + 1) {
        idx += 1;
    }
    idx
}

/// Equal-width expected calibration error.
pub fn ece(confidence: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    check_inputs(confidence, correct)?;
    if bins == 0 {
        return Err(CalibError::Domain("need at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for (c, ok) in confidence.iter().zip(correct) {
        let b = bin_index(*c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        hit_sum[b] += as_f64(*ok);
    }
    Ok(weighted_gap(&count, &conf_sum, &hit_sum, confidence.len()))
}

fn weighted_gap(count: &[usize], conf_sum: &[f64], hit_sum: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..count.len() {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        total += (nb / n as f64) * (conf_sum[b] / nb - hit_sum[b] / nb).abs();
    }
    total
}

/// ECE where every distinct confidence value is its own bin.
pub fn ece_per_value(confidence: &[f64], correct: &[bool]) -> Result<f64> {
    check_inputs(confidence, correct)?;
    let order = sorted_order(confidence);
    let mut count = Vec::new();
    let mut conf_sum = Vec::new();
    let mut hit_sum = Vec::new();
    let mut prev = f64::NAN;
    for i in order {
        if confidence[i] != prev {
            count.push(0);
            conf_sum.push(0.0);
            hit_sum.push(0.0);
            prev = confidence[i];
        }
        let b = count.len() - 1;
        count[b] += 1;
        conf_sum[b] += confidence[i];
        hit_sum[b] += as_f64(correct[i]);
    }
    Ok(weighted_gap(&count, &conf_sum, &hit_sum, confidence.len()))
}

/// Adaptive calibration error: equal-mass bins over the confidence-sorted samples.
pub fn ace(confidence: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    check_inputs(confidence, correct)?;
    if bins == 0 {
        return Err(CalibError::Domain("need at least one bin".into()));
    }
    let n = confidence.len();
    let order = sorted_order(confidence);
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for (rank, i) in order.into_iter().enumerate() {
        let b = rank * bins / n;
        count[b] += 1;
        conf_sum[b] += confidence[i];
        hit_sum[b] += as_f64(correct[i]);
    }
    Ok(weighted_gap(&count, &conf_sum, &hit_sum, n))
}

/// Top-label Brier score: mean of `(ĉ − I)²`.
pub fn brier_top_label(confidence: &[f64], correct: &[bool]) -> Result<f64> {
    check_inputs(confidence, correct)?;
    let sum: f64 = confidence
        .iter()
        .zip(correct)
        .map(|(c, ok)| (c - as_f64(*ok)).powi(2))
        .sum();
    Ok(sum / confidence.len() as f64)
}

/// Multi-class Brier score over full probability vectors, normalised by 2
/// so it lies in `[0, 1]`.
pub fn brier_full(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(CalibError::Domain(
            "probability rows and labels must be non-empty and aligned".into(),
        ));
    }
    let mut sum = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() {
            return Err(CalibError::Domain(format!("label {y} out of range")));
        }
        sum += p
            .iter()
            .enumerate()
            .map(|(c, x)| (x - as_f64(c == y)).powi(2))
            .sum::<f64>();
    }
    Ok(sum / (2.0 * probs.len() as f64))
}

/// Sample indices sorted by ascending confidence, ties by index.
fn sorted_order(confidence: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| {
        confidence[a]
            .partial_cmp(&confidence[b])
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Kolmogorov–Smirnov calibration error: largest gap between cumulative
/// confidence and cumulative correctness over confidence-sorted prefixes.
pub fn ks_error(confidence: &[f64], correct: &[bool]) -> Result<f64> {
    check_inputs(confidence, correct)?;
    let n = confidence.len() as f64;
    let mut conf_cum = 0.0;
    let mut hit_cum = 0.0;
    let mut worst: f64 = 0.0;
    for i in sorted_order(confidence) {
        conf_cum += confidence[i];
        hit_cum += as_f64(correct[i]);
        worst = worst.max(((conf_cum - hit_cum) / n).abs());
    }
    Ok(worst)
}

/// Probability that a random correct sample has higher confidence than a
/// random wrong one, ties counting one half.
pub fn auroc(confidence: &[f64], correct: &[bool]) -> Result<f64> {
    check_inputs(confidence, correct)?;
    let n_pos = correct.iter().filter(|c| **c).count();
    let n_neg = correct.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CalibError::UndefinedMetric(format!(
            "AUROC needs both correct and wrong samples ({n_pos} correct, {n_neg} wrong)"
        )));
    }
    let order = sorted_order(confidence);
    // walk groups of tied scores from low to high
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let score = confidence[order[i]];
        let (mut pos_here, mut neg_here) = (0usize, 0usize);
        while i < order.len() && confidence[order[i]] == score {
            if correct[order[i]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            i += 1;
        }
        wins += pos_here as f64 * (neg_below as f64 + 0.5 * neg_here as f64);
        neg_below += neg_here;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// All headline metrics for one calibration method on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub ece: f64,
    pub brier: f64,
    pub ks: f64,
    /// `None` when the dataset has only correct or only wrong predictions.
    pub auroc: Option<f64>,
    pub accuracy: f64,
    pub narrowly_wrong_fraction: f64,
    pub n: usize,
    pub bins: usize,
}

/// Metrics of `confidence` (one entry per record of `d`). Correctness and the
/// narrowly-wrong share come from the uncalibrated logits, which every
/// supported calibrator leaves argmax-equivalent.
pub fn report(d: &Dataset, confidence: &[f64], method: &str, bins: usize) -> Result<MetricsReport> {
    let view = correctness_view(d);
    check_inputs(confidence, &view.correct)?;
    let auroc = match auroc(confidence, &view.correct) {
        Ok(v) => Some(v),
        Err(CalibError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let mut narrow = 0usize;
    for r in d.records() {
        if !r.is_correct() && is_narrowly_wrong(wrongness_ratio(r)?, NARROWLY_WRONG_THRESHOLD) {
            narrow += 1;
        }
    }
    Ok(MetricsReport {
        method: method.to_string(),
        ece: ece(confidence, &view.correct, bins)?,
        brier: brier_top_label(confidence, &view.correct)?,
        ks: ks_error(confidence, &view.correct)?,
        auroc,
        accuracy: view.accuracy(),
        narrowly_wrong_fraction: narrow as f64 / d.len() as f64,
        n: d.len(),
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ece_cases() {
        // bin (0.48, 0.52] holds 0.5,0.5 with one hit; bin (0.96, 1] holds 1.0 with a hit
        let conf = [0.5, 0.5, 1.0];
        let correct = [true, false, true];
        assert_eq!(ece(&conf, &correct, 25).unwrap(), 0.0);
        assert_relative_eq!(ece(&[0.7], &[true], 25).unwrap(), 0.3, epsilon = 1e-15);
        assert!(ece(&[0.7], &[true, false], 25).is_err());
        assert!(ece(&[0.7], &[true], 0).is_err());
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(1.0, 25), 24);
        assert_eq!(bin_index(0.04, 25), 0);
        assert_eq!(bin_index(0.0400001, 25), 1);
        assert_eq!(bin_index(1e-9, 25), 0);
        for b in 1..=25 {
            let edge = b as f64 / 25.0;
            assert_eq!(bin_index(edge, 25), b - 1);
        }
    }

    #[test]
    fn brier_cases() {
        assert_eq!(brier_top_label(&[1.0, 1.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(brier_top_label(&[0.5], &[false]).unwrap(), 0.25);
        assert_eq!(brier_full(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        assert_eq!(brier_full(&[vec![1.0, 0.0]], &[1]).unwrap(), 1.0);
    }

    #[test]
    fn ks_cases() {
        assert_eq!(ks_error(&[1.0, 1.0], &[true, true]).unwrap(), 0.0);
        assert_relative_eq!(ks_error(&[0.8], &[false]).unwrap(), 0.8);
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(
            auroc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[0.5, 0.6], &[true, true]),
            Err(CalibError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ace_with_one_bin_is_global_gap() {
        let conf = [0.9, 0.6, 0.7];
        let correct = [true, false, true];
        let mean_conf = (0.9 + 0.6 + 0.7) / 3.0;
        assert_relative_eq!(
            ace(&conf, &correct, 1).unwrap(),
            (mean_conf - 2.0 / 3.0f64).abs(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn brute_force_oracles_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n = rng.random_range(2..120);
            // coarse grid forces ties
            let conf: Vec<f64> = (0..n)
                .map(|_| rng.random_range(1..=40) as f64 / 40.0)
                .collect();
            let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();

            let mut best: f64 = 0.0;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|a, b| conf[*a].partial_cmp(&conf[*b]).unwrap().then(a.cmp(b)));
            for end in 0..n {
                let mut s = 0.0;
                for &j in &idx[..=end] {
                    s += conf[j] - if correct[j] { 1.0 } else { 0.0 };
                }
                best = best.max((s / n as f64).abs());
            }
            assert!((ks_error(&conf, &correct).unwrap() - best).abs() < 1e-12);

            let pos: Vec<f64> = (0..n).filter(|i| correct[*i]).map(|i| conf[i]).collect();
            let neg: Vec<f64> = (0..n).filter(|i| !correct[*i]).map(|i| conf[i]).collect();
            if !pos.is_empty() && !neg.is_empty() {
                let mut wins = 0.0;
                for p in &pos {
                    for q in &neg {
                        wins += if p > q {
                            1.0
                        } else if p == q {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
                let expected = wins / (pos.len() * neg.len()) as f64;
                assert!((auroc(&conf, &correct).unwrap() - expected).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_permutation_invariant(
            rows in prop::collection::vec((1u32..=50, any::<bool>()), 2..80),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            // distinct values; KS is order-sensitive only under exact ties
            let conf: Vec<f64> = rows
                .iter()
                .enumerate()
                .map(|(i, (c, _))| (*c as f64 + i as f64 * 1e-4) / 51.0)
                .collect();
            let correct: Vec<bool> = rows.iter().map(|(_, b)| *b).collect();
            let mut perm: Vec<usize> = (0..conf.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pc: Vec<f64> = perm.iter().map(|i| conf[*i]).collect();
            let pk: Vec<bool> = perm.iter().map(|i| correct[*i]).collect();
            prop_assert!((ece(&conf, &correct, 25).unwrap() - ece(&pc, &pk, 25).unwrap()).abs() < 1e-12);
            prop_assert!((brier_top_label(&conf, &correct).unwrap() - brier_top_label(&pc, &pk).unwrap()).abs() < 1e-12);
            prop_assert!((ks_error(&conf, &correct).unwrap() - ks_error(&pc, &pk).unwrap()).abs() < 1e-12);
            if let (Ok(a), Ok(b)) = (auroc(&conf, &correct), auroc(&pc, &pk)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(
            rows in prop::collection::vec((0.01f64..1.0, any::<bool>()), 2..80),
        ) {
            let conf: Vec<f64> = rows.iter().map(|(c, _)| *c).collect();
            let correct: Vec<bool> = rows.iter().map(|(_, b)| *b).collect();
            let squashed: Vec<f64> = conf.iter().map(|c| c.powf(3.0)).collect();
            if let Ok(a) = auroc(&conf, &correct) {
                prop_assert_eq!(a, auroc(&squashed, &correct).unwrap());
            }
        }

        #[test]
        fn metrics_in_unit_interval(
            rows in prop::collection::vec((0.001f64..=1.0, any::<bool>()), 1..100),
        ) {
            let conf: Vec<f64> = rows.iter().map(|(c, _)| *c).collect();
            let correct: Vec<bool> = rows.iter().map(|(_, b)| *b).collect();
            for v in [
                ece(&conf, &correct, 25).unwrap(),
                ace(&conf, &correct, 25).unwrap(),
                brier_top_label(&conf, &correct).unwrap(),
                ks_error(&conf, &correct).unwrap(),
            ] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
