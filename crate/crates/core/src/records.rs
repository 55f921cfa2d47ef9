//! Per-sample classifier outputs and the datasets built from them.

use crate::error::{CalibError, Result};
use crate::tensor_math::{self, argmax, check_logits, check_probs, PROB_SUM_TOL};

/// A wrong prediction is "narrowly wrong" when `p_gt / p_pred` exceeds this.
pub const NARROWLY_WRONG_THRESHOLD: f64 = 0.5;

/// One classified example.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Source position (1-based line number for loaded files, index for generated data).
    pub id: usize,
    pub logits: Vec<f64>,
    pub label: usize,
    /// Softmax outputs of the classifier on each transformed variant.
    pub transform_probs: Vec<Vec<f64>>,
}

impl SampleRecord {
    pub fn new(
        id: usize,
        logits: Vec<f64>,
        label: usize,
        transform_probs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let record = Self {
            id,
            logits,
            label,
            transform_probs,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn num_transforms(&self) -> usize {
        self.transform_probs.len()
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn is_correct(&self) -> bool {
        self.predicted() == self.label
    }

    pub fn softmax(&self) -> Vec<f64> {
        tensor_math::softmax_unchecked(&self.logits)
    }

    fn validate(&self) -> Result<()> {
        check_logits(&self.logits)?;
        let c = self.logits.len();
        if self.label >= c {
            return Err(CalibError::InvalidInput(format!(
                "label {} out of range for {c} classes",
                self.label
            )));
        }
        if self.transform_probs.is_empty() {
            return Err(CalibError::InvalidInput(
                "record needs at least one transform channel".into(),
            ));
        }
        for (i, v) in self.transform_probs.iter().enumerate() {
            if v.len() != c {
                return Err(CalibError::InvalidInput(format!(
                    "transform {i} has {} entries, expected {c}",
                    v.len()
                )));
            }
            check_probs(v, PROB_SUM_TOL)
                .map_err(|e| CalibError::InvalidInput(format!("transform {i}: {e}")))?;
        }
        Ok(())
    }
}

/// A non-empty collection of records sharing class and transform counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SampleRecord>,
    num_classes: usize,
    num_transforms: usize,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| CalibError::InvalidInput("dataset is empty".into()))?;
        let num_classes = first.num_classes();
        let num_transforms = first.num_transforms();
        for r in &records {
            r.validate()?;
            if r.num_classes() != num_classes || r.num_transforms() != num_transforms {
                return Err(CalibError::InvalidInput(format!(
                    "record {} has C={} M={}, dataset has C={num_classes} M={num_transforms}",
                    r.id,
                    r.num_classes(),
                    r.num_transforms()
                )));
            }
        }
        Ok(Self {
            records,
            num_classes,
            num_transforms,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_transforms(&self) -> usize {
        self.num_transforms
    }

    /// Dataset of the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }
}

/// Predicted label, correctness and uncalibrated confidence for every record.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectnessView {
    pub predicted: Vec<usize>,
    pub correct: Vec<bool>,
    pub confidence: Vec<f64>,
}

impl CorrectnessView {
    /// Fraction of correct predictions.
    pub fn accuracy(&self) -> f64 {
        self.correct.iter().filter(|c| **c).count() as f64 / self.correct.len() as f64
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }
}

pub fn correctness_view(d: &Dataset) -> CorrectnessView {
    let mut predicted = Vec::with_capacity(d.len());
    let mut correct = Vec::with_capacity(d.len());
    let mut confidence = Vec::with_capacity(d.len());
    for r in d.records() {
        let p = r.softmax();
        let yhat = argmax(&r.logits);
        predicted.push(yhat);
        correct.push(yhat == r.label);
        confidence.push(p[yhat]);
    }
    CorrectnessView {
        predicted,
        correct,
        confidence,
    }
}

/// Ratio of the ground-truth probability to the predicted-class probability
/// for a wrongly predicted record.
pub fn wrongness_ratio(r: &SampleRecord) -> Result<f64> {
    let yhat = r.predicted();
    if yhat == r.label {
        return Err(CalibError::Domain(format!(
            "record {} is correctly predicted; wrongness ratio is undefined",
            r.id
        )));
    }
    // p_gt / p_pred = exp(z_gt - z_pred); exact even when both probabilities underflow
    Ok((r.logits[r.label] - r.logits[yhat]).exp())
}

pub fn is_narrowly_wrong(ratio: f64, threshold: f64) -> bool {
    ratio > threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rec(logits: Vec<f64>, label: usize) -> SampleRecord {
        let c = logits.len();
        SampleRecord::new(0, logits, label, vec![vec![1.0 / c as f64; c]]).unwrap()
    }

    #[test]
    fn correctness_flags() {
        let d = Dataset::new(vec![
            rec(vec![5.0, 0.0, 0.0, 0.0], 0),
            rec(vec![5.0, 0.0, 0.0, 0.0], 1),
        ])
        .unwrap();
        let v = correctness_view(&d);
        assert_eq!(v.correct, vec![true, false]);
        assert_eq!(v.predicted, vec![0, 0]);
        assert_eq!(v.accuracy(), 0.5);
    }

    #[test]
    fn accuracy_matches_direct_count() {
        let records: Vec<_> = (0..57)
            .map(|i| {
                let z = vec![(i % 3) as f64, ((i * 7) % 5) as f64, 1.5];
                rec(z, i % 3)
            })
            .collect();
        let d = Dataset::new(records.clone()).unwrap();
        let mut hits = 0;
        for r in &records {
            let mut best = 0;
            for c in 1..r.logits.len() {
                if r.logits[c] > r.logits[best] {
                    best = c;
                }
            }
            if best == r.label {
                hits += 1;
            }
        }
        assert_eq!(correctness_view(&d).accuracy(), hits as f64 / 57.0);
    }

    #[test]
    fn view_ignores_transforms() {
        let a = SampleRecord::new(0, vec![1.0, 2.0, 0.0], 1, vec![vec![0.2, 0.3, 0.5]]).unwrap();
        let mut b = a.clone();
        b.transform_probs = vec![vec![0.9, 0.05, 0.05]];
        let va = correctness_view(&Dataset::new(vec![a]).unwrap());
        let vb = correctness_view(&Dataset::new(vec![b]).unwrap());
        assert_eq!(va, vb);
    }

    #[test]
    fn wrongness_ratio_cases() {
        // probabilities 0.412 (ground truth) vs 0.455 (prediction)
        let r = rec(vec![0.412f64.ln(), 0.455f64.ln(), 0.133f64.ln()], 0);
        let ratio = wrongness_ratio(&r).unwrap();
        assert_relative_eq!(ratio, 0.412 / 0.455, max_relative = 1e-12);
        assert!((ratio - 0.905).abs() < 1e-3);
        assert!(is_narrowly_wrong(ratio, NARROWLY_WRONG_THRESHOLD));

        let r = rec(vec![0.01f64.ln(), 0.9f64.ln(), 0.09f64.ln()], 0);
        let ratio = wrongness_ratio(&r).unwrap();
        assert_relative_eq!(ratio, 0.01 / 0.9, max_relative = 1e-12);
        assert!(!is_narrowly_wrong(ratio, NARROWLY_WRONG_THRESHOLD));

        let r = rec(vec![3.0, 0.0], 0);
        assert!(matches!(wrongness_ratio(&r), Err(CalibError::Domain(_))));
    }

    #[test]
    fn dataset_rejects_mixed_shapes() {
        assert!(Dataset::new(vec![]).is_err());
        let a = rec(vec![1.0, 0.0], 0);
        let b = rec(vec![1.0, 0.0, 0.0], 0);
        assert!(Dataset::new(vec![a, b]).is_err());
    }

    #[test]
    fn record_validation() {
        assert!(SampleRecord::new(0, vec![1.0, 0.0], 2, vec![vec![0.5, 0.5]]).is_err());
        assert!(SampleRecord::new(0, vec![1.0, 0.0], 0, vec![]).is_err());
        assert!(SampleRecord::new(0, vec![1.0, 0.0], 0, vec![vec![0.5, 0.6]]).is_err());
        assert!(SampleRecord::new(0, vec![1.0, 0.0], 0, vec![vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn ratio_in_unit_interval(
            z in prop::collection::vec(-20.0f64..20.0, 2..10),
            label in 0usize..10,
        ) {
            let label = label % z.len();
            let r = rec(z, label);
            if !r.is_correct() {
                let ratio = wrongness_ratio(&r).unwrap();
                prop_assert!(ratio > 0.0 && ratio <= 1.0);
            }
        }
    }
}
