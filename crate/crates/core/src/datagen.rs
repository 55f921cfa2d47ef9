//! Synthetic classifier outputs with controllable accuracy, sharpness and
//! transform-consistency signal, plus wrongness-band subset crafting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::records::{wrongness_ratio, Dataset, SampleRecord};
use crate::tensor_math::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_transforms: usize,
    pub n: usize,
    /// Probability that a record is correctly predicted.
    pub target_rho: f64,
    /// Logit margin added to the predicted class.
    pub sharpness: f64,
    /// Standard deviation of the per-class logit noise.
    pub noise_std: f64,
    /// Probability that a transform channel peaks on the original prediction,
    /// for correct and wrong records respectively.
    pub p_agree_correct: f64,
    pub p_agree_wrong: f64,
    /// Dirichlet concentration on the peak class of each transform vector.
    pub concentration: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_transforms: 3,
            n: 20_000,
            target_rho: 0.7,
            sharpness: 4.0,
            noise_std: 0.5,
            p_agree_correct: 0.6,
            p_agree_wrong: 0.2,
            concentration: 20.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Transform channels that agree with the prediction exactly when it is correct.
    pub fn oracle_feature(self) -> Self {
        Self {
            p_agree_correct: 1.0,
            p_agree_wrong: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CalibError::Domain(msg));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_transforms == 0 {
            return fail("need at least one transform channel".into());
        }
        if self.n == 0 {
            return fail("n must be positive".into());
        }
        for (name, p) in [
            ("target_rho", self.target_rho),
            ("p_agree_correct", self.p_agree_correct),
            ("p_agree_wrong", self.p_agree_wrong),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("sharpness", self.sharpness),
            ("noise_std", self.noise_std),
            ("concentration", self.concentration),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

fn other_class(exclude: usize, c: usize, rng: &mut impl Rng) -> usize {
    let j = rng.random_range(0..c - 1);
    if j >= exclude {
        j + 1
    } else {
        j
    }
}

fn dirichlet_peak(c: usize, peak: usize, concentration: f64, rng: &mut impl Rng) -> Vec<f64> {
    let base = Gamma::new(1.0, 1.0).expect("valid gamma");
    let spike = Gamma::new(concentration, 1.0).expect("valid gamma");
    let mut v: Vec<f64> = (0..c)
        .map(|i| {
            if i == peak {
                spike.sample(rng)
            } else {
                base.sample(rng)
            }
        })
        .collect();
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= sum);
    v
}

/// Draws `cfg.n` records.
///
/// Each record is correct with probability `target_rho`. Logits are
/// `noise_std·N(0, I)` plus `sharpness` on the predicted class; wrong records
/// additionally get `sharpness·U(0, 1)` on their ground-truth class so that
/// both narrowly and absolutely wrong predictions occur. If noise moves the
/// maximum elsewhere the two entries are swapped, so correctness is exact.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let c = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n);
    for id in 0..cfg.n {
        let label = rng.random_range(0..c);
        let correct = rng.random_bool(cfg.target_rho);
        let pred = if correct {
            label
        } else {
            other_class(label, c, &mut rng)
        };

        let mut z: Vec<f64> = (0..c)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                cfg.noise_std * e
            })
            .collect();
        z[pred] += cfg.sharpness;
        if !correct {
            z[label] += cfg.sharpness * rng.random::<f64>();
        }
        let top = argmax(&z);
        if top != pred {
            z.swap(top, pred);
        }
        // exact ties would let a smaller index win the argmax
        if argmax(&z) != pred {
            z[pred] = f64::from_bits(z[pred].to_bits() + 1);
        }

        let p_agree = if correct {
            cfg.p_agree_correct
        } else {
            cfg.p_agree_wrong
        };
        let transforms = (0..cfg.num_transforms)
            .map(|_| {
                let peak = if rng.random_bool(p_agree) {
                    pred
                } else {
                    other_class(pred, c, &mut rng)
                };
                dirichlet_peak(c, peak, cfg.concentration, &mut rng)
            })
            .collect();
        records.push(SampleRecord::new(id, z, label, transforms)?);
    }
    Dataset::new(records)
}

fn in_band(ratio: f64, low: f64, high: f64) -> bool {
    // the top band is closed so that ratio = 1 is reachable
    ratio >= low && (ratio < high || (high >= 1.0 && ratio <= high))
}

/// The first `wrong_count` wrong records whose wrongness ratio falls in
/// `[low, high)` plus the first `correct_count` correct records, in dataset
/// order. Records are copied unchanged.
pub fn craft_wrongness_set(
    d: &Dataset,
    low: f64,
    high: f64,
    wrong_count: usize,
    correct_count: usize,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&low) || !(low < high) {
        return Err(CalibError::Domain(format!(
            "invalid wrongness band [{low}, {high})"
        )));
    }
    let mut wrong = Vec::with_capacity(wrong_count);
    let mut correct = Vec::with_capacity(correct_count);
    for (i, r) in d.records().iter().enumerate() {
        if r.is_correct() {
            if correct.len() < correct_count {
                correct.push(i);
            }
        } else if wrong.len() < wrong_count && in_band(wrongness_ratio(r)?, low, high) {
            wrong.push(i);
        }
    }
    if wrong.len() < wrong_count {
        let available = d
            .records()
            .iter()
            .filter(|r| !r.is_correct())
            .filter(|r| wrongness_ratio(r).is_ok_and(|x| in_band(x, low, high)))
            .count();
        return Err(CalibError::Shortfall {
            low,
            high,
            needed: wrong_count,
            available,
        });
    }
    if correct.len() < correct_count {
        return Err(CalibError::Domain(format!(
            "dataset has {} correct records, {correct_count} requested",
            correct.len()
        )));
    }
    let mut picked: Vec<usize> = wrong.into_iter().chain(correct).collect();
    picked.sort_unstable();
    if picked.is_empty() {
        return Err(CalibError::Domain("crafted set would be empty".into()));
    }
    d.subset(&picked)
}
