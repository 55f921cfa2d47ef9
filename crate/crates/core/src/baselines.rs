//! Global temperature scaling and the uncalibrated pass-through.

use crate::error::{CalibError, Result};
use crate::losses::ce_loss;
use crate::records::Dataset;
use crate::tensor_math::{argmax, softmax_unchecked};

pub const TAU_SEARCH_LOW: f64 = 0.05;
pub const TAU_SEARCH_HIGH: f64 = 50.0;
const GRID_POINTS: usize = 200;
const GOLDEN_TOL: f64 = 1e-4;

/// A single temperature shared by every sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTemp {
    pub tau: f64,
}

impl GlobalTemp {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(CalibError::Domain(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(Self { tau })
    }
}

/// Mean cross-entropy of `softmax(z/τ)` against the labels.
pub fn mean_nll(d: &Dataset, tau: f64) -> f64 {
    let mut total = 0.0;
    let mut scaled = Vec::with_capacity(d.num_classes());
    for r in d.records() {
        scaled.clear();
        scaled.extend(r.logits.iter().map(|x| x / tau));
        let p = softmax_unchecked(&scaled);
        total += ce_loss(&p, r.label).expect("label validated on construction");
    }
    total / d.len() as f64
}

/// Log-spaced grid of `points` values over `[low, high]`.
pub fn log_grid(low: f64, high: f64, points: usize) -> Vec<f64> {
    let (a, b) = (low.ln(), high.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Minimiser of `f` on `[a, b]` by golden-section search, stopping once the
/// bracket is narrower than `tol`.
pub fn golden_section(mut a: f64, mut b: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Temperature minimising mean NLL: a log-grid over [0.05, 50] followed by
/// golden-section refinement around the best grid point.
pub fn fit_global_temperature(d: &Dataset) -> GlobalTemp {
    let grid = log_grid(TAU_SEARCH_LOW, TAU_SEARCH_HIGH, GRID_POINTS);
    let values: Vec<f64> = grid.iter().map(|t| mean_nll(d, *t)).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let tau = golden_section(lo, hi, GOLDEN_TOL, |t| mean_nll(d, t));
    // the refined point can only be kept if it is no worse than the grid point
    let tau = if mean_nll(d, tau) <= values[best] {
        tau
    } else {
        grid[best]
    };
    GlobalTemp { tau }
}

/// Per-record top-label confidence under a global temperature.
pub fn apply_global(d: &Dataset, t: GlobalTemp) -> Vec<f64> {
    d.records()
        .iter()
        .map(|r| {
            let scaled: Vec<f64> = r.logits.iter().map(|x| x / t.tau).collect();
            softmax_unchecked(&scaled)[argmax(&r.logits)]
        })
        .collect()
}

/// Per-record uncalibrated top-label confidence.
pub fn uncalibrated(d: &Dataset) -> Vec<f64> {
    d.records()
        .iter()
        .map(|r| r.softmax()[argmax(&r.logits)])
        .collect()
}
