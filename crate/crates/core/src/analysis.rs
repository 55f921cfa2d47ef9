//! Diagnostic studies as data grids: loss surfaces over (ground-truth logit,
//! temperature), wrongness-band experiments, and the top-k sweep.

use rayon::prelude::*;

use crate::baselines::{apply_global, fit_global_temperature, log_grid, uncalibrated};
use crate::calibrator::{calibrate_dataset, train, CalibratorParams, TrainConfig};
use crate::datagen::craft_wrongness_set;
use crate::error::{CalibError, Result};
use crate::losses::{ca_loss, ce_loss, mse_loss, DiscrepancyMode, LossKind};
use crate::metrics::{auroc, ece, ks_error, report, MetricsReport};
use crate::records::{correctness_view, Dataset};
use crate::tensor_math::softmax_unchecked;

/// Logits of the three non-ground-truth classes in the surface template;
/// the full vector is `[a, 2.0, 0.1, 0.05]` with ground truth at class 0.
pub const SURFACE_TEMPLATE_TAIL: [f64; 3] = [2.0, 0.1, 0.05];

/// Wrongness-ratio bands from narrowly to absolutely wrong.
pub const DEFAULT_BANDS: [(f64, f64); 5] =
    [(0.8, 1.0), (0.6, 0.8), (0.4, 0.6), (0.2, 0.4), (0.0, 0.2)];

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub loss_kind: LossKind,
    pub mode: DiscrepancyMode,
    pub a_values: Vec<f64>,
    pub tau_values: Vec<f64>,
    /// `loss[i][j]` at `a_values[i]`, `tau_values[j]`.
    pub loss: Vec<Vec<f64>>,
    /// Softmax score of the ground-truth class at each grid point.
    pub c_gt: Vec<Vec<f64>>,
}

/// a ∈ [−2, 1.95] in steps of 0.05.
pub fn default_a_values() -> Vec<f64> {
    (0..80).map(|i| -2.0 + 0.05 * i as f64).collect()
}

/// 200 log-spaced temperatures over [0.05, 20].
pub fn default_tau_values() -> Vec<f64> {
    log_grid(0.05, 20.0, 200)
}

/// Loss of the wrongly predicted sample `[a, 2.0, 0.1, 0.05]` (label 0) over
/// a grid of `a` and temperatures.
pub fn loss_surface(
    kind: LossKind,
    mode: DiscrepancyMode,
    a_values: &[f64],
    tau_values: &[f64],
) -> Result<SurfaceGrid> {
    if let Some(a) = a_values.iter().find(|a| !(**a < SURFACE_TEMPLATE_TAIL[0])) {
        return Err(CalibError::Domain(format!(
            "a = {a} would make the sample correctly predicted (need a < 2)"
        )));
    }
    if let Some(t) = tau_values.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(CalibError::Domain(format!(
            "temperature {t} is not positive"
        )));
    }
    let mut loss = Vec::with_capacity(a_values.len());
    let mut c_gt = Vec::with_capacity(a_values.len());
    for &a in a_values {
        let z = [
            a,
            SURFACE_TEMPLATE_TAIL[0],
            SURFACE_TEMPLATE_TAIL[1],
            SURFACE_TEMPLATE_TAIL[2],
        ];
        let mut loss_row = Vec::with_capacity(tau_values.len());
        let mut gt_row = Vec::with_capacity(tau_values.len());
        for &tau in tau_values {
            let scaled: Vec<f64> = z.iter().map(|x| x / tau).collect();
            let p = softmax_unchecked(&scaled);
            let value = match kind {
                // prediction is class 1
                LossKind::Ca => ca_loss(p[1], false, mode)?,
                LossKind::Ce => ce_loss(&p, 0)?,
                LossKind::Mse => mse_loss(&p, 0)?,
            };
            loss_row.push(value);
            gt_row.push(p[0]);
        }
        loss.push(loss_row);
        c_gt.push(gt_row);
    }
    Ok(SurfaceGrid {
        loss_kind: kind,
        mode,
        a_values: a_values.to_vec(),
        tau_values: tau_values.to_vec(),
        loss,
        c_gt,
    })
}

/// Confidences of a trained calibrator on every record.
pub fn calibrated_confidences(p: &CalibratorParams, d: &Dataset) -> Result<Vec<f64>> {
    Ok(calibrate_dataset(p, d)?
        .into_iter()
        .map(|c| c.confidence)
        .collect())
}

/// Uncalibrated, global-TS and calibrator reports on `test`; global TS is
/// fitted on `train`.
pub fn compare_methods(
    train_set: &Dataset,
    test: &Dataset,
    params: &CalibratorParams,
    bins: usize,
) -> Result<Vec<MetricsReport>> {
    let ts = fit_global_temperature(train_set);
    Ok(vec![
        report(test, &uncalibrated(test), "uncalibrated", bins)?,
        report(test, &apply_global(test, ts), "global_ts", bins)?,
        report(
            test,
            &calibrated_confidences(params, test)?,
            "calibrator",
            bins,
        )?,
    ])
}

/// Which side of the experiment is restricted to a wrongness band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandSide {
    /// Train on the full training set, test on band-only wrong records.
    Test,
    /// Train on band-restricted wrong records plus correct records, test on
    /// the full test set.
    Train,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WrongnessSetup {
    pub bands: Vec<(f64, f64)>,
    pub side: BandSide,
    /// Wrong records per crafted set.
    pub wrong_count: usize,
    /// Correct records per crafted set (training side only).
    pub correct_count: usize,
    pub bins: usize,
}

impl Default for WrongnessSetup {
    fn default() -> Self {
        Self {
            bands: DEFAULT_BANDS.to_vec(),
            side: BandSide::Test,
            wrong_count: 500,
            correct_count: 1000,
            bins: crate::metrics::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WrongnessRow {
    pub band_low: f64,
    pub band_high: f64,
    pub method: String,
    pub ece: f64,
    pub auroc: Option<f64>,
    pub n: usize,
}

fn band_rows(
    band: (f64, f64),
    test: &Dataset,
    ce_params: &CalibratorParams,
    ca_params: &CalibratorParams,
    bins: usize,
) -> Result<Vec<WrongnessRow>> {
    let correct = correctness_view(test).correct;
    let methods = [
        ("uncalibrated", uncalibrated(test)),
        ("ce", calibrated_confidences(ce_params, test)?),
        ("ca", calibrated_confidences(ca_params, test)?),
    ];
    methods
        .into_iter()
        .map(|(name, conf)| {
            Ok(WrongnessRow {
                band_low: band.0,
                band_high: band.1,
                method: name.to_string(),
                ece: ece(&conf, &correct, bins)?,
                auroc: auroc(&conf, &correct).ok(),
                n: test.len(),
            })
        })
        .collect()
}

fn train_pair(d: &Dataset, config: &TrainConfig) -> Result<(CalibratorParams, CalibratorParams)> {
    let ce_cfg = TrainConfig {
        loss: LossKind::Ce,
        ..config.clone()
    };
    let ca_cfg = TrainConfig {
        loss: LossKind::Ca,
        ..config.clone()
    };
    let (ce, ca) = rayon::join(|| train(d, &ce_cfg), || train(d, &ca_cfg));
    Ok((ce?.0, ca?.0))
}

/// Compares uncalibrated, CE-trained and CA-trained calibrators per
/// wrongness band. CE and CA runs share every setting except the loss.
pub fn wrongness_experiment(
    train_set: &Dataset,
    test: &Dataset,
    setup: &WrongnessSetup,
    config: &TrainConfig,
) -> Result<Vec<WrongnessRow>> {
    let per_band: Vec<Vec<WrongnessRow>> = match setup.side {
        BandSide::Test => {
            let tests = setup
                .bands
                .iter()
                .map(|&(lo, hi)| craft_wrongness_set(test, lo, hi, setup.wrong_count, 0))
                .collect::<Result<Vec<_>>>()?;
            let (ce, ca) = train_pair(train_set, config)?;
            setup
                .bands
                .par_iter()
                .zip(&tests)
                .map(|(band, t)| band_rows(*band, t, &ce, &ca, setup.bins))
                .collect::<Result<_>>()?
        }
        BandSide::Train => {
            let trains = setup
                .bands
                .iter()
                .map(|&(lo, hi)| {
                    craft_wrongness_set(train_set, lo, hi, setup.wrong_count, setup.correct_count)
                })
                .collect::<Result<Vec<_>>>()?;
            setup
                .bands
                .par_iter()
                .zip(&trains)
                .map(|(band, tr)| {
                    let (ce, ca) = train_pair(tr, config)?;
                    band_rows(*band, test, &ce, &ca, setup.bins)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(per_band.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSweepRow {
    /// `None` for the uncalibrated reference row.
    pub k: Option<usize>,
    pub method: String,
    pub ks: f64,
    pub auroc: Option<f64>,
}

/// Trains one CA calibrator per `k` and reports KS and AUROC on `test`,
/// preceded by an uncalibrated reference row.
pub fn k_sweep(
    train_set: &Dataset,
    test: &Dataset,
    k_values: &[usize],
    config: &TrainConfig,
) -> Result<Vec<KSweepRow>> {
    let c = train_set.num_classes();
    if let Some(k) = k_values.iter().find(|k| **k == 0 || **k > c) {
        return Err(CalibError::Domain(format!("k = {k} outside [1, {c}]")));
    }
    let correct = correctness_view(test).correct;
    let base = uncalibrated(test);
    let mut rows = vec![KSweepRow {
        k: None,
        method: "uncalibrated".into(),
        ks: ks_error(&base, &correct)?,
        auroc: auroc(&base, &correct).ok(),
    }];
    let trained: Vec<KSweepRow> = k_values
        .par_iter()
        .map(|&k| {
            let cfg = TrainConfig {
                loss: LossKind::Ca,
                k,
                ..config.clone()
            };
            let (params, _) = train(train_set, &cfg)?;
            let conf = calibrated_confidences(&params, test)?;
            Ok(KSweepRow {
                k: Some(k),
                method: "ca".into(),
                ks: ks_error(&conf, &correct)?,
                auroc: auroc(&conf, &correct).ok(),
            })
        })
        .collect::<Result<_>>()?;
    rows.extend(trained);
    Ok(rows)
}
