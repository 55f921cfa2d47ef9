//! Frozen values from the seed-0 synthetic fixture and trend checks on it.

use approx::assert_abs_diff_eq;
use calib_lab::analysis::{calibrated_confidences, compare_methods, k_sweep};
use calib_lab::baselines::uncalibrated;
use calib_lab::datagen::{generate, SynthConfig};
use calib_lab::metrics::auroc;
use calib_lab::records::{correctness_view, Dataset};
use calib_lab::{train, TrainConfig};

fn split(cfg: SynthConfig) -> (Dataset, Dataset) {
    let d = generate(&SynthConfig { n: 25_000, ..cfg }).unwrap();
    let train_set = d.subset(&(0..20_000).collect::<Vec<_>>()).unwrap();
    let test = d.subset(&(20_000..25_000).collect::<Vec<_>>()).unwrap();
    (train_set, test)
}

#[test]
fn fixture_metrics_are_frozen() {
    let (train_set, test) = split(SynthConfig::default());
    let (params, trace) = train(&train_set, &TrainConfig::default()).unwrap();
    assert_abs_diff_eq!(trace.initial_loss, 0.18383314679184148, epsilon = 1e-9);
    assert_abs_diff_eq!(trace.final_loss(), 0.1218997135234459, epsilon = 1e-9);
    assert!(trace.final_loss() < trace.initial_loss);

    let rows = compare_methods(&train_set, &test, &params, 25).unwrap();
    let frozen = [
        (
            "uncalibrated",
            0.09480547750114156,
            0.18414233215782652,
            0.09483383943084936,
            0.7514191609568458,
        ),
        (
            "global_ts",
            0.08990839949718042,
            0.18348461546417483,
            0.08993831471078138,
            0.7504050006010338,
        ),
        (
            "calibrator",
            0.03304516516366456,
            0.12150640869429369,
            0.021588359451813425,
            0.8882642625315543,
        ),
    ];
    for (row, (method, ece, brier, ks, auc)) in rows.iter().zip(frozen) {
        assert_eq!(row.method, method);
        assert_abs_diff_eq!(row.ece, ece, epsilon = 1e-9);
        assert_abs_diff_eq!(row.brier, brier, epsilon = 1e-9);
        assert_abs_diff_eq!(row.ks, ks, epsilon = 1e-9);
        assert_abs_diff_eq!(row.auroc.unwrap(), auc, epsilon = 1e-9);
        assert_eq!(
            (row.accuracy, row.narrowly_wrong_fraction, row.n),
            (0.705, 0.0518, 5000)
        );
    }
}

#[test]
fn every_k_beats_uncalibrated_ks() {
    let (train_set, test) = split(SynthConfig::default());
    let rows = k_sweep(
        &train_set,
        &test,
        &[1, 2, 4, 6, 10],
        &TrainConfig::default(),
    )
    .unwrap();
    let base = &rows[0];
    assert_eq!(base.k, None);
    for r in &rows[1..] {
        assert!(r.ks <= base.ks, "k={:?}: {} > {}", r.k, r.ks, base.ks);
        assert!(r.auroc.unwrap() > base.auroc.unwrap());
    }
}

#[test]
fn uninformative_transforms_do_not_improve_separation() {
    let (train_set, test) = split(SynthConfig {
        p_agree_correct: 0.5,
        p_agree_wrong: 0.5,
        ..SynthConfig::default()
    });
    let (params, _) = train(&train_set, &TrainConfig::default()).unwrap();
    let correct = correctness_view(&test).correct;
    let before = auroc(&uncalibrated(&test), &correct).unwrap();
    let after = auroc(&calibrated_confidences(&params, &test).unwrap(), &correct).unwrap();
    assert!(after <= before + 0.01, "{after} vs {before}");
}

#[test]
fn oracle_feature_separates_almost_perfectly() {
    let (train_set, test) = split(SynthConfig::default().oracle_feature());
    let (params, _) = train(&train_set, &TrainConfig::default()).unwrap();
    let correct = correctness_view(&test).correct;
    let after = auroc(&calibrated_confidences(&params, &test).unwrap(), &correct).unwrap();
    assert!(after > 0.99, "{after}");
}
