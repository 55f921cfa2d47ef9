//! Post-hoc confidence calibration with a sample-adaptive temperature
//! network trained on a correctness-aware loss.
//!
//! The crate consumes pre-computed classifier outputs (logits plus softmax
//! vectors of transformed inputs), trains a tiny temperature-producing
//! calibrator, compares it with global temperature scaling, and evaluates
//! ECE, Brier, KS and AUROC.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod analysis;
pub mod baselines;
pub mod calibrator;
pub mod datagen;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod records;
pub mod tensor_math;

pub use calibrator::{calibrate, train, CalibratorParams, TrainConfig, TrainingTrace};
pub use error::{CalibError, Result};
pub use losses::{DiscrepancyMode, LossKind};
pub use records::{Dataset, SampleRecord};
