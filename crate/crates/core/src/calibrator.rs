//! Sample-adaptive temperature calibrator.
//!
//! Each record's transform softmax vectors are gathered at the top-k classes
//! of the original prediction, concatenated channel by channel into an
//! `M·k` feature vector, and mapped through a tiny ReLU network to a
//! temperature `τ = softplus(o) + τ_min`. The temperature rescales the
//! original logits only; the predicted label never changes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::losses::{loss_and_grad_unchecked, DiscrepancyMode, LossKind};
use crate::records::{Dataset, SampleRecord};
use crate::tensor_math::{argmax, softmax_unchecked, top_k_indices};

/// Width of every hidden layer.
pub const HIDDEN_WIDTH: usize = 5;

pub const DEFAULT_TAU_MIN: f64 = 0.05;

/// Number of hidden ReLU layers between the features and the scalar output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// input → 5 (ReLU) → 1
    #[default]
    OneHidden,
    /// input → 5 (ReLU) → 5 (ReLU) → 1
    TwoHidden,
}

/// A fully connected layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: vec![vec![0.0; fan_in]; fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_out)
            .map(|_| (0..fan_in).map(|_| rng.random_range(-a..=a)).collect())
            .collect();
        Self {
            weights,
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn fan_out(&self) -> usize {
        self.weights.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn num_params(&self) -> usize {
        self.fan_out() * (self.fan_in() + 1)
    }
}

/// Weights of the temperature network plus the metadata needed to apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorParams {
    pub num_classes: usize,
    pub num_transforms: usize,
    pub k: usize,
    pub tau_min: f64,
    /// One or two ReLU layers of width `HIDDEN_WIDTH`.
    pub hidden: Vec<Dense>,
    /// `1 × HIDDEN_WIDTH` output layer.
    pub output: Dense,
}

impl CalibratorParams {
    /// All-zero network.
    pub fn zeros(
        num_classes: usize,
        num_transforms: usize,
        k: usize,
        tau_min: f64,
        arch: Architecture,
    ) -> Self {
        let input = num_transforms * k;
        let mut hidden = vec![Dense::zeros(input, HIDDEN_WIDTH)];
        if arch == Architecture::TwoHidden {
            hidden.push(Dense::zeros(HIDDEN_WIDTH, HIDDEN_WIDTH));
        }
        Self {
            num_classes,
            num_transforms,
            k,
            tau_min,
            hidden,
            output: Dense::zeros(HIDDEN_WIDTH, 1),
        }
    }

    /// Glorot-uniform weights, zero hidden biases, and an output bias that
    /// puts the initial temperature at exactly 1.
    pub fn init(
        num_classes: usize,
        num_transforms: usize,
        k: usize,
        tau_min: f64,
        arch: Architecture,
        rng: &mut impl Rng,
    ) -> Self {
        let input = num_transforms * k;
        let mut hidden = vec![Dense::glorot(input, HIDDEN_WIDTH, rng)];
        if arch == Architecture::TwoHidden {
            hidden.push(Dense::glorot(HIDDEN_WIDTH, HIDDEN_WIDTH, rng));
        }
        let mut output = Dense::glorot(HIDDEN_WIDTH, 1, rng);
        if tau_min < 1.0 {
            output.bias[0] = inverse_softplus(1.0 - tau_min);
        }
        Self {
            num_classes,
            num_transforms,
            k,
            tau_min,
            hidden,
            output,
        }
    }

    pub fn input_width(&self) -> usize {
        self.num_transforms * self.k
    }

    pub fn architecture(&self) -> Architecture {
        if self.hidden.len() == 2 {
            Architecture::TwoHidden
        } else {
            Architecture::OneHidden
        }
    }

    /// Checks shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(CalibError::ParamsShape {
                field: field.to_string(),
                reason,
            })
        };
        if self.num_classes < 2 {
            return bad(
                "C",
                format!("need at least 2 classes, got {}", self.num_classes),
            );
        }
        if self.num_transforms == 0 {
            return bad("M", "need at least one transform".into());
        }
        if self.k == 0 || self.k > self.num_classes {
            return bad(
                "k",
                format!("k={} outside [1, {}]", self.k, self.num_classes),
            );
        }
        if !(self.tau_min > 0.0) || !self.tau_min.is_finite() {
            return bad("tau_min", format!("must be positive, got {}", self.tau_min));
        }
        if self.hidden.is_empty() || self.hidden.len() > 2 {
            return bad("W1", format!("{} hidden layers", self.hidden.len()));
        }
        let mut fan_in = self.input_width();
        let names = [("W1", "b1"), ("Wh", "bh")];
        for (layer, (w, b)) in self.hidden.iter().zip(names) {
            check_dense(layer, fan_in, HIDDEN_WIDTH, w, b)?;
            fan_in = HIDDEN_WIDTH;
        }
        check_dense(&self.output, HIDDEN_WIDTH, 1, "W2", "b2")
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Dense::num_params).sum()
    }

    /// Parameters flattened layer by layer (row-major weights, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            for row in &layer.weights {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut it = flat.iter();
        for layer in self.layers_mut() {
            for row in &mut layer.weights {
                for w in row.iter_mut() {
                    *w = *it.next().unwrap();
                }
            }
            for b in &mut layer.bias {
                *b = *it.next().unwrap();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

fn check_dense(layer: &Dense, fan_in: usize, fan_out: usize, w: &str, b: &str) -> Result<()> {
    if layer.weights.len() != fan_out || layer.weights.iter().any(|r| r.len() != fan_in) {
        return Err(CalibError::ParamsShape {
            field: w.to_string(),
            reason: format!("expected {fan_out}×{fan_in}"),
        });
    }
    if layer.bias.len() != fan_out {
        return Err(CalibError::ParamsShape {
            field: b.to_string(),
            reason: format!("expected {fan_out} entries, got {}", layer.bias.len()),
        });
    }
    let finite = layer
        .weights
        .iter()
        .flatten()
        .chain(&layer.bias)
        .all(|x| x.is_finite());
    if !finite {
        return Err(CalibError::ParamsShape {
            field: w.to_string(),
            reason: "non-finite parameter".into(),
        });
    }
    Ok(())
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn inverse_softplus(y: f64) -> f64 {
    // log(exp(y) - 1), stable for large y
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gathers every transform channel at the top-k classes of the original
/// softmax: `[v_1[q], v_2[q], …, v_M[q]]`.
pub fn build_features(r: &SampleRecord, k: usize) -> Result<Vec<f64>> {
    let q = top_k_indices(&r.softmax(), k)?;
    let mut out = Vec::with_capacity(r.transform_probs.len() * k);
    for v in &r.transform_probs {
        out.extend(q.iter().map(|&i| v[i]));
    }
    Ok(out)
}

struct ForwardTrace {
    /// `acts[0]` is the input; `acts[i]` the output of hidden layer `i`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: f64,
    tau: f64,
}

fn forward_trace(p: &CalibratorParams, features: &[f64]) -> ForwardTrace {
    let mut acts = vec![features.to_vec()];
    let mut pre = Vec::with_capacity(p.hidden.len());
    for layer in &p.hidden {
        let z = layer.apply(acts.last().unwrap());
        acts.push(z.iter().map(|x| x.max(0.0)).collect());
        pre.push(z);
    }
    let out = p.output.apply(acts.last().unwrap())[0];
    ForwardTrace {
        acts,
        pre,
        out,
        tau: softplus(out) + p.tau_min,
    }
}

/// Accumulates `scale · dτ/dθ` into `grad` (flat layout of `to_flat`).
fn backward(p: &CalibratorParams, trace: &ForwardTrace, scale: f64, grad: &mut [f64]) {
    let offsets: Vec<usize> = p
        .layers()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l.num_params();
            Some(start)
        })
        .collect();

    let mut delta = vec![scale * sigmoid(trace.out)];
    let n_hidden = p.hidden.len();
    for li in (0..=n_hidden).rev() {
        let layer = if li == n_hidden {
            &p.output
        } else {
            &p.hidden[li]
        };
        let input = &trace.acts[li];
        let base = offsets[li];
        let fan_in = layer.fan_in();
        for (o, d) in delta.iter().enumerate() {
            let row = base + o * fan_in;
            for (i, x) in input.iter().enumerate() {
                grad[row + i] += d * x;
            }
            grad[base + layer.fan_out() * fan_in + o] += d;
        }
        if li == 0 {
            break;
        }
        // relu'(0) = 0
        let below = &trace.pre[li - 1];
        delta = (0..fan_in)
            .map(|i| {
                if below[i] > 0.0 {
                    delta
                        .iter()
                        .enumerate()
                        .map(|(o, d)| d * layer.weights[o][i])
                        .sum()
                } else {
                    0.0
                }
            })
            .collect();
    }
}

/// Temperature produced for a feature vector.
pub fn forward(p: &CalibratorParams, features: &[f64]) -> Result<f64> {
    if features.len() != p.input_width() {
        return Err(CalibError::Domain(format!(
            "feature vector has {} entries, calibrator expects {}",
            features.len(),
            p.input_width()
        )));
    }
    Ok(forward_trace(p, features).tau)
}

/// Result of calibrating one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub tau: f64,
    pub probs: Vec<f64>,
    pub confidence: f64,
    pub predicted: usize,
}

fn check_record(p: &CalibratorParams, r: &SampleRecord) -> Result<()> {
    if r.num_classes() != p.num_classes || r.num_transforms() != p.num_transforms {
        return Err(CalibError::Domain(format!(
            "record {} has C={} M={}, calibrator expects C={} M={}",
            r.id,
            r.num_classes(),
            r.num_transforms(),
            p.num_classes,
            p.num_transforms
        )));
    }
    Ok(())
}

pub fn calibrate(p: &CalibratorParams, r: &SampleRecord) -> Result<Calibrated> {
    check_record(p, r)?;
    let tau = forward(p, &build_features(r, p.k)?)?;
    let scaled: Vec<f64> = r.logits.iter().map(|x| x / tau).collect();
    let probs = softmax_unchecked(&scaled);
    let predicted = argmax(&r.logits);
    Ok(Calibrated {
        tau,
        confidence: probs[predicted],
        probs,
        predicted,
    })
}

/// Calibrates every record. Records are processed in parallel; output order
/// matches the dataset.
pub fn calibrate_dataset(p: &CalibratorParams, d: &Dataset) -> Result<Vec<Calibrated>> {
    d.records().par_iter().map(|r| calibrate(p, r)).collect()
}

/// Optimizer and objective settings for `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub mode: DiscrepancyMode,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub tau_min: f64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Ca,
            mode: DiscrepancyMode::SquaredL2,
            k: 4,
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            tau_min: DEFAULT_TAU_MIN,
            architecture: Architecture::OneHidden,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let fail = |msg: String| Err(CalibError::InvalidInput(msg));
        if self.k == 0 || self.k > num_classes {
            return fail(format!("k={} outside [1, {num_classes}]", self.k));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return fail("Adam epsilon must be positive".into());
        }
        if !(self.tau_min > 0.0) || !self.tau_min.is_finite() {
            return fail(format!("tau_min must be positive, got {}", self.tau_min));
        }
        Ok(())
    }
}

/// Mean loss over the samples and, when `grad` is given, the mean gradient
/// added into it.
fn batch_objective(
    p: &CalibratorParams,
    features: &[Vec<f64>],
    records: &[SampleRecord],
    indices: &[usize],
    loss: LossKind,
    mode: DiscrepancyMode,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let inv_n = 1.0 / indices.len() as f64;
    let mut total = 0.0;
    for &i in indices {
        let trace = forward_trace(p, &features[i]);
        let r = &records[i];
        let (l, dl_dtau) = loss_and_grad_unchecked(&r.logits, r.label, trace.tau, loss, mode);
        total += l;
        if let Some(g) = grad.as_deref_mut() {
            if dl_dtau != 0.0 {
                backward(p, &trace, dl_dtau * inv_n, g);
            }
        }
    }
    total * inv_n
}

fn check_compatible(p: &CalibratorParams, records: &[SampleRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(CalibError::Domain("empty batch".into()));
    }
    p.validate()?;
    records.iter().try_for_each(|r| check_record(p, r))
}

/// Mean batch loss and its exact gradient with respect to every parameter,
/// returned in the same shape as `p`.
pub fn grad_params(
    p: &CalibratorParams,
    batch: &[SampleRecord],
    loss: LossKind,
    mode: DiscrepancyMode,
) -> Result<(f64, CalibratorParams)> {
    check_compatible(p, batch)?;
    let features = batch
        .iter()
        .map(|r| build_features(r, p.k))
        .collect::<Result<Vec<_>>>()?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut flat = vec![0.0; p.num_params()];
    let value = batch_objective(p, &features, batch, &idx, loss, mode, Some(&mut flat));
    let mut g = p.clone();
    g.set_flat(&flat);
    Ok((value, g))
}

/// Mean loss of `p` over a batch.
pub fn batch_loss(
    p: &CalibratorParams,
    batch: &[SampleRecord],
    loss: LossKind,
    mode: DiscrepancyMode,
) -> Result<f64> {
    check_compatible(p, batch)?;
    let features = batch
        .iter()
        .map(|r| build_features(r, p.k))
        .collect::<Result<Vec<_>>>()?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(batch_objective(p, &features, batch, &idx, loss, mode, None))
}

/// Full-dataset training loss before the first update and after each epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl TrainingTrace {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses
            .last()
            .copied()
            .unwrap_or(self.initial_loss)
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Minibatch Adam on the configured loss. Single-threaded and fully
/// determined by `(dataset, config)`.
pub fn train(d: &Dataset, cfg: &TrainConfig) -> Result<(CalibratorParams, TrainingTrace)> {
    cfg.validate(d.num_classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = CalibratorParams::init(
        d.num_classes(),
        d.num_transforms(),
        cfg.k,
        cfg.tau_min,
        cfg.architecture,
        &mut rng,
    );
    let records = d.records();
    let features = records
        .iter()
        .map(|r| build_features(r, cfg.k))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..records.len()).collect();
    let mut order = all.clone();

    let full_loss = |p: &CalibratorParams| {
        batch_objective(p, &features, records, &all, cfg.loss, cfg.mode, None)
    };
    let mut trace = TrainingTrace {
        initial_loss: full_loss(&params),
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    if !trace.initial_loss.is_finite() {
        return Err(CalibError::Training {
            epoch: 0,
            reason: format!("initial loss is {}", trace.initial_loss),
        });
    }

    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), cfg);
    let mut grad = vec![0.0; flat.len()];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let l = batch_objective(
                &params,
                &features,
                records,
                chunk,
                cfg.loss,
                cfg.mode,
                Some(&mut grad),
            );
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(CalibError::Training {
                    epoch,
                    reason: format!("minibatch loss is {l}"),
                });
            }
            adam.step(&mut flat, &grad);
            params.set_flat(&flat);
        }
        let l = full_loss(&params);
        if !l.is_finite() || !params.is_finite() {
            return Err(CalibError::Training {
                epoch,
                reason: format!("epoch loss is {l}"),
            });
        }
        log::debug!("epoch {epoch}: {} loss {l:.6}", cfg.loss);
        trace.epoch_losses.push(l);
    }
    Ok((params, trace))
}
