//! Classifier training: losses, gradients, Adam and interval-based early
//! stopping.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::qsim::{
    apply_circuit, apply_circuit_shifted, expectations, Circuit, FusedCircuit, MeasurementSet,
    Statevector,
};

pub const CE_EPSILON: f64 = 1e-12;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Batch {
    #[default]
    Full,
    Size(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    /// Reverse sweep through the statevector; one forward and one backward
    /// pass per sample.
    #[default]
    Adjoint,
    /// Two shifted circuit evaluations per parameterized gate.
    ParameterShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub convergence_interval: usize,
    pub batch: Batch,
    pub seed: u64,
    pub loss: LossKind,
    pub gradient: GradientMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            max_iters: 5000,
            convergence_interval: 500,
            batch: Batch::Full,
            seed: 0,
            loss: LossKind::CrossEntropy,
            gradient: GradientMethod::Adjoint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return domain(format!("learning rate {} must be finite and ≥ 0", self.learning_rate));
        }
        if self.max_iters == 0 || self.convergence_interval == 0 {
            return domain("max_iters and convergence_interval must be positive");
        }
        if self.batch == Batch::Size(0) {
            return domain("batch size must be positive");
        }
        Ok(())
    }
}

/// Everything downstream analysis needs from one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub theta_init: Vec<f64>,
    pub theta_final: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub stopped_at: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub dataset_manifest: Option<String>,
    pub config: TrainConfig,
}

fn check_label(probs: &[f64], y: usize) -> Result<()> {
    if y >= probs.len() {
        return domain(format!("label {y} outside [0, {})", probs.len()));
    }
    Ok(())
}

/// Per-sample loss on outcome probabilities.
pub fn loss(probs: &[f64], y: usize, kind: LossKind) -> Result<f64> {
    check_label(probs, y)?;
    Ok(match kind {
        LossKind::CrossEntropy => -(probs[y] + CE_EPSILON).ln(),
        LossKind::Linear => 1.0 - probs[y],
    })
}

/// `∂loss/∂p_c` for every outcome.
pub fn loss_grad(probs: &[f64], y: usize, kind: LossKind) -> Result<Vec<f64>> {
    check_label(probs, y)?;
    let mut g = vec![0.0; probs.len()];
    g[y] = match kind {
        LossKind::CrossEntropy => -1.0 / (probs[y] + CE_EPSILON),
        LossKind::Linear => -1.0,
    };
    Ok(g)
}

/// Index of the largest probability; ties go to the lower index.
pub fn predict(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn probabilities(c: &Circuit, m: &MeasurementSet, theta: &[f64], s: &Statevector) -> Result<Vec<f64>> {
    expectations(&apply_circuit(c, theta, s)?, m)
}

/// Outcome probabilities for every state, in input order.
pub fn batch_probabilities(
    c: &Circuit,
    m: &MeasurementSet,
    theta: &[f64],
    states: &[&Statevector],
) -> Result<Vec<Vec<f64>>> {
    let bound = FusedCircuit::new(c)?.bind(theta)?;
    states
        .par_iter()
        .map(|s| expectations(&bound.apply(s)?, m))
        .collect()
}

pub fn accuracy(c: &Circuit, m: &MeasurementSet, theta: &[f64], data: &[(Statevector, usize)]) -> Result<f64> {
    if data.is_empty() {
        return domain("accuracy of an empty dataset");
    }
    let states: Vec<&Statevector> = data.iter().map(|(s, _)| s).collect();
    let probs = batch_probabilities(c, m, theta, &states)?;
    let hits = probs.iter().zip(data).filter(|(p, (_, y))| predict(p) == *y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mean loss over the batch.
pub fn mean_loss(
    c: &Circuit,
    m: &MeasurementSet,
    batch: &[(Statevector, usize)],
    theta: &[f64],
    kind: LossKind,
) -> Result<f64> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let per: Vec<f64> = batch
        .par_iter()
        .map(|(s, y)| loss(&probabilities(c, m, theta, s)?, *y, kind))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / batch.len() as f64)
}

fn check_shift_compatible(c: &Circuit) -> Result<()> {
    for (i, g) in c.gates().iter().enumerate() {
        if g.param_slot().is_some() && !g.shift_compatible() {
            return domain(format!("gate {i} is parameterized but not shift-compatible"));
        }
    }
    Ok(())
}

fn sum_ordered(parts: Vec<Vec<f64>>, n: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for p in parts {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x *= scale);
    out
}

/// Gradient of the mean loss by the two-point shift rule. Each gate that
/// references slot `k` with scale `s` contributes
/// `s · (f(a + π/2) − f(a − π/2)) / 2`.
pub fn gradient(
    c: &Circuit,
    m: &MeasurementSet,
    batch: &[(Statevector, usize)],
    theta: &[f64],
    kind: LossKind,
) -> Result<Vec<f64>> {
    check_shift_compatible(c)?;
    if batch.is_empty() {
        return domain("empty batch");
    }
    let param_gates: Vec<(usize, usize, f64)> = c
        .gates()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.param_slot().map(|(slot, scale)| (i, slot, scale)))
        .collect();
    let parts: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|(s, y)| {
            let probs = probabilities(c, m, theta, s)?;
            let w = loss_grad(&probs, *y, kind)?;
            let mut g = vec![0.0; c.n_params()];
            for &(gi, slot, scale) in &param_gates {
                let plus = expectations(&apply_circuit_shifted(c, theta, s, gi, FRAC_PI_2)?, m)?;
                let minus = expectations(&apply_circuit_shifted(c, theta, s, gi, -FRAC_PI_2)?, m)?;
                let d: f64 = w.iter().zip(plus.iter().zip(&minus)).map(|(w, (p, q))| w * (p - q)).sum();
                g[slot] += scale * 0.5 * d;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    Ok(sum_ordered(parts, c.n_params(), 1.0 / batch.len() as f64))
}

/// Mean loss and its gradient by reverse-mode differentiation of the
/// statevector. Agrees with [`gradient`] to rounding.
pub fn loss_and_gradient_adjoint(
    c: &Circuit,
    m: &MeasurementSet,
    batch: &[(Statevector, usize)],
    theta: &[f64],
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    fused_loss_and_gradient(&FusedCircuit::new(c)?, m, batch, theta, kind)
}

fn fused_loss_and_gradient(
    f: &FusedCircuit,
    m: &MeasurementSet,
    batch: &[(Statevector, usize)],
    theta: &[f64],
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let bound = f.bind(theta)?;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|(s, y)| {
            let out = bound.apply(s)?;
            let probs = expectations(&out, m)?;
            let l = loss(&probs, *y, kind)?;
            let w = loss_grad(&probs, *y, kind)?;
            let v = m.weighted_apply(&w, out.amplitudes())?;
            // ∂p/∂θ = 2 Re⟨Eψ|∂ψ⟩
            let g = bound.vjp(&out, &v)?;
            Ok((l, g.iter().map(|z| 2.0 * z.re).collect()))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let total: f64 = parts.iter().map(|(l, _)| l).sum::<f64>() * inv;
    let grads = sum_ordered(parts.into_iter().map(|(_, g)| g).collect(), f.circuit().n_params(), inv);
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if theta.len() != grads.len() || state.m.len() != grads.len() {
        return domain("Adam state, parameters and gradient differ in length");
    }
    state.t += 1;
    let b1t = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let b2t = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..grads.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / b1t;
        let vh = state.v[i] / b2t;
        theta[i] -= lr * mh / (vh.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// True when the means of the last two intervals differ by at most the
/// (population) standard deviation of the last interval, plus 1e-12.
pub fn early_stop(history: &[f64], interval: usize) -> bool {
    if interval == 0 || history.len() < 2 * interval {
        return false;
    }
    let n = history.len();
    let (last_mean, last_std) = mean_std(&history[n - interval..]);
    let (prev_mean, _) = mean_std(&history[n - 2 * interval..n - interval]);
    (last_mean - prev_mean).abs() <= last_std + 1e-12
}

/// `θ_init` uniform in `[0, 2π)` from the config seed.
pub fn init_theta(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>() * TAU).collect()
}

/// Trains from a seeded `θ_init` until early stopping or `max_iters`.
/// Every iteration records the batch loss at the pre-update parameters.
pub fn fit(c: &Circuit, m: &MeasurementSet, data: &[(Statevector, usize)], config: &TrainConfig) -> Result<RunRecord> {
    fit_from(c, m, data, config, init_theta(c.n_params(), config.seed))
}

pub fn fit_from(
    c: &Circuit,
    m: &MeasurementSet,
    data: &[(Statevector, usize)],
    config: &TrainConfig,
    theta_init: Vec<f64>,
) -> Result<RunRecord> {
    config.validate()?;
    c.validate()?;
    if data.is_empty() {
        return domain("empty training set");
    }
    if theta_init.len() != c.n_params() {
        return domain("θ_init length differs from the circuit parameter count");
    }
    if config.gradient == GradientMethod::ParameterShift {
        check_shift_compatible(c)?;
    }
    for (s, y) in data {
        if s.dim() != m.dim() || *y >= m.len() {
            return domain("sample dimension or label inconsistent with the measurement");
        }
    }
    let fused = FusedCircuit::new(c)?;
    let mut theta = theta_init.clone();
    let mut adam = AdamState::new(theta.len());
    let mut history = Vec::with_capacity(config.max_iters);
    // Minibatch order comes from a stream separate from θ_init.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut batch_buf: Vec<(Statevector, usize)> = Vec::new();
    let mut stopped_at = config.max_iters;
    for it in 0..config.max_iters {
        let batch: &[(Statevector, usize)] = match config.batch {
            Batch::Size(b) if b < data.len() => {
                batch_buf.clear();
                while batch_buf.len() < b {
                    if cursor == data.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    batch_buf.push(data[order[cursor]].clone());
                    cursor += 1;
                }
                &batch_buf
            }
            _ => data,
        };
        let (l, g) = match config.gradient {
            GradientMethod::Adjoint => fused_loss_and_gradient(&fused, m, batch, &theta, config.loss)?,
            GradientMethod::ParameterShift => (
                mean_loss(c, m, batch, &theta, config.loss)?,
                gradient(c, m, batch, &theta, config.loss)?,
            ),
        };
        if !l.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(crate::Error::Numerical(format!("non-finite loss or gradient at iteration {it}")));
        }
        history.push(l);
        adam_step(&mut adam, &mut theta, &g, config.learning_rate)?;
        if early_stop(&history, config.convergence_interval) {
            stopped_at = it + 1;
            break;
        }
    }
    let train_accuracy = accuracy(c, m, &theta, data)?;
    Ok(RunRecord {
        theta_init,
        theta_final: theta,
        loss_history: history,
        stopped_at,
        train_accuracy,
        test_accuracy: None,
        dataset_manifest: None,
        config: config.clone(),
    })
}

/// Loss history as CSV with columns `iteration,loss`.
pub fn write_loss_csv(record: &RunRecord, w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "loss"])?;
    for (i, l) in record.loss_history.iter().enumerate() {
        out.write_record([i.to_string(), l.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
