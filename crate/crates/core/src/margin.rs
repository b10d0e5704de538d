//! Margins, ramp loss, the margin generalization bound and effective
//! parameter counts.

use std::f64::consts::TAU;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numc::{norm_21, spectral_norm, CMatrix};
use crate::qsim::{full_unitary, Circuit, MeasurementKind, MeasurementSet, Statevector, DENSE_UNITARY_CAP};
use crate::train::batch_probabilities;

/// Points on the log-spaced grid used to minimize over the Dudley parameter.
pub const ALPHA_GRID_POINTS: usize = 200;

/// Lower end of the α grid, relative to √m.
pub const ALPHA_GRID_FLOOR: f64 = 1e-8;

/// `v_y − max_{i≠y} v_i`.
pub fn margin_operator(v: &[f64], y: usize) -> Result<f64> {
    if v.len() < 2 {
        return domain(format!("margin needs at least 2 outputs, got {}", v.len()));
    }
    if y >= v.len() {
        return domain(format!("label {y} out of range for {} outputs", v.len()));
    }
    let other = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(v[y] - other)
}

pub fn ramp_loss(x: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(if x > gamma {
        0.0
    } else if x >= 0.0 {
        1.0 - x / gamma
    } else {
        1.0
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return domain(format!("margin level must be positive, got {gamma}"));
    }
    Ok(())
}

/// One margin per (output vector, label) pair.
pub fn margins(outputs: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    if outputs.len() != labels.len() {
        return domain("outputs and labels have different lengths");
    }
    outputs.iter().zip(labels).map(|(v, &y)| margin_operator(v, y)).collect()
}

/// Fraction of margins `≤ γ`.
pub fn margin_loss_from_margins(margins: &[f64], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if margins.is_empty() {
        return domain("no margins");
    }
    Ok(margins.iter().filter(|&&x| x <= gamma).count() as f64 / margins.len() as f64)
}

pub fn empirical_margin_loss(outputs: &[Vec<f64>], labels: &[usize], gamma: f64) -> Result<f64> {
    margin_loss_from_margins(&margins(outputs, labels)?, gamma)
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return domain("quantile of an empty list");
    }
    if !(0.0..=1.0).contains(&q) {
        return domain(format!("quantile level {q} outside [0, 1]"));
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub margins: Vec<f64>,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    /// `(γ, R̂_γ)` pairs.
    pub margin_losses: Vec<(f64, f64)>,
}

impl MarginReport {
    pub fn from_margins(margins: Vec<f64>, gammas: &[f64]) -> Result<Self> {
        if margins.is_empty() {
            return domain("margin report needs at least one sample");
        }
        if margins.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite margin".into()));
        }
        let mut sorted = margins.clone();
        sorted.sort_by(f64::total_cmp);
        let margin_losses = gammas
            .iter()
            .map(|&g| Ok((g, margin_loss_from_margins(&margins, g)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            q1: quantile(&sorted, 0.25)?,
            median: quantile(&sorted, 0.5)?,
            mean: margins.iter().sum::<f64>() / margins.len() as f64,
            margins,
            margin_losses,
        })
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "margin"])?;
        for (i, m) in self.margins.iter().enumerate() {
            out.write_record([i.to_string(), m.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Margins of a trained classifier on a labelled set.
pub fn margin_report(
    c: &Circuit,
    m: &MeasurementSet,
    theta: &[f64],
    data: &[(Statevector, usize)],
    gammas: &[f64],
) -> Result<MarginReport> {
    if data.is_empty() {
        return domain("margin report on an empty dataset");
    }
    let states: Vec<&Statevector> = data.iter().map(|(s, _)| s).collect();
    let probs = batch_probabilities(c, m, theta, &states)?;
    let labels: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    MarginReport::from_margins(margins(&probs, &labels)?, gammas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateMode {
    Pure,
    Mixed,
}

/// Aggregate `E`: root sum of squared spectral (pure) or Frobenius (mixed)
/// norms of the measurement elements.
pub fn measurement_lipschitz(m: &MeasurementSet, mode: StateMode) -> Result<f64> {
    if mode == StateMode::Pure && m.kind() == MeasurementKind::Projective {
        let nonzero = m
            .elements()
            .iter()
            .filter(|e| e.frobenius_norm() > 0.0)
            .count();
        return Ok((nonzero as f64).sqrt());
    }
    let mut sum = 0.0;
    for e in m.elements() {
        let norm = match mode {
            StateMode::Pure => spectral_norm(e)?,
            StateMode::Mixed => e.frobenius_norm(),
        };
        sum += norm * norm;
    }
    Ok(sum.sqrt())
}

/// Class-wide bound `2N` on `‖U − U_ref‖_{2,1}` for unitary `U, U_ref`.
pub fn analytic_distance_bound(n_qubits: usize) -> f64 {
    2.0 * (1u64 << n_qubits) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceBound {
    pub value: f64,
    /// Zero for the analytic bound.
    pub draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DistanceMode {
    Analytic,
    Empirical { draws: usize, seed: u64 },
}

/// `b` for the circuit family, either analytic or as the maximum of
/// `‖U(θ) − U_ref‖_{2,1}` over seeded uniform draws of θ. `U_ref` defaults
/// to the identity.
pub fn distance_bound(c: &Circuit, mode: DistanceMode, u_ref: Option<&CMatrix>) -> Result<DistanceBound> {
    let dim = 1usize << c.n_qubits();
    if dim > DENSE_UNITARY_CAP {
        return Err(Error::Capacity(format!(
            "dense unitary of dimension {dim} exceeds the cap {DENSE_UNITARY_CAP}"
        )));
    }
    let identity;
    let u_ref = match u_ref {
        Some(u) => {
            if u.rows() != dim || u.cols() != dim {
                return domain("reference matrix has the wrong shape");
            }
            u
        }
        None => {
            identity = CMatrix::identity(dim);
            &identity
        }
    };
    match mode {
        DistanceMode::Analytic => Ok(DistanceBound {
            value: analytic_distance_bound(c.n_qubits()),
            draws: 0,
        }),
        DistanceMode::Empirical { draws, seed } => {
            if draws == 0 {
                return domain("empirical distance bound needs at least one draw");
            }
            let values = (0..draws)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    let theta: Vec<f64> = (0..c.n_params()).map(|_| rng.gen::<f64>() * TAU).collect();
                    Ok(norm_21(&full_unitary(c, &theta)?.sub(u_ref)?))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(DistanceBound {
                value: values.into_iter().fold(0.0, f64::max),
                draws,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub m: usize,
    pub gamma: f64,
    pub delta: f64,
    pub b: f64,
    /// Measurement aggregate `E`.
    pub e: f64,
    pub n_qubits: usize,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return domain("sample count must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 2.0) {
            return domain(format!("margin level {} outside (0, 2]", self.gamma));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return domain(format!("confidence {} outside (0, 1)", self.delta));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return domain(format!("distance bound {} must be finite and non-negative", self.b));
        }
        if !(self.e > 0.0 && self.e.is_finite()) {
            return domain(format!("measurement aggregate {} must be positive", self.e));
        }
        if self.n_qubits == 0 || self.n_qubits > 60 {
            return domain(format!("qubit count {} out of range", self.n_qubits));
        }
        Ok(())
    }

    pub fn hilbert_dim(&self) -> f64 {
        (1u64 << self.n_qubits) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub empirical_margin_loss: f64,
    pub rademacher_term: f64,
    pub confidence_term: f64,
    pub rhs_total: f64,
    pub alpha_star: f64,
}

/// The α grid: `ALPHA_GRID_POINTS` log-spaced points strictly inside
/// `(ALPHA_GRID_FLOOR·√m, √m)`.
pub fn alpha_grid(m: usize) -> Vec<f64> {
    let root = (m as f64).sqrt();
    let lo = ALPHA_GRID_FLOOR.ln();
    (1..=ALPHA_GRID_POINTS)
        .map(|i| root * (lo * (1.0 - i as f64 / (ALPHA_GRID_POINTS + 1) as f64)).exp())
        .collect()
}

/// Dudley-integral bound on the empirical Rademacher complexity at `α`.
pub fn rademacher_at(inputs: &BoundInputs, alpha: f64) -> f64 {
    let m = inputs.m as f64;
    let root = m.sqrt();
    let n = inputs.hilbert_dim();
    let count = (32.0 * m * inputs.b.powi(2) * inputs.e.powi(2) / inputs.gamma.powi(2)).ceil();
    let covering = (count * (4.0 * n * n).ln()).sqrt();
    4.0 * alpha / root + 12.0 / m * covering * (root / alpha).ln()
}

pub fn confidence_term(m: usize, delta: f64) -> f64 {
    3.0 * ((2.0 / delta).ln() / (2.0 * m as f64)).sqrt()
}

/// Right-hand side `R̂_γ + 2𝔑 + 3√(ln(2/δ)/2m)` of the margin bound.
pub fn evaluate_margin_bound(inputs: &BoundInputs, empirical_margin_loss: f64) -> Result<BoundReport> {
    inputs.validate()?;
    if !(0.0..=1.0).contains(&empirical_margin_loss) {
        return domain(format!("empirical margin loss {empirical_margin_loss} outside [0, 1]"));
    }
    let (rademacher_term, alpha_star) = if inputs.b == 0.0 {
        (0.0, 0.0)
    } else {
        alpha_grid(inputs.m)
            .into_iter()
            .map(|a| (rademacher_at(inputs, a), a))
            .fold((f64::INFINITY, 0.0), |best, cur| if cur.0 < best.0 { cur } else { best })
    };
    let confidence_term = confidence_term(inputs.m, inputs.delta);
    Ok(BoundReport {
        empirical_margin_loss,
        rademacher_term,
        confidence_term,
        rhs_total: empirical_margin_loss + 2.0 * rademacher_term + confidence_term,
        alpha_star,
    })
}

/// Shortest-arc distance between two angles.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Number of parameters that moved by more than `threshold`.
pub fn effective_parameters(theta_init: &[f64], theta_final: &[f64], threshold: f64) -> Result<usize> {
    if theta_init.len() != theta_final.len() {
        return domain(format!(
            "parameter vectors differ in length: {} vs {}",
            theta_init.len(),
            theta_final.len()
        ));
    }
    Ok(theta_init
        .iter()
        .zip(theta_final)
        .filter(|(a, b)| angle_distance(**a, **b) > threshold)
        .count())
}
