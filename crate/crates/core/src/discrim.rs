//! Binary state discrimination: ensemble trace distance, Helstrom
//! measurements and the margin-mean certificate.
//!
//! The trace distance here is `Σ|λ_i|` of `p⁺ρ⁺ − p⁻ρ⁻`, without the
//! customary factor ½, so it lies in `[|p⁺ − p⁻|, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numc::{c64, eig_hermitian, trace_norm, CMatrix};
use crate::qsim::{density_uniform, Circuit, DensityMatrix, MeasurementSet, Statevector};
use crate::train::batch_probabilities;

/// Eigenvalues at or below this are assigned to `E₋`.
pub const POSITIVE_EIGEN_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct EnsemblePair {
    pub rho_plus: DensityMatrix,
    pub rho_minus: DensityMatrix,
    pub p_plus: f64,
    pub p_minus: f64,
}

impl EnsemblePair {
    pub fn new(rho_plus: DensityMatrix, rho_minus: DensityMatrix, p_plus: f64, p_minus: f64) -> Result<Self> {
        if rho_plus.dim() != rho_minus.dim() {
            return domain(format!(
                "ensemble dimensions differ: {} vs {}",
                rho_plus.dim(),
                rho_minus.dim()
            ));
        }
        if !(p_plus >= 0.0 && p_minus >= 0.0) || (p_plus + p_minus - 1.0).abs() > 1e-12 {
            return domain(format!("priors {p_plus}, {p_minus} are not a distribution"));
        }
        Ok(Self {
            rho_plus,
            rho_minus,
            p_plus,
            p_minus,
        })
    }

    /// Uniform mixtures of each class, priors proportional to class sizes.
    pub fn from_states(plus: &[Statevector], minus: &[Statevector]) -> Result<Self> {
        if plus.is_empty() || minus.is_empty() {
            return domain("both classes need at least one state");
        }
        let total = (plus.len() + minus.len()) as f64;
        Self::new(
            density_uniform(plus)?,
            density_uniform(minus)?,
            plus.len() as f64 / total,
            minus.len() as f64 / total,
        )
    }

    /// `p⁺ρ⁺ − p⁻ρ⁻`.
    pub fn difference(&self) -> Result<CMatrix> {
        self.rho_plus
            .matrix()
            .scale_real(self.p_plus)
            .sub(&self.rho_minus.matrix().scale_real(self.p_minus))
    }

    pub fn swapped(&self) -> Self {
        Self {
            rho_plus: self.rho_minus.clone(),
            rho_minus: self.rho_plus.clone(),
            p_plus: self.p_minus,
            p_minus: self.p_plus,
        }
    }

    /// Both states conjugated by `u`.
    pub fn conjugate(&self, u: &CMatrix) -> Result<Self> {
        Self::new(
            self.rho_plus.conjugate(u)?,
            self.rho_minus.conjugate(u)?,
            self.p_plus,
            self.p_minus,
        )
    }
}

pub fn ensemble_trace_distance(e: &EnsemblePair) -> Result<f64> {
    trace_norm(&e.difference()?)
}

#[derive(Debug, Clone)]
pub struct HelstromResult {
    pub e_plus: CMatrix,
    pub e_minus: CMatrix,
    pub success_probability: f64,
    pub trace_distance: f64,
}

/// Projector onto the positive eigenspace of `p⁺ρ⁺ − p⁻ρ⁻` and its
/// complement.
pub fn helstrom(e: &EnsemblePair) -> Result<HelstromResult> {
    let diff = e.difference()?;
    let dim = diff.rows();
    let eig = eig_hermitian(&diff)?;
    let mut e_plus = CMatrix::zeros(dim, dim);
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l > POSITIVE_EIGEN_TOL {
            let v = eig.eigenvector(j);
            e_plus.axpy(c64(1.0, 0.0), &CMatrix::outer(&v, &v))?;
        }
    }
    let e_minus = CMatrix::identity(dim).sub(&e_plus)?;
    let overlap = |rho: &DensityMatrix, proj: &CMatrix| -> Result<f64> { Ok(rho.matrix().matmul(proj)?.trace().re) };
    let success_probability =
        e.p_plus * overlap(&e.rho_plus, &e_plus)? + e.p_minus * overlap(&e.rho_minus, &e_minus)?;
    Ok(HelstromResult {
        e_plus,
        e_minus,
        success_probability,
        trace_distance: eig.eigenvalues.iter().map(|l| l.abs()).sum(),
    })
}

/// `½ − D_tr`: floor on the linear training loss of any binary model.
pub fn loss_lower_bound(e: &EnsemblePair) -> Result<f64> {
    Ok(0.5 - ensemble_trace_distance(e)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginCertificate {
    pub margin_mean: f64,
    pub trace_distance: f64,
    /// `D_tr − margin_mean`; non-negative up to rounding.
    pub slack: f64,
}

/// Mean binary margin `2p_y − 1` of a two-outcome model against the trace
/// distance of the class ensembles. Label 0 is the `+` class.
pub fn margin_mean_certificate(
    c: &Circuit,
    m: &MeasurementSet,
    theta: &[f64],
    data: &[(Statevector, usize)],
) -> Result<MarginCertificate> {
    if m.len() != 2 {
        return domain(format!("certificate needs a 2-outcome readout, got {}", m.len()));
    }
    if data.is_empty() {
        return domain("certificate on an empty dataset");
    }
    if let Some((_, y)) = data.iter().find(|(_, y)| *y > 1) {
        return domain(format!("label {y} is not binary"));
    }
    let states: Vec<&Statevector> = data.iter().map(|(s, _)| s).collect();
    let probs = batch_probabilities(c, m, theta, &states)?;
    let margin_mean = data
        .iter()
        .zip(&probs)
        .map(|((_, y), p)| 2.0 * p[*y] - 1.0)
        .sum::<f64>()
        / data.len() as f64;
    let class = |label: usize| -> Vec<Statevector> {
        data.iter().filter(|(_, y)| *y == label).map(|(s, _)| s.clone()).collect()
    };
    let (plus, minus) = (class(0), class(1));
    let trace_distance = if plus.is_empty() || minus.is_empty() {
        1.0
    } else {
        ensemble_trace_distance(&EnsemblePair::from_states(&plus, &minus)?)?
    };
    Ok(MarginCertificate {
        margin_mean,
        trace_distance,
        slack: trace_distance - margin_mean,
    })
}
