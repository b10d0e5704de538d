//! n-qubit statevector simulator.
//!
//! Conventions:
//! - qubit 0 is the most significant bit of a basis index;
//! - `RX/RY/RZ(θ) = exp(−iθP/2)`, `RZZ(θ) = exp(−iθ Z⊗Z/2)`,
//!   `RYY(θ) = exp(+iθ Y⊗Y/2)`.
//!
//! Gates are applied by stride kernels that touch each amplitude once.
//! [`full_unitary`] assembles the dense matrix column by column and is meant
//! for oracles and the distance bound.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numc::{c64, inner, vec_norm, CMatrix, C64, HERMITIAN_TOL};

mod fused;
pub use fused::{BoundCircuit, FusedCircuit};

/// Largest register handled by the simulator.
pub const MAX_QUBITS: usize = 12;

/// Largest Hilbert dimension for which [`full_unitary`] builds a dense matrix.
pub const DENSE_UNITARY_CAP: usize = 512;

const NORM_TOL: f64 = 1e-10;

/// A normalized pure state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statevector {
    n_qubits: usize,
    amplitudes: Vec<C64>,
}

impl Statevector {
    /// |0…0⟩.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        Self::basis(n_qubits, 0)
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        check_qubits(n_qubits)?;
        let dim = 1usize << n_qubits;
        if index >= dim {
            return domain(format!("basis index {index} out of range for {n_qubits} qubits"));
        }
        let mut amplitudes = vec![C64::default(); dim];
        amplitudes[index] = c64(1.0, 0.0);
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    /// Wraps amplitudes that must already be normalized.
    pub fn from_amplitudes(amplitudes: Vec<C64>) -> Result<Self> {
        let n_qubits = qubits_for_dim(amplitudes.len())?;
        let norm = vec_norm(&amplitudes);
        if !norm.is_finite() || (norm * norm - 1.0).abs() > NORM_TOL {
            return domain(format!("state is not normalized (norm² = {})", norm * norm));
        }
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    /// Rescales arbitrary nonzero amplitudes to unit norm.
    pub fn normalized(mut amplitudes: Vec<C64>) -> Result<Self> {
        let norm = vec_norm(&amplitudes);
        if norm <= 0.0 || !norm.is_finite() {
            return domain("cannot normalize a zero or non-finite vector");
        }
        amplitudes.iter_mut().for_each(|a| *a /= norm);
        Self::from_amplitudes(amplitudes)
    }

    #[inline]
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    #[inline]
    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        vec_norm(&self.amplitudes)
    }

    pub fn inner(&self, other: &Self) -> C64 {
        inner(&self.amplitudes, &other.amplitudes)
    }

    /// |⟨self|other⟩|².
    pub fn fidelity(&self, other: &Self) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }
}

fn check_qubits(n: usize) -> Result<()> {
    if n == 0 || n > MAX_QUBITS {
        return Err(Error::Capacity(format!(
            "register of {n} qubits outside 1..={MAX_QUBITS}"
        )));
    }
    Ok(())
}

fn qubits_for_dim(dim: usize) -> Result<usize> {
    if dim < 2 || !dim.is_power_of_two() {
        return domain(format!("dimension {dim} is not a power of two ≥ 2"));
    }
    let n = dim.trailing_zeros() as usize;
    check_qubits(n)?;
    Ok(n)
}

/// Rotation angle: a constant, or `scale · θ[slot]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Angle {
    Fixed(f64),
    Param { slot: usize, scale: f64 },
}

impl Angle {
    pub fn param(slot: usize) -> Self {
        Angle::Param { slot, scale: 1.0 }
    }

    #[inline]
    pub fn value(&self, params: &[f64]) -> f64 {
        match *self {
            Angle::Fixed(v) => v,
            Angle::Param { slot, scale } => scale * params[slot],
        }
    }

    pub fn slot(&self) -> Option<(usize, f64)> {
        match *self {
            Angle::Fixed(_) => None,
            Angle::Param { slot, scale } => Some((slot, scale)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Gate {
    H(usize),
    X(usize),
    Rx(usize, Angle),
    Ry(usize, Angle),
    Rz(usize, Angle),
    Cnot { control: usize, target: usize },
    Cz(usize, usize),
    Rzz(usize, usize, Angle),
    Ryy(usize, usize, Angle),
    /// Fixed single-qubit unitary, row-major 2×2.
    Unitary1(usize, Box<[C64; 4]>),
    /// Fixed two-qubit unitary, row-major 4×4 with the first wire as the
    /// more significant bit.
    Unitary2(usize, usize, Box<[C64; 16]>),
}

impl Gate {
    pub fn wires(&self) -> Vec<usize> {
        match *self {
            Gate::H(w) | Gate::X(w) | Gate::Rx(w, _) | Gate::Ry(w, _) | Gate::Rz(w, _) => vec![w],
            Gate::Unitary1(w, _) => vec![w],
            Gate::Cnot { control, target } => vec![control, target],
            Gate::Cz(a, b) | Gate::Rzz(a, b, _) | Gate::Ryy(a, b, _) | Gate::Unitary2(a, b, _) => {
                vec![a, b]
            }
        }
    }

    pub fn angle(&self) -> Option<Angle> {
        match *self {
            Gate::Rx(_, a) | Gate::Ry(_, a) | Gate::Rz(_, a) => Some(a),
            Gate::Rzz(_, _, a) | Gate::Ryy(_, _, a) => Some(a),
            _ => None,
        }
    }

    fn angle_mut(&mut self) -> Option<&mut Angle> {
        match self {
            Gate::Rx(_, a) | Gate::Ry(_, a) | Gate::Rz(_, a) => Some(a),
            Gate::Rzz(_, _, a) | Gate::Ryy(_, _, a) => Some(a),
            _ => None,
        }
    }

    /// Parameter slot and scale, when the gate angle is trainable.
    pub fn param_slot(&self) -> Option<(usize, f64)> {
        self.angle().and_then(|a| a.slot())
    }

    /// True when the gate is `exp(−iaG)` with `G` having eigenvalues ±½,
    /// so the two-point shift rule at ±π/2 is exact.
    pub fn shift_compatible(&self) -> bool {
        self.generator().is_some()
    }

    /// Replaces a parameterized angle by its value under `params`.
    pub fn bound(&self, params: &[f64]) -> Gate {
        let mut g = self.clone();
        if let Some(a) = g.angle_mut() {
            *a = Angle::Fixed(a.value(params));
        }
        g
    }

    fn check_matrix(&self) -> Result<()> {
        let (dim, data): (usize, &[C64]) = match self {
            Gate::Unitary1(_, m) => (2, &m[..]),
            Gate::Unitary2(_, _, m) => (4, &m[..]),
            _ => return Ok(()),
        };
        let m = CMatrix::from_vec(dim, dim, data.to_vec())?;
        let err = m
            .adjoint()
            .matmul(&m)?
            .max_abs_diff(&CMatrix::identity(dim));
        if err > HERMITIAN_TOL {
            return domain(format!("gate matrix is not unitary (residual {err:.2e})"));
        }
        Ok(())
    }

    /// Local matrix of the gate at a given angle.
    fn matrix(&self, theta: f64) -> LocalOp {
        let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
        let z = C64::default();
        let one = c64(1.0, 0.0);
        match self {
            Gate::H(_) => {
                let h = c64(FRAC_1_SQRT_2, 0.0);
                LocalOp::One([h, h, h, -h])
            }
            Gate::X(_) => LocalOp::One([z, one, one, z]),
            Gate::Rx(..) => LocalOp::One([c64(c, 0.0), c64(0.0, -s), c64(0.0, -s), c64(c, 0.0)]),
            Gate::Ry(..) => LocalOp::One([c64(c, 0.0), c64(-s, 0.0), c64(s, 0.0), c64(c, 0.0)]),
            Gate::Rz(..) => LocalOp::Diag1([c64(c, -s), c64(c, s)]),
            Gate::Cnot { .. } => LocalOp::Cnot,
            Gate::Cz(..) => LocalOp::Diag2([one, one, one, -one]),
            Gate::Rzz(..) => {
                let m = c64(c, -s);
                let p = c64(c, s);
                LocalOp::Diag2([m, p, p, m])
            }
            Gate::Ryy(..) => {
                // cos(θ/2) I + i sin(θ/2) Y⊗Y
                let cc = c64(c, 0.0);
                let is = c64(0.0, s);
                let mut m = [z; 16];
                m[0] = cc;
                m[3] = -is;
                m[5] = cc;
                m[6] = is;
                m[9] = is;
                m[10] = cc;
                m[12] = -is;
                m[15] = cc;
                LocalOp::Two(m)
            }
            Gate::Unitary1(_, m) => LocalOp::One(**m),
            Gate::Unitary2(_, _, m) => LocalOp::Two(**m),
        }
    }

    /// Generator G with U(a) = exp(−i a G); `None` for fixed gates.
    fn generator(&self) -> Option<LocalOp> {
        let z = C64::default();
        let h = c64(0.5, 0.0);
        match self {
            Gate::Rx(..) => Some(LocalOp::One([z, h, h, z])),
            Gate::Ry(..) => Some(LocalOp::One([z, c64(0.0, -0.5), c64(0.0, 0.5), z])),
            Gate::Rz(..) => Some(LocalOp::Diag1([h, -h])),
            Gate::Rzz(..) => Some(LocalOp::Diag2([h, -h, -h, h])),
            Gate::Ryy(..) => {
                // −(Y⊗Y)/2
                let mut m = [z; 16];
                m[3] = h;
                m[6] = -h;
                m[9] = -h;
                m[12] = h;
                Some(LocalOp::Two(m))
            }
            _ => None,
        }
    }

    fn wires_pair(&self) -> (usize, usize) {
        match *self {
            Gate::Cnot { control, target } => (control, target),
            Gate::Cz(a, b) | Gate::Rzz(a, b, _) | Gate::Ryy(a, b, _) | Gate::Unitary2(a, b, _) => {
                (a, b)
            }
            Gate::H(w) | Gate::X(w) | Gate::Rx(w, _) | Gate::Ry(w, _) | Gate::Rz(w, _) => (w, w),
            Gate::Unitary1(w, _) => (w, w),
        }
    }
}

/// Gate action restricted to the wires it touches.
#[derive(Debug, Clone, Copy)]
enum LocalOp {
    One([C64; 4]),
    Diag1([C64; 2]),
    Two([C64; 16]),
    Diag2([C64; 4]),
    Cnot,
}

impl LocalOp {
    fn adjoint(self) -> Self {
        match self {
            LocalOp::One(m) => LocalOp::One([m[0].conj(), m[2].conj(), m[1].conj(), m[3].conj()]),
            LocalOp::Diag1(d) => LocalOp::Diag1([d[0].conj(), d[1].conj()]),
            LocalOp::Diag2(d) => LocalOp::Diag2(d.map(|x| x.conj())),
            LocalOp::Two(m) => {
                let mut t = [C64::default(); 16];
                for r in 0..4 {
                    for c in 0..4 {
                        t[r * 4 + c] = m[c * 4 + r].conj();
                    }
                }
                LocalOp::Two(t)
            }
            LocalOp::Cnot => LocalOp::Cnot,
        }
    }
}

#[inline]
fn stride_of(n_qubits: usize, wire: usize) -> usize {
    1usize << (n_qubits - 1 - wire)
}

fn apply_local(op: &LocalOp, wires: (usize, usize), n_qubits: usize, amps: &mut [C64]) {
    let dim = amps.len();
    match op {
        LocalOp::One(m) => {
            let st = stride_of(n_qubits, wires.0);
            let mut base = 0;
            while base < dim {
                for i in base..base + st {
                    let j = i + st;
                    let (x, y) = (amps[i], amps[j]);
                    amps[i] = m[0] * x + m[1] * y;
                    amps[j] = m[2] * x + m[3] * y;
                }
                base += 2 * st;
            }
        }
        LocalOp::Diag1(d) => {
            let st = stride_of(n_qubits, wires.0);
            for (i, a) in amps.iter_mut().enumerate() {
                *a *= if i & st == 0 { d[0] } else { d[1] };
            }
        }
        LocalOp::Diag2(d) => {
            let s0 = stride_of(n_qubits, wires.0);
            let s1 = stride_of(n_qubits, wires.1);
            for (i, a) in amps.iter_mut().enumerate() {
                let k = (((i & s0) != 0) as usize) << 1 | ((i & s1) != 0) as usize;
                *a *= d[k];
            }
        }
        LocalOp::Cnot => {
            let sc = stride_of(n_qubits, wires.0);
            let stt = stride_of(n_qubits, wires.1);
            for i in 0..dim {
                if i & sc != 0 && i & stt == 0 {
                    amps.swap(i, i | stt);
                }
            }
        }
        LocalOp::Two(m) => {
            let s0 = stride_of(n_qubits, wires.0);
            let s1 = stride_of(n_qubits, wires.1);
            for i in 0..dim {
                if i & s0 != 0 || i & s1 != 0 {
                    continue;
                }
                let idx = [i, i | s1, i | s0, i | s0 | s1];
                let v = [amps[idx[0]], amps[idx[1]], amps[idx[2]], amps[idx[3]]];
                for r in 0..4 {
                    amps[idx[r]] = m[r * 4] * v[0]
                        + m[r * 4 + 1] * v[1]
                        + m[r * 4 + 2] * v[2]
                        + m[r * 4 + 3] * v[3];
                }
            }
        }
    }
}

/// Ordered gate list over a fixed register with `n_params` trainable slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    n_qubits: usize,
    gates: Vec<Gate>,
    n_params: usize,
}

impl Circuit {
    pub fn new(n_qubits: usize) -> Self {
        Self {
            n_qubits,
            gates: Vec::new(),
            n_params: 0,
        }
    }

    /// Reserves a fresh parameter slot.
    pub fn new_param(&mut self) -> usize {
        self.n_params += 1;
        self.n_params - 1
    }

    pub fn set_n_params(&mut self, n: usize) {
        self.n_params = n;
    }

    pub fn push(&mut self, gate: Gate) -> &mut Self {
        self.gates.push(gate);
        self
    }

    pub fn extend(&mut self, other: &Circuit) {
        self.gates.extend(other.gates.iter().cloned());
    }

    #[inline]
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    #[inline]
    pub fn n_params(&self) -> usize {
        self.n_params
    }

    #[inline]
    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    /// Number of gates carrying a trainable angle.
    pub fn n_parameterized_gates(&self) -> usize {
        self.gates.iter().filter(|g| g.param_slot().is_some()).count()
    }

    /// Checks wires, matrices, and slot usage.
    pub fn validate(&self) -> Result<()> {
        check_qubits(self.n_qubits)?;
        let mut used = vec![false; self.n_params];
        for (i, g) in self.gates.iter().enumerate() {
            let w = g.wires();
            if w.iter().any(|&q| q >= self.n_qubits) {
                return domain(format!("gate {i} touches a wire outside 0..{}", self.n_qubits));
            }
            if w.len() == 2 && w[0] == w[1] {
                return domain(format!("gate {i} repeats wire {}", w[0]));
            }
            g.check_matrix()?;
            if let Some((slot, _)) = g.param_slot() {
                if slot >= self.n_params {
                    return domain(format!(
                        "gate {i} references slot {slot} but the circuit has {} parameters",
                        self.n_params
                    ));
                }
                used[slot] = true;
            }
        }
        if let Some(s) = used.iter().position(|u| !u) {
            return domain(format!("parameter slot {s} is never used"));
        }
        Ok(())
    }

    fn check_run(&self, params: &[f64], n_qubits: usize) -> Result<()> {
        if params.len() != self.n_params {
            return domain(format!(
                "expected {} parameters, got {}",
                self.n_params,
                params.len()
            ));
        }
        if n_qubits != self.n_qubits {
            return domain(format!(
                "circuit acts on {} qubits, state has {}",
                self.n_qubits, n_qubits
            ));
        }
        for g in &self.gates {
            let w = g.wires();
            if w.iter().any(|&q| q >= self.n_qubits) || (w.len() == 2 && w[0] == w[1]) {
                return domain("gate wire out of range or repeated");
            }
        }
        Ok(())
    }

    /// Same circuit with every trainable angle replaced by its value.
    pub fn bind(&self, params: &[f64]) -> Result<Circuit> {
        self.check_run(params, self.n_qubits)?;
        Ok(Circuit {
            n_qubits: self.n_qubits,
            gates: self.gates.iter().map(|g| g.bound(params)).collect(),
            n_params: 0,
        })
    }
}

fn apply_gate(gate: &Gate, params: &[f64], n_qubits: usize, amps: &mut [C64], shift: f64) {
    let theta = gate.angle().map_or(0.0, |a| a.value(params)) + shift;
    apply_local(&gate.matrix(theta), gate.wires_pair(), n_qubits, amps);
}

fn apply_gate_adjoint(gate: &Gate, params: &[f64], n_qubits: usize, amps: &mut [C64]) {
    let theta = gate.angle().map_or(0.0, |a| a.value(params));
    apply_local(&gate.matrix(theta).adjoint(), gate.wires_pair(), n_qubits, amps);
}

/// Runs `c` on `s` and returns the output state.
pub fn apply_circuit(c: &Circuit, params: &[f64], s: &Statevector) -> Result<Statevector> {
    let mut out = s.clone();
    apply_circuit_in_place(c, params, &mut out)?;
    Ok(out)
}

pub fn apply_circuit_in_place(c: &Circuit, params: &[f64], s: &mut Statevector) -> Result<()> {
    c.check_run(params, s.n_qubits)?;
    for g in &c.gates {
        apply_gate(g, params, c.n_qubits, &mut s.amplitudes, 0.0);
    }
    Ok(())
}

/// Runs `c` with the angle of gate `gate_index` offset by `delta`.
pub fn apply_circuit_shifted(
    c: &Circuit,
    params: &[f64],
    s: &Statevector,
    gate_index: usize,
    delta: f64,
) -> Result<Statevector> {
    c.check_run(params, s.n_qubits)?;
    if gate_index >= c.gates.len() {
        return domain(format!("gate index {gate_index} out of range"));
    }
    let mut out = s.clone();
    for (i, g) in c.gates.iter().enumerate() {
        let d = if i == gate_index { delta } else { 0.0 };
        apply_gate(g, params, c.n_qubits, &mut out.amplitudes, d);
    }
    Ok(out)
}

/// Vector–Jacobian product of the output state.
///
/// Returns, for every parameter slot `k`, `⟨v| ∂ψ/∂θ_k⟩` where
/// `ψ = U(θ)|s⟩`, summing over every gate that references the slot.
/// Also returns the output state. One forward and one backward sweep.
pub fn state_vjp(
    c: &Circuit,
    params: &[f64],
    s: &Statevector,
    v: &[C64],
) -> Result<(Statevector, Vec<C64>)> {
    let out = apply_circuit(c, params, s)?;
    let grads = vjp_from_output(c, params, &out, v)?;
    Ok((out, grads))
}

/// Backward sweep of [`state_vjp`] given the already computed output state.
pub fn vjp_from_output(c: &Circuit, params: &[f64], out: &Statevector, v: &[C64]) -> Result<Vec<C64>> {
    c.check_run(params, out.n_qubits)?;
    if v.len() != out.dim() {
        return domain("cotangent length does not match the state dimension");
    }
    let mut phi = out.amplitudes.clone();
    let mut lambda = v.to_vec();
    let mut grads = vec![C64::default(); c.n_params];
    let mut scratch = vec![C64::default(); phi.len()];
    for g in c.gates.iter().rev() {
        if let (Some((slot, scale)), Some(gen)) = (g.param_slot(), g.generator()) {
            scratch.copy_from_slice(&phi);
            apply_local(&gen, g.wires_pair(), c.n_qubits, &mut scratch);
            // ⟨λ| (−i G) |φ⟩
            let ov = inner(&lambda, &scratch);
            grads[slot] += c64(ov.im, -ov.re) * scale;
        }
        apply_gate_adjoint(g, params, c.n_qubits, &mut phi);
        apply_gate_adjoint(g, params, c.n_qubits, &mut lambda);
    }
    Ok(grads)
}

/// Dense unitary of a circuit, assembled column by column.
pub fn full_unitary(c: &Circuit, params: &[f64]) -> Result<CMatrix> {
    check_qubits(c.n_qubits)?;
    let dim = 1usize << c.n_qubits;
    if dim > DENSE_UNITARY_CAP {
        return Err(Error::Capacity(format!(
            "dense unitary of dimension {dim} exceeds {DENSE_UNITARY_CAP}"
        )));
    }
    let mut u = CMatrix::zeros(dim, dim);
    for col in 0..dim {
        let out = apply_circuit(c, params, &Statevector::basis(c.n_qubits, col)?)?;
        for (row, &a) in out.amplitudes.iter().enumerate() {
            u[(row, col)] = a;
        }
    }
    Ok(u)
}

/// Dense matrix of a single gate on the full register: Kronecker products
/// with identities for one-qubit gates, explicit basis expansion for
/// two-qubit gates. Independent of the stride kernels.
pub fn gate_matrix_dense(gate: &Gate, params: &[f64], n_qubits: usize) -> Result<CMatrix> {
    use crate::numc::kron;
    let theta = gate.angle().map_or(0.0, |a| a.value(params));
    let local = match gate.matrix(theta) {
        LocalOp::One(m) => CMatrix::from_vec(2, 2, m.to_vec())?,
        LocalOp::Diag1(d) => CMatrix::diag(&d),
        LocalOp::Two(m) => CMatrix::from_vec(4, 4, m.to_vec())?,
        LocalOp::Diag2(d) => CMatrix::diag(&d),
        LocalOp::Cnot => CMatrix::from_real(
            4,
            4,
            &[
                1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0.,
            ],
        )?,
    };
    let wires = gate.wires();
    if wires.len() == 1 {
        let w = wires[0];
        let left = CMatrix::identity(1 << w);
        let right = CMatrix::identity(1 << (n_qubits - 1 - w));
        return kron(&kron(&left, &local)?, &right);
    }
    // Two-qubit: expand the local operator over basis projections.
    let (a, b) = (wires[0], wires[1]);
    let dim = 1usize << n_qubits;
    let sa = stride_of(n_qubits, a);
    let sb = stride_of(n_qubits, b);
    let mut out = CMatrix::zeros(dim, dim);
    for col in 0..dim {
        let ca = ((col & sa) != 0) as usize;
        let cb = ((col & sb) != 0) as usize;
        let rest = col & !sa & !sb;
        for ra in 0..2 {
            for rb in 0..2 {
                let row = rest | if ra == 1 { sa } else { 0 } | if rb == 1 { sb } else { 0 };
                out[(row, col)] = local[(ra * 2 + rb, ca * 2 + cb)];
            }
        }
    }
    Ok(out)
}

/// Measurement kind flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementKind {
    Projective,
    General,
}

/// A POVM {E_1, …, E_k}.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    elements: Vec<CMatrix>,
    kind: MeasurementKind,
    /// Diagonals of the elements when all are diagonal.
    diagonals: Option<Vec<Vec<f64>>>,
}

impl MeasurementSet {
    /// Validates POVM (and, for projective sets, projector) conditions.
    pub fn new(elements: Vec<CMatrix>, kind: MeasurementKind) -> Result<Self> {
        if elements.is_empty() {
            return domain("measurement set is empty");
        }
        let dim = elements[0].rows();
        let mut sum = CMatrix::zeros(dim, dim);
        for (i, e) in elements.iter().enumerate() {
            if e.rows() != dim || !e.is_square() {
                return domain(format!("element {i} has the wrong shape"));
            }
            if !e.is_hermitian(HERMITIAN_TOL) {
                return domain(format!("element {i} is not Hermitian"));
            }
            sum.axpy(c64(1.0, 0.0), e)?;
        }
        if sum.max_abs_diff(&CMatrix::identity(dim)) > 1e-9 {
            return domain("measurement elements do not sum to the identity");
        }
        let all_diag = elements.iter().all(|e| e.is_diagonal());
        for (i, e) in elements.iter().enumerate() {
            let min_eig = if all_diag {
                (0..dim).map(|k| e[(k, k)].re).fold(f64::INFINITY, f64::min)
            } else {
                crate::numc::eig_hermitian(e)?.eigenvalues[0]
            };
            if min_eig < -HERMITIAN_TOL {
                return domain(format!("element {i} is not positive semidefinite"));
            }
        }
        if kind == MeasurementKind::Projective {
            for (i, a) in elements.iter().enumerate() {
                for (j, b) in elements.iter().enumerate() {
                    let prod = a.matmul(b)?;
                    let target = if i == j { a.clone() } else { CMatrix::zeros(dim, dim) };
                    if prod.max_abs_diff(&target) > 1e-9 {
                        return domain(format!("elements {i},{j} violate projector relations"));
                    }
                }
            }
        }
        let diagonals = all_diag.then(|| {
            elements
                .iter()
                .map(|e| (0..dim).map(|k| e[(k, k)].re).collect())
                .collect()
        });
        Ok(Self {
            elements,
            kind,
            diagonals,
        })
    }

    pub fn elements(&self) -> &[CMatrix] {
        &self.elements
    }

    pub fn kind(&self) -> MeasurementKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.elements[0].rows()
    }

    pub fn diagonals(&self) -> Option<&[Vec<f64>]> {
        self.diagonals.as_deref()
    }

    /// `Σ_i w_i E_i |x⟩` — cotangent for gradients of `Σ_i w_i ⟨x|E_i|x⟩`.
    pub fn weighted_apply(&self, weights: &[f64], x: &[C64]) -> Result<Vec<C64>> {
        if weights.len() != self.len() || x.len() != self.dim() {
            return domain("dimension mismatch in weighted_apply");
        }
        if let Some(diags) = &self.diagonals {
            return Ok((0..x.len())
                .map(|k| {
                    let w: f64 = diags.iter().zip(weights).map(|(d, w)| d[k] * w).sum();
                    x[k] * w
                })
                .collect());
        }
        let mut out = vec![C64::default(); x.len()];
        for (e, &w) in self.elements.iter().zip(weights) {
            for (o, y) in out.iter_mut().zip(e.matvec(x)?) {
                *o += y * w;
            }
        }
        Ok(out)
    }
}

/// Outcome probabilities {x†E_i x}.
pub fn expectations(s: &Statevector, m: &MeasurementSet) -> Result<Vec<f64>> {
    expectations_raw(s.amplitudes(), m)
}

pub(crate) fn expectations_raw(x: &[C64], m: &MeasurementSet) -> Result<Vec<f64>> {
    if x.len() != m.dim() {
        return domain(format!(
            "state dimension {} does not match measurement dimension {}",
            x.len(),
            m.dim()
        ));
    }
    if let Some(diags) = &m.diagonals {
        let probs: Vec<f64> = x.iter().map(|a| a.norm_sqr()).collect();
        return Ok(diags
            .iter()
            .map(|d| d.iter().zip(&probs).map(|(a, b)| a * b).sum())
            .collect());
    }
    m.elements
        .iter()
        .map(|e| Ok(inner(x, &e.matvec(x)?).re))
        .collect()
}

/// Hermitian, unit-trace, positive semidefinite matrix.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    n_qubits: usize,
    matrix: CMatrix,
}

impl DensityMatrix {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return domain("density matrix must be square");
        }
        let n_qubits = qubits_for_dim(matrix.rows())?;
        if !matrix.is_hermitian(HERMITIAN_TOL) {
            return domain("density matrix is not Hermitian");
        }
        let tr = matrix.trace();
        if (tr.re - 1.0).abs() > 1e-10 || tr.im.abs() > 1e-10 {
            return domain(format!("density matrix trace is {tr}"));
        }
        let min = crate::numc::eig_hermitian(&matrix)?.eigenvalues[0];
        if min < -1e-10 {
            return domain(format!("density matrix has negative eigenvalue {min}"));
        }
        Ok(Self { n_qubits, matrix })
    }

    pub fn pure(s: &Statevector) -> Self {
        Self {
            n_qubits: s.n_qubits,
            matrix: CMatrix::outer(s.amplitudes(), s.amplitudes()),
        }
    }

    /// Maximally mixed state I/N.
    pub fn maximally_mixed(n_qubits: usize) -> Result<Self> {
        check_qubits(n_qubits)?;
        let dim = 1 << n_qubits;
        Ok(Self {
            n_qubits,
            matrix: CMatrix::identity(dim).scale_real(1.0 / dim as f64),
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// U ρ U†.
    pub fn conjugate(&self, u: &CMatrix) -> Result<Self> {
        let m = u.matmul(&self.matrix)?.matmul(&u.adjoint())?;
        Ok(Self {
            n_qubits: self.n_qubits,
            matrix: m,
        })
    }
}

/// Σ w_i |ψ_i⟩⟨ψ_i|.
pub fn density_from_ensemble(states: &[Statevector], weights: &[f64]) -> Result<DensityMatrix> {
    if states.is_empty() {
        return domain("ensemble is empty");
    }
    if weights.len() != states.len() {
        return domain("one weight per state required");
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return domain("weights must be non-negative");
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return domain(format!("weights sum to {total}, expected 1"));
    }
    let n = states[0].n_qubits;
    if states.iter().any(|s| s.n_qubits != n) {
        return domain("ensemble mixes register sizes");
    }
    Ok(DensityMatrix {
        n_qubits: n,
        matrix: weighted_outer_sum(states, weights),
    })
}

/// Uniform-weight ensemble.
pub fn density_uniform(states: &[Statevector]) -> Result<DensityMatrix> {
    let w = vec![1.0 / states.len().max(1) as f64; states.len()];
    density_from_ensemble(states, &w)
}

/// Σ w_i |ψ_i⟩⟨ψ_i| without any validation of the weights.
pub(crate) fn weighted_outer_sum(states: &[Statevector], weights: &[f64]) -> CMatrix {
    let dim = states[0].dim();
    let mut m = CMatrix::zeros(dim, dim);
    for (s, &w) in states.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let a = s.amplitudes();
        let data = m.as_mut_slice();
        for r in 0..dim {
            let ar = a[r] * w;
            if ar == C64::default() {
                continue;
            }
            let row = &mut data[r * dim..(r + 1) * dim];
            for (x, b) in row.iter_mut().zip(a) {
                *x += ar * b.conj();
            }
        }
    }
    m
}

/// |ρ⟩⟩ = Σ ρ_ij |i⟩⊗|j⟩.
pub fn vectorize(rho: &DensityMatrix) -> Vec<C64> {
    rho.matrix.as_slice().to_vec()
}

/// Vectorization of an arbitrary square operator (POVM elements etc.).
pub fn vectorize_operator(op: &CMatrix) -> Vec<C64> {
    op.as_slice().to_vec()
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;

    /// Random circuit over every gate kind with fresh slots for every
    /// parameterized gate.
    pub fn random_circuit(n: usize, n_gates: usize, rng: &mut impl Rng) -> Circuit {
        let mut c = Circuit::new(n);
        for _ in 0..n_gates {
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n);
            while b == a {
                b = rng.gen_range(0..n);
            }
            let kind = rng.gen_range(0..11);
            let g = match kind {
                0 => Gate::H(a),
                1 => Gate::X(a),
                2 => Gate::Rx(a, Angle::param(c.new_param())),
                3 => Gate::Ry(a, Angle::param(c.new_param())),
                4 => Gate::Rz(a, Angle::param(c.new_param())),
                5 => Gate::Cnot { control: a, target: b },
                6 => Gate::Cz(a, b),
                7 => Gate::Rzz(a, b, Angle::param(c.new_param())),
                8 => Gate::Ryy(a, b, Angle::param(c.new_param())),
                9 => {
                    let u = crate::numc::testutil::random_unitary(2, rng);
                    Gate::Unitary1(a, Box::new(u.as_slice().try_into().unwrap()))
                }
                _ => {
                    let u = crate::numc::testutil::random_unitary(4, rng);
                    Gate::Unitary2(a, b, Box::new(u.as_slice().try_into().unwrap()))
                }
            };
            c.push(g);
        }
        c
    }

    pub fn random_params(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect()
    }

    pub fn random_statevector(n: usize, rng: &mut impl Rng) -> Statevector {
        Statevector::from_amplitudes(crate::numc::testutil::random_state(1 << n, rng)).unwrap()
    }
}


#[cfg(test)]
mod proptests {
    use super::testutil::*;
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn norm_is_preserved(seed in any::<u64>(), n in 1usize..5, gates in 0usize..30) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = n.max(2);
            let c = random_circuit(n, gates, &mut r);
            let p = random_params(c.n_params(), &mut r);
            let s = random_statevector(n, &mut r);
            let out = apply_circuit(&c, &p, &s).unwrap();
            prop_assert!((out.norm() - 1.0).abs() < 1e-10);
        }
    }
}
