//! Variational circuit families and their readout measurements.
//!
//! Three families are provided:
//! - `qcnn`: convolution stages of two-qubit blocks on ring-adjacent active
//!   qubits, each followed by a pooling stage that halves the active set;
//! - `qcnn-shared`: same layout, but every block of one convolution layer
//!   reuses the same parameter slots;
//! - `sel`: strongly entangling layers (RZ·RY·RZ on every qubit, then a ring
//!   of CNOTs).
//!
//! The two-qubit convolution block is a [`BlockDescriptor`]. The built-in
//! `ry-cnot-ry` block (RY⊗RY, CNOT, RY⊗RY) is a generic stand-in; any other
//! published block can be passed to [`build_qcnn_with_block`].
//!
//! Pooling is measurement-free: a controlled-RY followed by a controlled-RZ
//! from the discarded qubit onto the retained one. Both controlled rotations
//! are decomposed as `R(θ/2) · CNOT · R(−θ/2) · CNOT` so every trainable gate
//! has a generator with eigenvalues ±½.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numc::{c64, CMatrix};
use crate::qsim::{Angle, Circuit, Gate, MeasurementKind, MeasurementSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Qcnn,
    QcnnShared,
    Sel,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Qcnn => "qcnn",
            Family::QcnnShared => "qcnn-shared",
            Family::Sel => "sel",
        }
    }
}

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnsatzSpec {
    pub family: Family,
    pub n_qubits: usize,
    pub n_layers: usize,
    #[serde(default = "default_block_id")]
    pub two_qubit_block: String,
    pub readout_wires: Vec<usize>,
    pub n_classes: usize,
}

fn default_block_id() -> String {
    DEFAULT_BLOCK.to_string()
}

pub const DEFAULT_BLOCK: &str = "ry-cnot-ry";
pub const SU4_BLOCK: &str = "su4";

impl AnsatzSpec {
    /// QCNN spec with readout wires derived from the pooling schedule.
    pub fn qcnn(n_qubits: usize, n_layers: usize, n_classes: usize, shared: bool) -> Result<Self> {
        let width = readout_width(n_classes)?;
        let readout_wires = qcnn_readout_wires(n_qubits, width)?;
        let spec = Self {
            family: if shared { Family::QcnnShared } else { Family::Qcnn },
            n_qubits,
            n_layers,
            two_qubit_block: default_block_id(),
            readout_wires,
            n_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// SEL spec reading out the leading wires.
    pub fn sel(n_qubits: usize, n_layers: usize, n_classes: usize) -> Result<Self> {
        let width = readout_width(n_classes)?;
        let spec = Self {
            family: Family::Sel,
            n_qubits,
            n_layers,
            two_qubit_block: default_block_id(),
            readout_wires: (0..width).collect(),
            n_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn new(family: Family, n_qubits: usize, n_layers: usize, n_classes: usize) -> Result<Self> {
        match family {
            Family::Qcnn => Self::qcnn(n_qubits, n_layers, n_classes, false),
            Family::QcnnShared => Self::qcnn(n_qubits, n_layers, n_classes, true),
            Family::Sel => Self::sel(n_qubits, n_layers, n_classes),
        }
    }

    /// Layer counts used by the bundled 8-qubit experiment configs.
    pub fn experiment_default(family: Family, n_classes: usize) -> Result<Self> {
        let layers = match family {
            Family::Qcnn | Family::QcnnShared => 7,
            Family::Sel => 2,
        };
        Self::new(family, 8, layers, n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return domain("n_layers must be at least 1");
        }
        if self.n_qubits == 0 || self.n_qubits > crate::qsim::MAX_QUBITS {
            return domain(format!("unsupported register size {}", self.n_qubits));
        }
        let width = readout_width(self.n_classes)?;
        if self.readout_wires.len() != width {
            return domain(format!(
                "{} classes need {width} readout wires, spec lists {}",
                self.n_classes,
                self.readout_wires.len()
            ));
        }
        let mut seen = vec![false; self.n_qubits];
        for &w in &self.readout_wires {
            if w >= self.n_qubits || seen[w] {
                return domain(format!("readout wire {w} out of range or repeated"));
            }
            seen[w] = true;
        }
        if matches!(self.family, Family::Qcnn | Family::QcnnShared) {
            let expect = qcnn_readout_wires(self.n_qubits, width)?;
            if expect != self.readout_wires {
                return domain(format!(
                    "QCNN pooling leaves wires {expect:?}, spec lists {:?}",
                    self.readout_wires
                ));
            }
        }
        Ok(())
    }
}

fn readout_width(n_classes: usize) -> Result<usize> {
    if n_classes < 2 || !n_classes.is_power_of_two() {
        return domain(format!("n_classes must be a power of two ≥ 2, got {n_classes}"));
    }
    Ok(n_classes.trailing_zeros() as usize)
}

/// Pooling pairs `(discarded, retained)` for one stage.
fn pooling_pairs(active: &[usize]) -> Vec<(usize, usize)> {
    active.chunks(2).map(|p| (p[0], p[1])).collect()
}

fn qcnn_readout_wires(n_qubits: usize, width: usize) -> Result<Vec<usize>> {
    if n_qubits < 4 || !n_qubits.is_power_of_two() {
        return domain(format!("QCNN needs a power-of-two register ≥ 4, got {n_qubits}"));
    }
    if width == 0 || width > n_qubits / 2 || !width.is_power_of_two() {
        return domain(format!("readout width {width} unreachable by halving {n_qubits}"));
    }
    let mut active: Vec<usize> = (0..n_qubits).collect();
    while active.len() > width {
        active = pooling_pairs(&active).into_iter().map(|(_, r)| r).collect();
    }
    Ok(active)
}

/// Ring-adjacent pairs in brick order: even offsets first, then odd.
fn ring_pairs(active: &[usize]) -> Vec<(usize, usize)> {
    let n = active.len();
    if n < 2 {
        return Vec::new();
    }
    if n == 2 {
        return vec![(active[0], active[1])];
    }
    let mut out = Vec::with_capacity(n);
    for start in [0, 1] {
        let mut i = start;
        while i < n {
            out.push((active[i], active[(i + 1) % n]));
            i += 2;
        }
    }
    out
}

/// Template for a two-qubit convolution unit acting on local wires 0 and 1.
/// Parameterized gates use `Angle::Param` with local slot indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDescriptor {
    pub id: String,
    pub n_block_params: usize,
    pub template: Vec<Gate>,
}

impl BlockDescriptor {
    pub fn new(id: impl Into<String>, n_block_params: usize, template: Vec<Gate>) -> Result<Self> {
        let block = Self {
            id: id.into(),
            n_block_params,
            template,
        };
        let mut c = Circuit::new(2);
        c.set_n_params(n_block_params);
        for g in &block.template {
            c.push(g.clone());
        }
        c.validate()?;
        Ok(block)
    }

    /// RY⊗RY → CNOT(a→b) → RY⊗RY.
    pub fn ry_cnot_ry() -> Self {
        Self {
            id: DEFAULT_BLOCK.to_string(),
            n_block_params: 4,
            template: vec![
                Gate::Ry(0, Angle::param(0)),
                Gate::Ry(1, Angle::param(1)),
                Gate::Cnot { control: 0, target: 1 },
                Gate::Ry(0, Angle::param(2)),
                Gate::Ry(1, Angle::param(3)),
            ],
        }
    }

    /// General two-qubit block with 15 parameters: U3⊗U3, CNOT(a→b),
    /// RY(a)⊗RZ(b), CNOT(b→a), RY(a), CNOT(a→b), U3⊗U3. Each U3 is
    /// RZ·RY·RZ.
    pub fn su4() -> Self {
        let mut t = Vec::with_capacity(21);
        let mut next = 0;
        let mut u3 = |t: &mut Vec<Gate>, w: usize| {
            for k in 0..3 {
                let a = Angle::param(next);
                next += 1;
                t.push(if k == 1 { Gate::Ry(w, a) } else { Gate::Rz(w, a) });
            }
        };
        u3(&mut t, 0);
        u3(&mut t, 1);
        t.push(Gate::Cnot { control: 0, target: 1 });
        t.push(Gate::Ry(0, Angle::param(6)));
        t.push(Gate::Rz(1, Angle::param(7)));
        t.push(Gate::Cnot { control: 1, target: 0 });
        t.push(Gate::Ry(0, Angle::param(8)));
        t.push(Gate::Cnot { control: 0, target: 1 });
        next = 9;
        let mut u3 = |t: &mut Vec<Gate>, w: usize| {
            for k in 0..3 {
                let a = Angle::param(next);
                next += 1;
                t.push(if k == 1 { Gate::Ry(w, a) } else { Gate::Rz(w, a) });
            }
        };
        u3(&mut t, 0);
        u3(&mut t, 1);
        Self {
            id: SU4_BLOCK.to_string(),
            n_block_params: 15,
            template: t,
        }
    }

    pub fn builtin(id: &str) -> Result<Self> {
        match id {
            DEFAULT_BLOCK => Ok(Self::ry_cnot_ry()),
            SU4_BLOCK => Ok(Self::su4()),
            other => domain(format!("unknown two-qubit block `{other}`")),
        }
    }

    fn instantiate(&self, a: usize, b: usize, slots: &[usize], c: &mut Circuit) {
        let map_wire = |w: usize| if w == 0 { a } else { b };
        let map_angle = |ang: Angle| match ang {
            Angle::Param { slot, scale } => Angle::Param {
                slot: slots[slot],
                scale,
            },
            fixed => fixed,
        };
        for g in &self.template {
            let mapped = match g.clone() {
                Gate::H(w) => Gate::H(map_wire(w)),
                Gate::X(w) => Gate::X(map_wire(w)),
                Gate::Rx(w, t) => Gate::Rx(map_wire(w), map_angle(t)),
                Gate::Ry(w, t) => Gate::Ry(map_wire(w), map_angle(t)),
                Gate::Rz(w, t) => Gate::Rz(map_wire(w), map_angle(t)),
                Gate::Cnot { control, target } => Gate::Cnot {
                    control: map_wire(control),
                    target: map_wire(target),
                },
                Gate::Cz(x, y) => Gate::Cz(map_wire(x), map_wire(y)),
                Gate::Rzz(x, y, t) => Gate::Rzz(map_wire(x), map_wire(y), map_angle(t)),
                Gate::Ryy(x, y, t) => Gate::Ryy(map_wire(x), map_wire(y), map_angle(t)),
                Gate::Unitary1(w, m) => Gate::Unitary1(map_wire(w), m),
                Gate::Unitary2(x, y, m) => Gate::Unitary2(map_wire(x), map_wire(y), m),
            };
            c.push(mapped);
        }
    }
}

fn fresh_slots(c: &mut Circuit, n: usize) -> Vec<usize> {
    (0..n).map(|_| c.new_param()).collect()
}

/// Controlled rotation decomposed into two half-angle rotations and two
/// CNOTs; both rotations reference `slot` with scales ±½.
fn push_controlled(c: &mut Circuit, control: usize, target: usize, slot: usize, y_axis: bool) {
    let rot = |t: usize, scale: f64| {
        let a = Angle::Param { slot, scale };
        if y_axis {
            Gate::Ry(t, a)
        } else {
            Gate::Rz(t, a)
        }
    };
    c.push(rot(target, 0.5));
    c.push(Gate::Cnot { control, target });
    c.push(rot(target, -0.5));
    c.push(Gate::Cnot { control, target });
}

/// Builds a QCNN with the spec's registered block.
pub fn build_qcnn(spec: &AnsatzSpec) -> Result<Circuit> {
    let block = BlockDescriptor::builtin(&spec.two_qubit_block)?;
    build_qcnn_with_block(spec, &block)
}

pub fn build_qcnn_with_block(spec: &AnsatzSpec, block: &BlockDescriptor) -> Result<Circuit> {
    let shared = match spec.family {
        Family::Qcnn => false,
        Family::QcnnShared => true,
        Family::Sel => return domain("build_qcnn called with a SEL spec"),
    };
    spec.validate()?;
    let width = spec.readout_wires.len();
    let mut c = Circuit::new(spec.n_qubits);
    let mut active: Vec<usize> = (0..spec.n_qubits).collect();
    while active.len() > width {
        for _ in 0..spec.n_layers {
            let pairs = ring_pairs(&active);
            let layer_slots = shared.then(|| fresh_slots(&mut c, block.n_block_params));
            for (a, b) in pairs {
                let slots = match &layer_slots {
                    Some(s) => s.clone(),
                    None => fresh_slots(&mut c, block.n_block_params),
                };
                block.instantiate(a, b, &slots, &mut c);
            }
        }
        let pool = pooling_pairs(&active);
        for &(discard, keep) in &pool {
            let sy = c.new_param();
            push_controlled(&mut c, discard, keep, sy, true);
            let sz = c.new_param();
            push_controlled(&mut c, discard, keep, sz, false);
        }
        active = pool.into_iter().map(|(_, k)| k).collect();
    }
    c.validate()?;
    Ok(c)
}

/// Strongly entangling layers: RZ·RY·RZ on every wire, then CNOT(i → i+1)
/// around the ring.
pub fn build_sel(spec: &AnsatzSpec) -> Result<Circuit> {
    if spec.family != Family::Sel {
        return domain("build_sel called with a QCNN spec");
    }
    spec.validate()?;
    let n = spec.n_qubits;
    let mut c = Circuit::new(n);
    for _ in 0..spec.n_layers {
        for w in 0..n {
            let a = c.new_param();
            c.push(Gate::Rz(w, Angle::param(a)));
            let b = c.new_param();
            c.push(Gate::Ry(w, Angle::param(b)));
            let d = c.new_param();
            c.push(Gate::Rz(w, Angle::param(d)));
        }
        if n >= 2 {
            for w in 0..n {
                c.push(Gate::Cnot {
                    control: w,
                    target: (w + 1) % n,
                });
            }
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn build(spec: &AnsatzSpec) -> Result<Circuit> {
    match spec.family {
        Family::Sel => build_sel(spec),
        _ => build_qcnn(spec),
    }
}

/// Computational-basis projectors on the readout wires (identity elsewhere).
/// Class `c` has `readout_wires[0]` as its most significant bit.
pub fn readout_measurements(spec: &AnsatzSpec) -> Result<MeasurementSet> {
    spec.validate()?;
    let n = spec.n_qubits;
    let dim = 1usize << n;
    let k = spec.n_classes;
    let mut diags = vec![vec![0.0; dim]; k];
    for idx in 0..dim {
        let class = spec
            .readout_wires
            .iter()
            .fold(0usize, |acc, &w| (acc << 1) | ((idx >> (n - 1 - w)) & 1));
        diags[class][idx] = 1.0;
    }
    let elements = diags
        .into_iter()
        .map(|d| {
            let v: Vec<_> = d.into_iter().map(|x| c64(x, 0.0)).collect();
            CMatrix::diag(&v)
        })
        .collect();
    MeasurementSet::new(elements, MeasurementKind::Projective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numc::{spectral_norm, testutil::rng};
    use crate::qsim::testutil::random_params;
    use crate::qsim::{apply_circuit, full_unitary, Statevector};

    #[test]
    fn qcnn_four_qubit_hand_count() {
        // stage 1: 4 ring pairs × 4 params, pool 2 pairs × 2
        // stage 2: 1 pair × 4 params, pool 1 pair × 2
        let spec = AnsatzSpec::qcnn(4, 1, 2, false).unwrap();
        assert_eq!(spec.readout_wires, vec![3]);
        let c = build_qcnn(&spec).unwrap();
        assert_eq!(c.n_params(), 4 * 4 + 2 * 2 + 4 + 2);
        let shared = build_qcnn(&AnsatzSpec::qcnn(4, 1, 2, true).unwrap()).unwrap();
        assert_eq!(shared.n_params(), 4 + 2 * 2 + 4 + 2);
        assert!(shared.n_params() < c.n_params());
    }

    #[test]
    fn qcnn_eight_qubit_counts() {
        for layers in [1, 5, 9] {
            let q = build_qcnn(&AnsatzSpec::qcnn(8, layers, 4, false).unwrap()).unwrap();
            assert_eq!(q.n_params(), 48 * layers + 12);
            let s = build_qcnn(&AnsatzSpec::qcnn(8, layers, 4, true).unwrap()).unwrap();
            assert_eq!(s.n_params(), 8 * layers + 12);
        }
        assert_eq!(AnsatzSpec::qcnn(8, 1, 4, false).unwrap().readout_wires, vec![3, 7]);
    }

    #[test]
    fn experiment_default_parameter_ordering() {
        let count = |f| build(&AnsatzSpec::experiment_default(f, 4).unwrap()).unwrap().n_params();
        let (q, s, sel) = (count(Family::Qcnn), count(Family::QcnnShared), count(Family::Sel));
        assert!(sel <= s && s < q, "sel {sel}, shared {s}, qcnn {q}");
    }

    #[test]
    fn inconsistent_readout_rejected() {
        let mut spec = AnsatzSpec::qcnn(8, 1, 4, false).unwrap();
        spec.readout_wires = vec![0, 1];
        assert!(build_qcnn(&spec).is_err());
        assert!(AnsatzSpec::qcnn(6, 1, 2, false).is_err());
        assert!(AnsatzSpec::qcnn(8, 0, 2, false).is_err());
        assert!(AnsatzSpec::qcnn(8, 1, 3, false).is_err());
    }

    #[test]
    fn zero_parameter_qcnn_matches_dense_oracle() {
        let spec = AnsatzSpec::qcnn(4, 1, 2, false).unwrap();
        let c = build_qcnn(&spec).unwrap();
        let p = vec![0.0; c.n_params()];
        // With zero angles every rotation is the identity, leaving only the
        // fixed CNOTs (pooling CNOT pairs cancel).
        let mut only_cnots = Circuit::new(4);
        for g in c.gates() {
            if let Gate::Cnot { .. } = g {
                only_cnots.push(g.clone());
            }
        }
        let u = full_unitary(&c, &p).unwrap();
        let oracle = full_unitary(&only_cnots, &[]).unwrap();
        assert!(u.max_abs_diff(&oracle) < 1e-12);
        let s = Statevector::zero(4).unwrap();
        let out = apply_circuit(&c, &p, &s).unwrap();
        let expect = oracle.matvec(s.amplitudes()).unwrap();
        assert!(out
            .amplitudes()
            .iter()
            .zip(&expect)
            .all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn pooling_is_a_controlled_rotation() {
        // Control |0⟩ leaves the target alone, control |1⟩ rotates it.
        let mut c = Circuit::new(2);
        let s = c.new_param();
        push_controlled(&mut c, 0, 1, s, true);
        let theta = 0.9;
        let u = full_unitary(&c, &[theta]).unwrap();
        let (co, si) = ((theta / 2.0_f64).cos(), (theta / 2.0_f64).sin());
        let expect = CMatrix::from_real(
            4,
            4,
            &[
                1., 0., 0., 0., 0., 1., 0., 0., 0., 0., co, -si, 0., 0., si, co,
            ],
        )
        .unwrap();
        assert!(u.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn sel_counts_and_zero_angles() {
        let spec = AnsatzSpec::sel(4, 2, 2).unwrap();
        let c = build_sel(&spec).unwrap();
        assert_eq!(c.n_params(), 24);
        let u = full_unitary(&c, &[0.0; 24]).unwrap();
        let mut ring = Circuit::new(4);
        for _ in 0..2 {
            for w in 0..4 {
                ring.push(Gate::Cnot { control: w, target: (w + 1) % 4 });
            }
        }
        assert!(u.max_abs_diff(&full_unitary(&ring, &[]).unwrap()) < 1e-14);
    }

    #[test]
    fn sel_two_qubit_dense_composition() {
        let spec = AnsatzSpec::sel(2, 1, 2).unwrap();
        let c = build_sel(&spec).unwrap();
        let mut r = rng(77);
        let p = random_params(c.n_params(), &mut r);
        let mut oracle = CMatrix::identity(4);
        for g in c.gates() {
            let m = crate::qsim::gate_matrix_dense(g, &p, 2).unwrap();
            oracle = m.matmul(&oracle).unwrap();
        }
        assert!(full_unitary(&c, &p).unwrap().max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn built_circuits_are_unitary() {
        let mut r = rng(5);
        for spec in [
            AnsatzSpec::qcnn(4, 2, 2, false).unwrap(),
            AnsatzSpec::qcnn(4, 2, 2, true).unwrap(),
            AnsatzSpec::sel(3, 2, 4).unwrap(),
        ] {
            let c = build(&spec).unwrap();
            let p = random_params(c.n_params(), &mut r);
            let u = full_unitary(&c, &p).unwrap();
            let dim = u.rows();
            assert!(u.matmul(&u.adjoint()).unwrap().max_abs_diff(&CMatrix::identity(dim)) < 1e-9);
        }
    }

    #[test]
    fn readout_projectors() {
        let m1 = readout_measurements(&AnsatzSpec::qcnn(4, 1, 2, false).unwrap()).unwrap();
        assert_eq!(m1.len(), 2);
        let sum = m1.elements()[0].add(&m1.elements()[1]).unwrap();
        assert_eq!(sum, CMatrix::identity(16));
        let m2 = readout_measurements(&AnsatzSpec::qcnn(8, 1, 4, false).unwrap()).unwrap();
        assert_eq!(m2.len(), 4);
        for (i, a) in m2.elements().iter().enumerate() {
            assert_eq!(spectral_norm(a).unwrap(), 1.0);
            for (j, b) in m2.elements().iter().enumerate() {
                if i != j {
                    assert_eq!(a.matmul(b).unwrap().frobenius_norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn custom_block_is_pluggable() {
        let block = BlockDescriptor::new(
            "rzz-ryy",
            2,
            vec![
                Gate::Rzz(0, 1, Angle::param(0)),
                Gate::Ryy(0, 1, Angle::param(1)),
            ],
        )
        .unwrap();
        let spec = AnsatzSpec::qcnn(4, 1, 2, false).unwrap();
        let c = build_qcnn_with_block(&spec, &block).unwrap();
        assert_eq!(c.n_params(), 4 * 2 + 4 + 2 + 2);
        assert!(BlockDescriptor::builtin("nope").is_err());
        let su4 = BlockDescriptor::builtin(SU4_BLOCK).unwrap();
        assert_eq!(su4.n_block_params, 15);
        let again = BlockDescriptor::new(SU4_BLOCK, 15, su4.template.clone()).unwrap();
        assert_eq!(again, su4);
        let mut spec = AnsatzSpec::qcnn(8, 2, 4, false).unwrap();
        spec.two_qubit_block = SU4_BLOCK.into();
        assert_eq!(build(&spec).unwrap().n_params(), (8 + 4) * 15 * 2 + 12);
    }
}
