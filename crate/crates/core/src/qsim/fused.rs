//! Fused execution path.
//!
//! Consecutive gates confined to at most two wires are merged into one
//! local matrix. Binding the parameters also precomputes, for every
//! trainable gate `j` in a segment with product `M = G_L ⋯ G_1`, the local
//! derivative `D_j = ∂M/∂a_j = G_L ⋯ G_{j+1} (−i g_j) G_j ⋯ G_1`. A backward
//! sweep then only needs the local overlap `R_ab = Σ_r conj(λ_{a,r}) φ_{b,r}`
//! per segment, and each parameter contributes `Σ_ab D_ab R_ab`.

use super::{apply_local, stride_of, Circuit, LocalOp, Statevector};
use crate::error::{domain, Result};
use crate::numc::{c64, C64};

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    wires: Vec<usize>,
    gates: Vec<usize>,
}

/// Gate list grouped into two-wire segments.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCircuit {
    circuit: Circuit,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone)]
struct BoundSegment {
    w0: usize,
    w1: Option<usize>,
    fwd: LocalOp,
    adj: LocalOp,
    derivs: Vec<(usize, f64, Vec<C64>)>,
}

/// Fused circuit with parameter values fixed.
#[derive(Debug, Clone)]
pub struct BoundCircuit {
    n_qubits: usize,
    n_params: usize,
    segments: Vec<BoundSegment>,
}

fn matmul(a: &[C64], b: &[C64], d: usize) -> Vec<C64> {
    let mut out = vec![C64::default(); d * d];
    for r in 0..d {
        for k in 0..d {
            let x = a[r * d + k];
            if x == C64::default() {
                continue;
            }
            for c in 0..d {
                out[r * d + c] += x * b[k * d + c];
            }
        }
    }
    out
}

fn identity(d: usize) -> Vec<C64> {
    let mut m = vec![C64::default(); d * d];
    for i in 0..d {
        m[i * d + i] = c64(1.0, 0.0);
    }
    m
}

/// Dense matrix of `op` on the local register spanned by `seg_wires`.
fn local_dense(op: &LocalOp, gate_wires: (usize, usize), seg_wires: &[usize]) -> Vec<C64> {
    let pos = |w: usize| seg_wires.iter().position(|&s| s == w).expect("gate wire inside segment");
    let mapped = (pos(gate_wires.0), pos(gate_wires.1));
    let n_loc = seg_wires.len();
    let d = 1usize << n_loc;
    let mut m = vec![C64::default(); d * d];
    for col in 0..d {
        let mut amps = vec![C64::default(); d];
        amps[col] = c64(1.0, 0.0);
        apply_local(op, mapped, n_loc, &mut amps);
        for r in 0..d {
            m[r * d + col] = amps[r];
        }
    }
    m
}

fn as_op(m: &[C64]) -> LocalOp {
    if m.len() == 4 {
        LocalOp::One([m[0], m[1], m[2], m[3]])
    } else {
        let mut a = [C64::default(); 16];
        a.copy_from_slice(m);
        LocalOp::Two(a)
    }
}

impl FusedCircuit {
    pub fn new(c: &Circuit) -> Result<Self> {
        c.validate()?;
        let mut segments: Vec<Segment> = Vec::new();
        let mut cur = Segment {
            wires: Vec::new(),
            gates: Vec::new(),
        };
        for (i, g) in c.gates().iter().enumerate() {
            let mut union = cur.wires.clone();
            for w in g.wires() {
                if !union.contains(&w) {
                    union.push(w);
                }
            }
            if union.len() > 2 {
                segments.push(std::mem::replace(
                    &mut cur,
                    Segment {
                        wires: g.wires(),
                        gates: vec![i],
                    },
                ));
            } else {
                cur.wires = union;
                cur.gates.push(i);
            }
        }
        if !cur.gates.is_empty() {
            segments.push(cur);
        }
        Ok(Self {
            circuit: c.clone(),
            segments,
        })
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn bind(&self, params: &[f64]) -> Result<BoundCircuit> {
        if params.len() != self.circuit.n_params() {
            return domain(format!(
                "expected {} parameters, got {}",
                self.circuit.n_params(),
                params.len()
            ));
        }
        let gates = self.circuit.gates();
        let mut out = Vec::with_capacity(self.segments.len());
        for seg in &self.segments {
            let d = 1usize << seg.wires.len();
            let mats: Vec<Vec<C64>> = seg
                .gates
                .iter()
                .map(|&gi| {
                    let g = &gates[gi];
                    let theta = g.angle().map_or(0.0, |a| a.value(params));
                    local_dense(&g.matrix(theta), g.wires_pair(), &seg.wires)
                })
                .collect();
            // prefix[j] = G_j ⋯ G_1
            let mut prefix = Vec::with_capacity(mats.len());
            let mut acc = identity(d);
            for m in &mats {
                acc = matmul(m, &acc, d);
                prefix.push(acc.clone());
            }
            let total = acc;
            let mut derivs = Vec::new();
            let mut suffix = identity(d);
            for (j, &gi) in seg.gates.iter().enumerate().rev() {
                let g = &gates[gi];
                if let (Some((slot, scale)), Some(gen)) = (g.param_slot(), g.generator()) {
                    let mut gl = local_dense(&gen, g.wires_pair(), &seg.wires);
                    for x in gl.iter_mut() {
                        *x = c64(x.im, -x.re);
                    }
                    let dj = matmul(&suffix, &matmul(&gl, &prefix[j], d), d);
                    derivs.push((slot, scale, dj));
                }
                suffix = matmul(&suffix, &mats[j], d);
            }
            let fwd = as_op(&total);
            out.push(BoundSegment {
                w0: seg.wires[0],
                w1: seg.wires.get(1).copied(),
                adj: fwd.adjoint(),
                fwd,
                derivs,
            });
        }
        Ok(BoundCircuit {
            n_qubits: self.circuit.n_qubits(),
            n_params: self.circuit.n_params(),
            segments: out,
        })
    }
}

impl BoundCircuit {
    fn check(&self, s: &Statevector) -> Result<()> {
        if s.n_qubits() != self.n_qubits {
            return domain(format!(
                "circuit acts on {} qubits, state has {}",
                self.n_qubits,
                s.n_qubits()
            ));
        }
        Ok(())
    }

    pub fn apply(&self, s: &Statevector) -> Result<Statevector> {
        self.check(s)?;
        let mut out = s.clone();
        for seg in &self.segments {
            apply_local(&seg.fwd, (seg.w0, seg.w1.unwrap_or(seg.w0)), self.n_qubits, &mut out.amplitudes);
        }
        Ok(out)
    }

    /// `⟨v| ∂ψ/∂θ_k⟩` for every slot, given the output state `ψ`.
    pub fn vjp(&self, out: &Statevector, v: &[C64]) -> Result<Vec<C64>> {
        self.check(out)?;
        if v.len() != out.dim() {
            return domain("cotangent length does not match the state dimension");
        }
        let n = self.n_qubits;
        let mut phi = out.amplitudes.clone();
        let mut lambda = v.to_vec();
        let mut grads = vec![C64::default(); self.n_params];
        let mut r = [C64::default(); 16];
        for seg in self.segments.iter().rev() {
            let pair = (seg.w0, seg.w1.unwrap_or(seg.w0));
            apply_local(&seg.adj, pair, n, &mut phi);
            if !seg.derivs.is_empty() {
                let s0 = stride_of(n, seg.w0);
                let s1 = seg.w1.map_or(0, |w| stride_of(n, w));
                let d = if seg.w1.is_some() { 4 } else { 2 };
                r[..d * d].iter_mut().for_each(|x| *x = C64::default());
                for i in 0..phi.len() {
                    if i & (s0 | s1) != 0 {
                        continue;
                    }
                    let idx = if d == 4 { [i, i | s1, i | s0, i | s0 | s1] } else { [i, i | s0, 0, 0] };
                    for a in 0..d {
                        let la = lambda[idx[a]].conj();
                        for b in 0..d {
                            r[a * d + b] += la * phi[idx[b]];
                        }
                    }
                }
                for (slot, scale, dm) in &seg.derivs {
                    let val: C64 = dm.iter().zip(&r[..d * d]).map(|(x, y)| x * y).sum();
                    grads[*slot] += val * *scale;
                }
            }
            apply_local(&seg.adj, pair, n, &mut lambda);
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numc::testutil::rng;
    use crate::qsim::testutil::{random_circuit, random_params, random_statevector};
    use crate::qsim::{apply_circuit, state_vjp};

    #[test]
    fn fused_matches_gate_by_gate() {
        let mut r = rng(404);
        for n in [2usize, 3, 5] {
            for _ in 0..10 {
                let c = random_circuit(n, 30, &mut r);
                let p = random_params(c.n_params(), &mut r);
                let s = random_statevector(n, &mut r);
                let f = FusedCircuit::new(&c).unwrap();
                assert!(f.n_segments() <= c.gates().len());
                let b = f.bind(&p).unwrap();
                let out = b.apply(&s).unwrap();
                let reference = apply_circuit(&c, &p, &s).unwrap();
                let diff = out
                    .amplitudes()
                    .iter()
                    .zip(reference.amplitudes())
                    .map(|(x, y)| (x - y).norm())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-12);
                let v = random_statevector(n, &mut r);
                let (_, g_ref) = state_vjp(&c, &p, &s, v.amplitudes()).unwrap();
                let g = b.vjp(&out, v.amplitudes()).unwrap();
                for (x, y) in g.iter().zip(&g_ref) {
                    assert!((x - y).norm() < 1e-11, "n={n}");
                }
            }
        }
    }

    #[test]
    fn grouping_merges_pairs() {
        let mut c = Circuit::new(3);
        let a = c.new_param();
        c.push(crate::qsim::Gate::Ry(0, crate::qsim::Angle::param(a)));
        c.push(crate::qsim::Gate::Cnot { control: 0, target: 1 });
        c.push(crate::qsim::Gate::Ry(1, crate::qsim::Angle::param(a)));
        c.push(crate::qsim::Gate::Cnot { control: 1, target: 2 });
        let f = FusedCircuit::new(&c).unwrap();
        assert_eq!(f.n_segments(), 2);
        assert!(f.bind(&[]).is_err());
    }
}
