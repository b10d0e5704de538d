//! Quantum embeddings of classical vectors: the fixed ZZ feature map, the
//! trainable quantum embedding (TQE) and the neural quantum embedding (NQE).
//!
//! Every scheme is built on one parameterized template whose slots hold
//! the feature angles `u_j = x_j` and `v_p = (π − x_a)(π − x_b)` for ring
//! pairs `p = (a, b)`. A ZZ layer applies `H` on all wires, `RZ(2u_j)` on
//! wire `j` and `RZZ(2v_p)` on each pair. TQE prepends trainable slots for
//! `V(φ)`; NQE feeds the output of an MLP into the feature slots.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrim::{ensemble_trace_distance, EnsemblePair};
use crate::error::{domain, Error, Result};
use crate::numc::C64;
use crate::qsim::{
    apply_circuit, apply_circuit_shifted, vjp_from_output, Angle, Circuit, Gate, Statevector,
};
use crate::train::{adam_step, AdamState, GradientMethod};

pub const DEFAULT_ZZ_LAYERS: usize = 3;
pub const DEFAULT_TQE_LAYERS: usize = 3;
pub const DEFAULT_MLP_DIMS: [usize; 6] = [8, 16, 32, 32, 16, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ZzFixed,
    Tqe,
    Nqe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub scheme: Scheme,
    pub n_qubits: usize,
    #[serde(default = "default_zz_layers")]
    pub zz_layers: usize,
    #[serde(default = "default_tqe_layers")]
    pub tqe_layers: usize,
    #[serde(default = "default_mlp_dims")]
    pub mlp_dims: Vec<usize>,
}

fn default_zz_layers() -> usize {
    DEFAULT_ZZ_LAYERS
}

fn default_tqe_layers() -> usize {
    DEFAULT_TQE_LAYERS
}

fn default_mlp_dims() -> Vec<usize> {
    DEFAULT_MLP_DIMS.to_vec()
}

impl EmbeddingSpec {
    pub fn new(scheme: Scheme, n_qubits: usize) -> Result<Self> {
        let mut mlp_dims = default_mlp_dims();
        if n_qubits != 8 {
            let last = mlp_dims.len() - 1;
            mlp_dims[0] = n_qubits;
            mlp_dims[last] = n_qubits;
        }
        let spec = Self {
            scheme,
            n_qubits,
            zz_layers: DEFAULT_ZZ_LAYERS,
            tqe_layers: DEFAULT_TQE_LAYERS,
            mlp_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=crate::qsim::MAX_QUBITS).contains(&self.n_qubits) {
            return domain(format!("embedding needs 2..={} qubits", crate::qsim::MAX_QUBITS));
        }
        if self.zz_layers == 0 {
            return domain("zz_layers must be at least 1");
        }
        match self.scheme {
            Scheme::Tqe if self.tqe_layers == 0 => domain("tqe_layers must be at least 1"),
            Scheme::Nqe => {
                if self.mlp_dims.len() < 2 || self.mlp_dims.contains(&0) {
                    return domain("mlp_dims needs at least two positive entries");
                }
                if self.mlp_dims[0] != self.n_qubits || *self.mlp_dims.last().unwrap() != self.n_qubits {
                    return domain("mlp_dims must start and end at n_qubits");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Length of the TQE parameter vector.
    pub fn n_tqe_params(&self) -> usize {
        self.tqe_layers * (self.n_qubits + ring_pairs(self.n_qubits).len())
    }
}

/// Nearest-neighbour ring; two wires form a single pair.
pub fn ring_pairs(n: usize) -> Vec<(usize, usize)> {
    match n {
        0 | 1 => vec![],
        2 => vec![(0, 1)],
        _ => (0..n).map(|j| (j, (j + 1) % n)).collect(),
    }
}

fn n_feature_slots(n: usize) -> usize {
    n + ring_pairs(n).len()
}

/// Slot values `(u, v)` for a feature vector.
pub fn feature_angles(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    out.extend(ring_pairs(x.len()).into_iter().map(|(a, b)| (PI - x[a]) * (PI - x[b])));
    out
}

/// Pulls a gradient over the feature slots back to the features.
fn feature_angles_vjp(x: &[f64], g: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = g[..n].to_vec();
    for (p, (a, b)) in ring_pairs(n).into_iter().enumerate() {
        out[a] -= g[n + p] * (PI - x[b]);
        out[b] -= g[n + p] * (PI - x[a]);
    }
    out
}

fn push_zz_layer(c: &mut Circuit, offset: usize) {
    let n = c.n_qubits();
    for w in 0..n {
        c.push(Gate::H(w));
    }
    for w in 0..n {
        c.push(Gate::Rz(w, Angle::Param { slot: offset + w, scale: 2.0 }));
    }
    for (p, (a, b)) in ring_pairs(n).into_iter().enumerate() {
        c.push(Gate::Rzz(a, b, Angle::Param { slot: offset + n + p, scale: 2.0 }));
    }
}

/// Parameterized template with the feature slots first.
pub fn zz_template(n: usize, layers: usize) -> Circuit {
    let mut c = Circuit::new(n);
    c.set_n_params(n_feature_slots(n));
    for _ in 0..layers {
        push_zz_layer(&mut c, 0);
    }
    c
}

/// TQE template: `tqe_layers × (n + |ring|)` trainable slots, then the
/// feature slots. Layer `i` applies `V(φ_i)`, i.e. `RY` on every wire and
/// `RYY` on every ring pair, followed by one ZZ layer.
pub fn tqe_template(n: usize, layers: usize) -> Circuit {
    let pairs = ring_pairs(n);
    let n_phi = layers * (n + pairs.len());
    let mut c = Circuit::new(n);
    c.set_n_params(n_phi + n_feature_slots(n));
    let mut slot = 0;
    for _ in 0..layers {
        for w in 0..n {
            c.push(Gate::Ry(w, Angle::param(slot)));
            slot += 1;
        }
        for &(a, b) in &pairs {
            c.push(Gate::Ryy(a, b, Angle::param(slot)));
            slot += 1;
        }
        push_zz_layer(&mut c, n_phi);
    }
    c
}

fn check_features(x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return domain(format!("feature vector has length {}, expected {n}", x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return domain("feature vector has non-finite entries");
    }
    Ok(())
}

/// The fixed ZZ feature map for `x`, with all angles bound.
pub fn zz_feature_map(x: &[f64], spec: &EmbeddingSpec) -> Result<Circuit> {
    check_features(x, spec.n_qubits)?;
    zz_template(spec.n_qubits, spec.zz_layers).bind(&feature_angles(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMap {
    /// `π·σ(z)`.
    #[default]
    PiLogistic,
    Identity,
}

/// Fully connected network with rectifier hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    /// Row-major `dims[l+1] × dims[l]` per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default)]
    pub output: OutputMap,
}

/// Gradient with the same layout as [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrad {
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

impl Mlp {
    /// Uniform initialization in `±1/√fan_in`.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return domain("an MLP needs at least two positive layer widths");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let bound = 1.0 / (dims[l] as f64).sqrt();
            weights.push((0..dims[l] * dims[l + 1]).map(|_| rng.gen_range(-bound..bound)).collect());
            biases.push((0..dims[l + 1]).map(|_| rng.gen_range(-bound..bound)).collect());
        }
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            output: OutputMap::PiLogistic,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.dims.len().saturating_sub(1);
        if layers == 0 || self.weights.len() != layers || self.biases.len() != layers {
            return domain("MLP layer count does not match dims");
        }
        for l in 0..layers {
            if self.weights[l].len() != self.dims[l] * self.dims[l + 1] || self.biases[l].len() != self.dims[l + 1] {
                return domain(format!("MLP layer {l} has the wrong shape"));
            }
        }
        if self.weights.iter().chain(&self.biases).flatten().any(|v| !v.is_finite()) {
            return domain("MLP has non-finite parameters");
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return domain("flat parameter vector has the wrong length");
        }
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = flat[i];
                i += 1;
            }
        }
        Ok(())
    }

    /// Pre-activations of every layer.
    fn pre_activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.dims[0] {
            return domain(format!("MLP input has length {}, expected {}", x.len(), self.dims[0]));
        }
        let layers = self.weights.len();
        let mut zs = Vec::with_capacity(layers);
        let mut a = x.to_vec();
        for l in 0..layers {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let z: Vec<f64> = (0..dout)
                .map(|r| {
                    let row = &self.weights[l][r * din..(r + 1) * din];
                    self.biases[l][r] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect();
            a = if l + 1 < layers { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            zs.push(z);
        }
        Ok(zs)
    }

    fn squash(&self, z: f64) -> f64 {
        match self.output {
            OutputMap::PiLogistic => PI / (1.0 + (-z).exp()),
            OutputMap::Identity => z,
        }
    }

    fn squash_grad(&self, z: f64) -> f64 {
        match self.output {
            OutputMap::PiLogistic => {
                let s = 1.0 / (1.0 + (-z).exp());
                PI * s * (1.0 - s)
            }
            OutputMap::Identity => 1.0,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let zs = self.pre_activations(x)?;
        Ok(zs.last().unwrap().iter().map(|&z| self.squash(z)).collect())
    }

    /// Gradient of `⟨upstream, forward(x)⟩` with respect to every weight and
    /// bias.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<MlpGrad> {
        let zs = self.pre_activations(x)?;
        let layers = self.weights.len();
        if upstream.len() != self.dims[layers] {
            return domain("upstream gradient has the wrong length");
        }
        let mut delta: Vec<f64> = zs[layers - 1]
            .iter()
            .zip(upstream)
            .map(|(&z, &g)| g * self.squash_grad(z))
            .collect();
        let mut gw = vec![Vec::new(); layers];
        let mut gb = vec![Vec::new(); layers];
        for l in (0..layers).rev() {
            let din = self.dims[l];
            let input: Vec<f64> = if l == 0 { x.to_vec() } else { zs[l - 1].iter().map(|v| v.max(0.0)).collect() };
            gw[l] = delta.iter().flat_map(|d| input.iter().map(move |a| d * a)).collect();
            gb[l] = delta.clone();
            if l > 0 {
                delta = (0..din)
                    .map(|c| {
                        let back: f64 = delta.iter().enumerate().map(|(r, d)| d * self.weights[l][r * din + c]).sum();
                        if zs[l - 1][c] > 0.0 { back } else { 0.0 }
                    })
                    .collect();
            }
        }
        Ok(MlpGrad { weights: gw, biases: gb })
    }
}

/// Embeds `x` under `spec`. `tqe` is required for TQE, `mlp` for NQE.
pub fn embed_state(x: &[f64], spec: &EmbeddingSpec, tqe: Option<&[f64]>, mlp: Option<&Mlp>) -> Result<Statevector> {
    let (c, params) = embedding_circuit(x, spec, tqe, mlp)?;
    apply_circuit(&c, &params, &Statevector::zero(spec.n_qubits)?)
}

/// Template circuit and slot values that prepare the embedded state.
fn embedding_circuit(
    x: &[f64],
    spec: &EmbeddingSpec,
    tqe: Option<&[f64]>,
    mlp: Option<&Mlp>,
) -> Result<(Circuit, Vec<f64>)> {
    spec.validate()?;
    check_features(x, spec.n_qubits)?;
    match spec.scheme {
        Scheme::ZzFixed => Ok((zz_template(spec.n_qubits, spec.zz_layers), feature_angles(x))),
        Scheme::Tqe => {
            let phi = tqe.ok_or_else(|| Error::Domain("TQE embedding needs φ".into()))?;
            if phi.len() != spec.n_tqe_params() {
                return domain(format!("φ has length {}, expected {}", phi.len(), spec.n_tqe_params()));
            }
            let mut params = phi.to_vec();
            params.extend(feature_angles(x));
            Ok((tqe_template(spec.n_qubits, spec.tqe_layers), params))
        }
        Scheme::Nqe => {
            let mlp = mlp.ok_or_else(|| Error::Domain("NQE embedding needs an MLP".into()))?;
            let y = mlp.forward(x)?;
            Ok((zz_template(spec.n_qubits, spec.zz_layers), feature_angles(&y)))
        }
    }
}

/// Embedding scheme together with its trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub spec: EmbeddingSpec,
    #[serde(default)]
    pub phi: Vec<f64>,
    #[serde(default)]
    pub mlp: Option<Mlp>,
    pub seed: u64,
}

impl EmbeddingModel {
    /// `φ = 0` for TQE; seeded MLP for NQE.
    pub fn new(spec: EmbeddingSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let phi = vec![0.0; if spec.scheme == Scheme::Tqe { spec.n_tqe_params() } else { 0 }];
        let mlp = match spec.scheme {
            Scheme::Nqe => Some(Mlp::new(&spec.mlp_dims, seed)?),
            _ => None,
        };
        Ok(Self { spec, phi, mlp, seed })
    }

    pub fn embed(&self, x: &[f64]) -> Result<Statevector> {
        embed_state(x, &self.spec, Some(&self.phi), self.mlp.as_ref())
    }

    pub fn embed_all(&self, xs: &[Vec<f64>]) -> Result<Vec<Statevector>> {
        xs.par_iter().map(|x| self.embed(x)).collect()
    }

    pub fn n_trainable(&self) -> usize {
        match self.spec.scheme {
            Scheme::ZzFixed => 0,
            Scheme::Tqe => self.phi.len(),
            Scheme::Nqe => self.mlp.as_ref().map_or(0, Mlp::n_params),
        }
    }

    fn trainable(&self) -> Vec<f64> {
        match self.spec.scheme {
            Scheme::ZzFixed => vec![],
            Scheme::Tqe => self.phi.clone(),
            Scheme::Nqe => self.mlp.as_ref().map(Mlp::flatten).unwrap_or_default(),
        }
    }

    fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        match self.spec.scheme {
            Scheme::ZzFixed => Ok(()),
            Scheme::Tqe => {
                self.phi.copy_from_slice(flat);
                Ok(())
            }
            Scheme::Nqe => self.mlp.as_mut().expect("nqe model has an MLP").set_flat(flat),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.spec.validate()?;
        if m.spec.scheme == Scheme::Tqe && m.phi.len() != m.spec.n_tqe_params() {
            return domain("φ length does not match the spec");
        }
        if let Some(mlp) = &m.mlp {
            mlp.validate()?;
        }
        Ok(m)
    }
}

/// `D_tr` of the class ensembles of embedded points; label 0 is `+`.
pub fn embedded_trace_distance(model: &EmbeddingModel, data: &[(Vec<f64>, usize)]) -> Result<f64> {
    let states = model.embed_all(&data.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>())?;
    let pick = |label| -> Vec<Statevector> {
        states
            .iter()
            .zip(data)
            .filter(|(_, (_, y))| *y == label)
            .map(|(s, _)| s.clone())
            .collect()
    };
    ensemble_trace_distance(&EnsemblePair::from_states(&pick(0), &pick(1))?)
}

fn check_binary(data: &[(Vec<f64>, usize)]) -> Result<()> {
    if let Some((_, y)) = data.iter().find(|(_, y)| *y > 1) {
        return domain(format!("embedding training needs binary labels, found {y}"));
    }
    Ok(())
}

/// All index pairs `i < j` of a batch.
fn batch_pairs(len: usize) -> Vec<(usize, usize)> {
    (0..len).flat_map(|i| (i + 1..len).map(move |j| (i, j))).collect()
}

/// Mean over pairs of `(|⟨ψ_i|ψ_j⟩|² − t_ij)²` and its gradient with
/// respect to the trainable parameters.
pub fn pair_loss_and_gradient(
    model: &EmbeddingModel,
    batch: &[(Vec<f64>, usize)],
    method: GradientMethod,
) -> Result<(f64, Vec<f64>)> {
    check_binary(batch)?;
    let pairs = batch_pairs(batch.len());
    if pairs.is_empty() {
        return domain("a batch needs at least two points");
    }
    let circuits: Vec<(Circuit, Vec<f64>)> = batch
        .iter()
        .map(|(x, _)| embedding_circuit(x, &model.spec, Some(&model.phi), model.mlp.as_ref()))
        .collect::<Result<_>>()?;
    let zero = Statevector::zero(model.spec.n_qubits)?;
    let states: Vec<Statevector> = circuits
        .par_iter()
        .map(|(c, p)| apply_circuit(c, p, &zero))
        .collect::<Result<_>>()?;
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    // dL/df and the overlap per pair.
    let mut pair_terms = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let s = states[i].inner(&states[j]);
        let f = s.norm_sqr();
        let t = if batch[i].1 == batch[j].1 { 1.0 } else { 0.0 };
        loss += scale * (f - t).powi(2);
        pair_terms.push((2.0 * scale * (f - t), s));
    }

    // Gradient of the loss with respect to every slot of every circuit.
    let slot_grads: Vec<Vec<f64>> = match method {
        GradientMethod::Adjoint => {
            let dim = states[0].dim();
            let mut cot = vec![vec![C64::default(); dim]; batch.len()];
            for (&(i, j), &(w, s)) in pairs.iter().zip(&pair_terms) {
                let ci = (s * w * 2.0).conj();
                let cj = s * w * 2.0;
                for k in 0..dim {
                    cot[i][k] += ci * states[j].amplitudes()[k];
                    cot[j][k] += cj * states[i].amplitudes()[k];
                }
            }
            (0..batch.len())
                .into_par_iter()
                .map(|k| {
                    let (c, p) = &circuits[k];
                    Ok(vjp_from_output(c, p, &states[k], &cot[k])?.iter().map(|g| g.re).collect())
                })
                .collect::<Result<_>>()?
        }
        GradientMethod::ParameterShift => (0..batch.len())
            .into_par_iter()
            .map(|k| {
                let (c, p) = &circuits[k];
                let mut g = vec![0.0; c.n_params()];
                for (gi, gate) in c.gates().iter().enumerate() {
                    let Some((slot, sc)) = gate.param_slot() else { continue };
                    let plus = apply_circuit_shifted(c, p, &zero, gi, FRAC_PI_2)?;
                    let minus = apply_circuit_shifted(c, p, &zero, gi, -FRAC_PI_2)?;
                    let mut d = 0.0;
                    for (&(i, j), &(w, _)) in pairs.iter().zip(&pair_terms) {
                        let other = if i == k {
                            &states[j]
                        } else if j == k {
                            &states[i]
                        } else {
                            continue;
                        };
                        d += w * (other.fidelity(&plus) - other.fidelity(&minus)) / 2.0;
                    }
                    g[slot] += sc * d;
                }
                Ok(g)
            })
            .collect::<Result<_>>()?,
    };

    let grad = match model.spec.scheme {
        Scheme::ZzFixed => vec![],
        Scheme::Tqe => {
            let n_phi = model.phi.len();
            let mut g = vec![0.0; n_phi];
            for sg in &slot_grads {
                for (a, b) in g.iter_mut().zip(&sg[..n_phi]) {
                    *a += b;
                }
            }
            g
        }
        Scheme::Nqe => {
            let mlp = model.mlp.as_ref().expect("nqe model has an MLP");
            let mut g = vec![0.0; mlp.n_params()];
            for ((x, _), sg) in batch.iter().zip(&slot_grads) {
                let y = mlp.forward(x)?;
                let upstream = feature_angles_vjp(&y, sg);
                for (a, b) in g.iter_mut().zip(mlp.backward(x, &upstream)?.flatten()) {
                    *a += b;
                }
            }
            g
        }
    };
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub gradient: GradientMethod,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.001,
            seed: 0,
            gradient: GradientMethod::Adjoint,
        }
    }
}

impl EmbedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config {
                field: "batch_size".into(),
                message: "must be at least 2".into(),
            });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config {
                field: "learning_rate".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTrainResult {
    /// Best checkpoint by training-set `D_tr`.
    pub model: EmbeddingModel,
    /// `D_tr` before training, then after every epoch.
    pub trace_distance_history: Vec<f64>,
    /// Mean minibatch loss per epoch.
    pub loss_history: Vec<f64>,
    pub best_epoch: usize,
    pub config: EmbedTrainConfig,
}

impl EmbedTrainResult {
    pub fn write_history_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "trace_distance", "loss"])?;
        for (e, d) in self.trace_distance_history.iter().enumerate() {
            let loss = if e == 0 { String::new() } else { self.loss_history[e - 1].to_string() };
            out.write_record([e.to_string(), d.to_string(), loss])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Minibatch Adam on the pairwise fidelity loss, keeping the checkpoint
/// with the largest training-set trace distance.
pub fn train_embedding(
    model: &EmbeddingModel,
    data: &[(Vec<f64>, usize)],
    config: &EmbedTrainConfig,
) -> Result<EmbedTrainResult> {
    config.validate()?;
    check_binary(data)?;
    if data.len() < 2 {
        return domain("embedding training needs at least two points");
    }
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_d = embedded_trace_distance(model, data)?;
    let mut best_epoch = 0;
    let mut history = vec![best_d];
    let mut losses = Vec::new();
    let mut theta = current.trainable();
    let mut adam = AdamState::new(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let epochs = if current.n_trainable() == 0 { 0 } else { config.epochs };
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<(Vec<f64>, usize)> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grad) = pair_loss_and_gradient(&current, &batch, config.gradient)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!("non-finite embedding loss at epoch {epoch}")));
            }
            adam_step(&mut adam, &mut theta, &grad, config.learning_rate)?;
            current.set_trainable(&theta)?;
            epoch_loss += loss;
            n_batches += 1;
        }
        losses.push(epoch_loss / n_batches.max(1) as f64);
        let d = embedded_trace_distance(&current, data)?;
        history.push(d);
        if d > best_d {
            best_d = d;
            best = current.clone();
            best_epoch = epoch;
        }
    }
    Ok(EmbedTrainResult {
        model: best,
        trace_distance_history: history,
        loss_history: losses,
        best_epoch,
        config: *config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::full_unitary;
    use approx::assert_abs_diff_eq;

    fn max_diff(a: &Statevector, b: &Statevector) -> f64 {
        a.amplitudes().iter().zip(b.amplitudes()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    fn dense_zz_layer(x: &[f64]) -> crate::numc::CMatrix {
        // Independent construction from the gate matrices.
        let n = x.len();
        let mut c = Circuit::new(n);
        for w in 0..n {
            c.push(Gate::H(w));
        }
        for w in 0..n {
            c.push(Gate::Rz(w, Angle::Fixed(2.0 * x[w])));
        }
        for (a, b) in ring_pairs(n) {
            c.push(Gate::Rzz(a, b, Angle::Fixed(2.0 * (PI - x[a]) * (PI - x[b]))));
        }
        full_unitary(&c, &[]).unwrap()
    }

    fn apply_dense(u: &crate::numc::CMatrix, s: &Statevector) -> Statevector {
        Statevector::from_amplitudes(u.matvec(s.amplitudes()).unwrap()).unwrap()
    }

    #[test]
    fn zz_examples() {
        let spec = EmbeddingSpec { zz_layers: 1, ..EmbeddingSpec::new(Scheme::ZzFixed, 3).unwrap() };
        let s = embed_state(&[0.0; 3], &spec, None, None).unwrap();
        // RZZ(2π²) is diagonal, so only phases change relative to |+⟩^⊗3.
        assert!(s.probabilities().iter().all(|p| (p - 0.125).abs() < 1e-12));

        let spec2 = EmbeddingSpec { zz_layers: 1, ..EmbeddingSpec::new(Scheme::ZzFixed, 2).unwrap() };
        let c = zz_feature_map(&[PI, PI], &spec2).unwrap();
        assert!(c.gates().iter().any(|g| matches!(g, Gate::Rzz(_, _, Angle::Fixed(a)) if *a == 0.0)));

        let x = [1.0, 0.5];
        let s = embed_state(&x, &spec2, None, None).unwrap();
        let oracle = apply_dense(&dense_zz_layer(&x), &Statevector::zero(2).unwrap());
        assert!(max_diff(&s, &oracle) < 1e-10);
        assert!(zz_feature_map(&[1.0], &spec2).is_err());
    }

    #[test]
    fn tqe_reductions_and_oracle() {
        let spec = EmbeddingSpec { tqe_layers: 2, ..EmbeddingSpec::new(Scheme::Tqe, 3).unwrap() };
        assert_eq!(spec.n_tqe_params(), 12);
        let x = [0.3, 2.0, 1.1];
        let zero_phi = vec![0.0; 12];
        let s = embed_state(&x, &spec, Some(&zero_phi), None).unwrap();
        let u = dense_zz_layer(&x);
        let rep = apply_dense(&u, &apply_dense(&u, &Statevector::zero(3).unwrap()));
        assert!(max_diff(&s, &rep) < 1e-10);

        let mut r = ChaCha8Rng::seed_from_u64(9);
        let phi: Vec<f64> = (0..12).map(|_| r.gen_range(0.0..6.0)).collect();
        let s = embed_state(&x, &spec, Some(&phi), None).unwrap();
        let mut oracle = Statevector::zero(3).unwrap();
        for layer in 0..2 {
            let mut v = Circuit::new(3);
            for w in 0..3 {
                v.push(Gate::Ry(w, Angle::Fixed(phi[layer * 6 + w])));
            }
            for (p, (a, b)) in ring_pairs(3).into_iter().enumerate() {
                v.push(Gate::Ryy(a, b, Angle::Fixed(phi[layer * 6 + 3 + p])));
            }
            oracle = apply_dense(&full_unitary(&v, &[]).unwrap(), &oracle);
            oracle = apply_dense(&u, &oracle);
        }
        assert!(max_diff(&s, &oracle) < 1e-10);
        assert!(embed_state(&x, &spec, None, None).is_err());
        assert!(embed_state(&x, &spec, Some(&phi[..5]), None).is_err());
    }

    fn identity_mlp(n: usize) -> Mlp {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Mlp {
            dims: vec![n, n],
            weights: vec![w],
            biases: vec![vec![0.0; n]],
            output: OutputMap::Identity,
        }
    }

    #[test]
    fn nqe_identity_reduces_to_zz() {
        let spec = EmbeddingSpec { mlp_dims: vec![4, 4], ..EmbeddingSpec::new(Scheme::Nqe, 4).unwrap() };
        let zz = EmbeddingSpec::new(Scheme::ZzFixed, 4).unwrap();
        let x = [0.2, 1.4, 3.0, 2.2];
        let mlp = identity_mlp(4);
        let a = embed_state(&x, &spec, None, Some(&mlp)).unwrap();
        let b = embed_state(&x, &zz, None, None).unwrap();
        assert_eq!(a.amplitudes(), b.amplitudes());
        assert!(embed_state(&x, &spec, None, None).is_err());
    }

    #[test]
    fn mlp_zero_and_linear_gradient() {
        let mut m = Mlp::new(&[3, 5, 2], 1).unwrap();
        m.output = OutputMap::Identity;
        m.set_flat(&vec![0.0; m.n_params()]).unwrap();
        assert_eq!(m.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let lin = Mlp {
            dims: vec![2, 2],
            weights: vec![vec![1.0, 2.0, 3.0, 4.0]],
            biases: vec![vec![0.5, -0.5]],
            output: OutputMap::Identity,
        };
        let g = lin.backward(&[0.3, -0.7], &[2.0, -1.0]).unwrap();
        assert_eq!(g.weights[0], vec![0.6, -1.4, -0.3, 0.7]);
        assert_eq!(g.biases[0], vec![2.0, -1.0]);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let m = Mlp::new(&DEFAULT_MLP_DIMS, 5).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..PI)).collect();
        let up: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = m.backward(&x, &up).unwrap().flatten();
        let base = m.flatten();
        let f = |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_flat(p).unwrap();
            mm.forward(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        for k in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[k] += h;
            let fp = f(&p);
            p[k] -= 2.0 * h;
            let fd = (fp - f(&p)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-3), "k={k}: {fd} vs {}", g[k]);
        }
        assert!(m.forward(&x[..3]).is_err());
    }

    fn toy_data(n: usize, count: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let y = i % 2;
                let x = (0..n).map(|_| r.gen_range(0.0..1.5) + 1.5 * y as f64).collect();
                (x, y)
            })
            .collect()
    }

    fn fd_check(model: &EmbeddingModel, batch: &[(Vec<f64>, usize)]) {
        let (_, adj) = pair_loss_and_gradient(model, batch, GradientMethod::Adjoint).unwrap();
        let (_, ps) = pair_loss_and_gradient(model, batch, GradientMethod::ParameterShift).unwrap();
        let base = model.trainable();
        let h = 1e-5;
        for k in (0..base.len()).step_by(3) {
            let mut m = model.clone();
            let mut p = base.clone();
            p[k] += h;
            m.set_trainable(&p).unwrap();
            let lp = pair_loss_and_gradient(&m, batch, GradientMethod::Adjoint).unwrap().0;
            p[k] -= 2.0 * h;
            m.set_trainable(&p).unwrap();
            let lm = pair_loss_and_gradient(&m, batch, GradientMethod::Adjoint).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let tol = 1e-6 * fd.abs().max(1e-3);
            assert!((fd - ps[k]).abs() <= tol, "shift k={k}: {fd} vs {}", ps[k]);
            assert!((fd - adj[k]).abs() <= tol, "adjoint k={k}: {fd} vs {}", adj[k]);
        }
    }

    #[test]
    fn tqe_gradients_match_finite_differences() {
        let spec = EmbeddingSpec { tqe_layers: 2, ..EmbeddingSpec::new(Scheme::Tqe, 4).unwrap() };
        let mut model = EmbeddingModel::new(spec, 0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        model.phi.iter_mut().for_each(|p| *p = r.gen_range(-1.0..1.0));
        fd_check(&model, &toy_data(4, 6, 1));
    }

    #[test]
    fn nqe_gradients_match_finite_differences() {
        let spec = EmbeddingSpec { mlp_dims: vec![4, 6, 4], zz_layers: 2, ..EmbeddingSpec::new(Scheme::Nqe, 4).unwrap() };
        let model = EmbeddingModel::new(spec, 2).unwrap();
        fd_check(&model, &toy_data(4, 5, 2));
    }

    #[test]
    fn training_edge_cases() {
        let spec = EmbeddingSpec { tqe_layers: 1, ..EmbeddingSpec::new(Scheme::Tqe, 2).unwrap() };
        let model = EmbeddingModel::new(spec, 0).unwrap();
        let cfg = EmbedTrainConfig { epochs: 3, ..Default::default() };
        let same = vec![(vec![0.4, 1.0], 0), (vec![0.4, 1.0], 1)];
        let res = train_embedding(&model, &same, &cfg).unwrap();
        assert!(res.trace_distance_history.iter().all(|d| d.abs() < 1e-9));
        assert!(train_embedding(&model, &[(vec![0.0, 0.0], 0), (vec![1.0, 1.0], 2)], &cfg).is_err());

        // Nothing to train for the fixed map: the history is the baseline only.
        let zz = EmbeddingModel::new(EmbeddingSpec { zz_layers: 1, ..EmbeddingSpec::new(Scheme::ZzFixed, 2).unwrap() }, 0).unwrap();
        let pair = vec![(vec![0.0, 0.0], 0), (vec![FRAC_PI_2, 0.0], 1)];
        let d0 = embedded_trace_distance(&zz, &pair).unwrap();
        assert!(d0 > 0.0 && d0 <= 1.0 + 1e-12);
        let res = train_embedding(&zz, &pair, &cfg).unwrap();
        assert_eq!(res.trace_distance_history, vec![d0]);
    }

    #[test]
    fn training_keeps_best_checkpoint_and_is_label_symmetric() {
        let spec = EmbeddingSpec { tqe_layers: 1, ..EmbeddingSpec::new(Scheme::Tqe, 3).unwrap() };
        let model = EmbeddingModel::new(spec, 0).unwrap();
        let data = toy_data(3, 12, 4);
        let cfg = EmbedTrainConfig { epochs: 5, batch_size: 4, learning_rate: 0.05, ..Default::default() };
        let res = train_embedding(&model, &data, &cfg).unwrap();
        let final_d = embedded_trace_distance(&res.model, &data).unwrap();
        assert!(final_d >= res.trace_distance_history[0] - 1e-6);
        assert_abs_diff_eq!(final_d, res.trace_distance_history[res.best_epoch], epsilon = 1e-12);

        let flipped: Vec<_> = data.iter().map(|(x, y)| (x.clone(), 1 - y)).collect();
        let res2 = train_embedding(&model, &flipped, &cfg).unwrap();
        for (a, b) in res.trace_distance_history.iter().zip(&res2.trace_distance_history) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }

        let json = res.model.to_json().unwrap();
        assert_eq!(EmbeddingModel::from_json(&json).unwrap(), res.model);
        let mut buf = Vec::new();
        res.write_history_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

    #[test]
    fn embedded_states_are_normalized() {
        let mut r = ChaCha8Rng::seed_from_u64(44);
        for scheme in [Scheme::ZzFixed, Scheme::Tqe, Scheme::Nqe] {
            let model = EmbeddingModel::new(EmbeddingSpec::new(scheme, 8).unwrap(), 1).unwrap();
            let x: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..PI)).collect();
            assert!((model.embed(&x).unwrap().norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn spec_parses_with_defaults() {
        let s: EmbeddingSpec = serde_json::from_str(r#"{"scheme":"nqe","n_qubits":8}"#).unwrap();
        assert_eq!(s.mlp_dims, DEFAULT_MLP_DIMS.to_vec());
        assert_eq!(s.zz_layers, 3);
        assert!(serde_json::from_str::<EmbeddingSpec>(r#"{"scheme":"nqe","n_qubits":8,"x":1}"#).is_err());
        let bad = EmbeddingSpec { mlp_dims: vec![8, 4], ..s };
        assert!(bad.validate().is_err());
    }
}
