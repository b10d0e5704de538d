//! Quantum phase recognition data: ground states of the generalized cluster
//! Hamiltonian `H = Σ_j (Z_j − J1 X_j X_{j+1} − J2 X_{j−1} Z_j X_{j+1})` on a
//! periodic chain, labelled by phase.
//!
//! Labels come from the grid, never from a phase-diagram formula. The shipped
//! [`default_regions`] place points well inside each phase.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::numc::{c64, eig_hermitian, eig_symmetric_real, CMatrix, C64};
use crate::qsim::Statevector;

pub const MIN_SITES: usize = 2;
pub const MAX_SITES: usize = 9;
pub const N_PHASES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Ferromagnetic = 0,
    Antiferromagnetic = 1,
    Spt = 2,
    Trivial = 3,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Ferromagnetic,
        Phase::Antiferromagnetic,
        Phase::Spt,
        Phase::Trivial,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL
            .get(label)
            .copied()
            .ok_or_else(|| Error::Domain(format!("phase label {label} out of range")))
    }
}

/// Pauli terms of H as `(coefficient, flip mask, z mask)`: the term maps
/// `|b⟩` to `coef · (−1)^{popcount(b & z)} |b ⊕ flip⟩`.
fn pauli_terms(n: usize, j1: f64, j2: f64) -> Vec<(f64, usize, usize)> {
    let bit = |j: usize| 1usize << (n - 1 - (j % n));
    let mut terms = Vec::with_capacity(3 * n);
    for j in 0..n {
        terms.push((1.0, 0, bit(j)));
        terms.push((-j1, bit(j) ^ bit(j + 1), 0));
        // X_{j−1} and X_{j+1} coincide on a 2-site ring and cancel.
        terms.push((-j2, bit(j + n - 1) ^ bit(j + 1), bit(j)));
    }
    terms
}

fn check_sites(n: usize) -> Result<()> {
    if !(MIN_SITES..=MAX_SITES).contains(&n) {
        return Err(Error::Capacity(format!(
            "cluster Hamiltonian supports {MIN_SITES}..={MAX_SITES} sites, got {n}"
        )));
    }
    Ok(())
}

/// Dense `2^n × 2^n` Hamiltonian with real entries.
pub fn build_hamiltonian(n: usize, j1: f64, j2: f64) -> Result<CMatrix> {
    check_sites(n)?;
    if !j1.is_finite() || !j2.is_finite() {
        return domain("couplings must be finite");
    }
    let dim = 1usize << n;
    let mut h = CMatrix::zeros(dim, dim);
    let terms = pauli_terms(n, j1, j2);
    for b in 0..dim {
        for &(coef, flip, z) in &terms {
            let sign = if (b & z).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            h[(b ^ flip, b)] += c64(coef * sign, 0.0);
        }
    }
    Ok(h)
}

/// Lowest eigenpair. The first eigenvector (ascending order) is taken and
/// its lowest-index nonzero amplitude is rotated to be real and positive.
pub fn ground_state(h: &CMatrix) -> Result<(Statevector, f64)> {
    let eig = eig_hermitian(h)?;
    let energy = eig.eigenvalues[0];
    let v = fix_phase(eig.eigenvector(0));
    Ok((Statevector::normalized(v)?, energy))
}

fn fix_phase(mut v: Vec<C64>) -> Vec<C64> {
    let scale = v.iter().map(|a| a.norm()).fold(0.0, f64::max);
    if let Some(a) = v.iter().find(|a| a.norm() > 1e-10 * scale.max(1e-300)) {
        let phase = a.conj() / a.norm();
        for x in v.iter_mut() {
            *x *= phase;
        }
    }
    v
}

/// `‖Hv − Ev‖₂`.
pub fn eigen_residual(h: &CMatrix, v: &Statevector, energy: f64) -> Result<f64> {
    let hv = h.matvec(v.amplitudes())?;
    Ok(hv
        .iter()
        .zip(v.amplitudes())
        .map(|(a, b)| (a - b * energy).norm_sqr())
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    #[serde(rename = "J1")]
    pub j1: f64,
    #[serde(rename = "J2")]
    pub j2: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QPRPoint {
    pub j1: f64,
    pub j2: f64,
    pub ground_state: Statevector,
    pub energy: f64,
    pub label: usize,
}

/// Ground state via the two Z-parity sectors of H (every term flips an even
/// number of bits, so H is block diagonal in parity). Each sector is a real
/// symmetric matrix of half the dimension. When the sector minima agree to
/// 1e-10 the even sector is taken.
pub fn cluster_ground_state(n: usize, j1: f64, j2: f64) -> Result<(Statevector, f64)> {
    check_sites(n)?;
    if !j1.is_finite() || !j2.is_finite() {
        return domain("couplings must be finite");
    }
    let dim = 1usize << n;
    let terms = pauli_terms(n, j1, j2);
    let mut best: Option<(f64, Vec<C64>)> = None;
    for parity in [0u32, 1] {
        let basis: Vec<usize> = (0..dim).filter(|b| b.count_ones() % 2 == parity).collect();
        let mut pos = vec![usize::MAX; dim];
        for (i, &b) in basis.iter().enumerate() {
            pos[b] = i;
        }
        let h = basis.len();
        let mut block = vec![0.0; h * h];
        for (col, &b) in basis.iter().enumerate() {
            for &(coef, flip, z) in &terms {
                let sign = if (b & z).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                block[pos[b ^ flip] * h + col] += coef * sign;
            }
        }
        let (values, vecs) = eig_symmetric_real(&block, h)?;
        let e = values[0];
        if best.as_ref().is_none_or(|(e0, _)| e < e0 - 1e-10) {
            let mut full = vec![C64::default(); dim];
            for (i, &b) in basis.iter().enumerate() {
                full[b] = c64(vecs[i], 0.0);
            }
            best = Some((e, full));
        }
    }
    let (energy, v) = best.expect("two sectors visited");
    Ok((Statevector::normalized(fix_phase(v))?, energy))
}

/// Ground state of one grid point; fails if the eigen-residual exceeds 1e-8.
pub fn solve_point(n: usize, p: &GridPoint) -> Result<QPRPoint> {
    Phase::from_label(p.label)?;
    let h = build_hamiltonian(n, p.j1, p.j2)?;
    let (ground_state, energy) = cluster_ground_state(n, p.j1, p.j2)?;
    let res = eigen_residual(&h, &ground_state, energy)?;
    if res >= 1e-8 {
        return Err(Error::Numerical(format!(
            "ground-state residual {res:e} at (J1={}, J2={})",
            p.j1, p.j2
        )));
    }
    Ok(QPRPoint {
        j1: p.j1,
        j2: p.j2,
        ground_state,
        energy,
        label: p.label,
    })
}

/// Solves grid points in parallel; output order follows input order.
pub fn solve_points(n: usize, points: &[GridPoint]) -> Result<Vec<QPRPoint>> {
    points.par_iter().map(|p| solve_point(n, p)).collect()
}

/// Sampling region for one phase: a box, optionally cut by half-planes
/// `a·J1 + b·J2 ≤ c` given as `[a, b, c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseRegion {
    pub label: usize,
    pub j1: (f64, f64),
    pub j2: (f64, f64),
    #[serde(default)]
    pub constraints: Vec<[f64; 3]>,
}

impl PhaseRegion {
    pub fn contains(&self, j1: f64, j2: f64) -> bool {
        (self.j1.0..=self.j1.1).contains(&j1)
            && (self.j2.0..=self.j2.1).contains(&j2)
            && self.constraints.iter().all(|[a, b, c]| a * j1 + b * j2 <= *c)
    }
}

/// Regions covering the four phases of the generalized cluster model up to
/// 0.1 from the lines where the infinite-chain gap closes (`J2 = 1 − J1`,
/// `J2 = 1 + J1`, and `J2 = −1` for `|J1| ≤ 2`): ferromagnetic for positive
/// J1, antiferromagnetic for negative J1, SPT (cluster) for large J2, and
/// the field-dominated trivial phase around the origin.
pub fn default_regions() -> Vec<PhaseRegion> {
    const M: f64 = 0.1;
    vec![
        PhaseRegion {
            label: Phase::Ferromagnetic.label(),
            j1: (0.0, 4.0),
            j2: (-1.0 + M, 4.0),
            // J2 ≥ 1 − J1 + m, J2 ≤ 1 + J1 − m
            constraints: vec![[-1.0, -1.0, -(1.0 + M)], [-1.0, 1.0, 1.0 - M]],
        },
        PhaseRegion {
            label: Phase::Antiferromagnetic.label(),
            j1: (-4.0, 0.0),
            j2: (-1.0 + M, 4.0),
            constraints: vec![[1.0, -1.0, -(1.0 + M)], [1.0, 1.0, 1.0 - M]],
        },
        PhaseRegion {
            label: Phase::Spt.label(),
            j1: (-3.0, 3.0),
            j2: (1.0 + M, 4.0),
            // J2 ≥ 1 + |J1| + m
            constraints: vec![[1.0, -1.0, -(1.0 + M)], [-1.0, -1.0, -(1.0 + M)]],
        },
        PhaseRegion {
            label: Phase::Trivial.label(),
            j1: (-1.0, 1.0),
            j2: (-1.0 + M, 1.0),
            // J2 ≤ 1 − |J1| − m
            constraints: vec![[1.0, 1.0, 1.0 - M], [-1.0, 1.0, 1.0 - M]],
        },
    ]
}

/// `per_class` points drawn uniformly from every region (rejection
/// sampling against the constraints), region-major order.
pub fn grid_from_regions(regions: &[PhaseRegion], per_class: usize, seed: u64) -> Result<Vec<GridPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = Vec::with_capacity(regions.len() * per_class);
    for r in regions {
        Phase::from_label(r.label)?;
        if !(r.j1.0 <= r.j1.1 && r.j2.0 <= r.j2.1) {
            return domain(format!("empty region for label {}", r.label));
        }
        let mut drawn = 0;
        let mut tries = 0usize;
        while drawn < per_class {
            tries += 1;
            if tries > 1000 * (per_class + 1) {
                return domain(format!("region for label {} has (almost) no area", r.label));
            }
            let j1 = r.j1.0 + (r.j1.1 - r.j1.0) * rng.gen::<f64>();
            let j2 = r.j2.0 + (r.j2.1 - r.j2.0) * rng.gen::<f64>();
            if r.contains(j1, j2) {
                grid.push(GridPoint { j1, j2, label: r.label });
                drawn += 1;
            }
        }
    }
    Ok(grid)
}

pub fn default_grid(per_class: usize, seed: u64) -> Result<Vec<GridPoint>> {
    grid_from_regions(&default_regions(), per_class, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(rename = "J1")]
    pub j1: f64,
    #[serde(rename = "J2")]
    pub j2: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQuantumDataset {
    pub samples: Vec<(Statevector, usize)>,
    pub k: usize,
    pub original_labels: Vec<usize>,
    pub randomized: Vec<bool>,
    pub noise_fraction: f64,
    pub noise_seed: Option<u64>,
    pub sample_seed: u64,
    pub meta: Vec<SampleMeta>,
}

impl LabeledQuantumDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_qubits(&self) -> usize {
        self.samples.first().map_or(0, |(s, _)| s.n_qubits())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|(_, y)| *y).collect()
    }

    pub fn states(&self) -> Vec<&Statevector> {
        self.samples.iter().map(|(s, _)| s).collect()
    }

    /// Builds a dataset from already-solved points (no label noise).
    pub fn from_points(points: Vec<QPRPoint>, k: usize, sample_seed: u64) -> Result<Self> {
        let mut samples = Vec::with_capacity(points.len());
        let mut meta = Vec::with_capacity(points.len());
        for p in points {
            if p.label >= k {
                return domain(format!("label {} outside [0, {k})", p.label));
            }
            meta.push(SampleMeta {
                j1: p.j1,
                j2: p.j2,
                energy: p.energy,
            });
            samples.push((p.ground_state, p.label));
        }
        let original_labels = samples.iter().map(|(_, y)| *y).collect();
        Ok(Self {
            randomized: vec![false; samples.len()],
            samples,
            k,
            original_labels,
            noise_fraction: 0.0,
            noise_seed: None,
            sample_seed,
            meta,
        })
    }
}

/// Indices into `grid`: `m / 4` per class, seeded, without replacement,
/// class-major.
pub fn select_indices(grid: &[GridPoint], m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || !m.is_multiple_of(N_PHASES) {
        return domain(format!("m = {m} must be a positive multiple of {N_PHASES}"));
    }
    let per = m / N_PHASES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(m);
    for class in 0..N_PHASES {
        let pool: Vec<usize> = (0..grid.len()).filter(|&i| grid[i].label == class).collect();
        if pool.len() < per {
            return domain(format!(
                "class {class} has {} grid points, {per} required",
                pool.len()
            ));
        }
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), per).into_iter().map(|i| pool[i]).collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

/// Evenly split dataset of `m` ground states on `n` sites.
pub fn sample_dataset(n: usize, grid: &[GridPoint], m: usize, seed: u64) -> Result<LabeledQuantumDataset> {
    check_sites(n)?;
    let idx = select_indices(grid, m, seed)?;
    let chosen: Vec<GridPoint> = idx.iter().map(|&i| grid[i]).collect();
    let points = solve_points(n, &chosen)?;
    LabeledQuantumDataset::from_points(points, N_PHASES, seed)
}

/// Resamples `⌊fraction·m⌋` seeded-chosen labels uniformly over `[k]`.
pub fn randomize_labels(d: &LabeledQuantumDataset, fraction: f64, seed: u64) -> Result<LabeledQuantumDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return domain(format!("noise fraction {fraction} outside [0, 1]"));
    }
    if fraction == 0.0 {
        return Ok(d.clone());
    }
    let m = d.len();
    let count = ((fraction * m as f64).floor() as usize).min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample(&mut rng, m, count).into_vec();
    chosen.sort_unstable();
    let mut out = d.clone();
    for i in chosen {
        out.samples[i].1 = rng.gen_range(0..d.k);
        out.randomized[i] = true;
    }
    out.noise_fraction = fraction;
    out.noise_seed = Some(seed);
    Ok(out)
}

const AMPLITUDE_FILE: &str = "amplitudes.bin";
const MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub n_qubits: usize,
    pub m: usize,
    pub k: usize,
    pub labels: Vec<usize>,
    pub original_labels: Vec<usize>,
    pub randomized: Vec<bool>,
    pub noise_fraction: f64,
    pub noise_seed: Option<u64>,
    pub sample_seed: u64,
    pub points: Vec<SampleMeta>,
    pub amplitudes_file: String,
    pub amplitudes_sha256: String,
}

/// Writes `amplitudes.bin` (little-endian `f64` re/im pairs, sample-major)
/// and `dataset.json` into `dir`. Returns the manifest.
pub fn save_dataset(d: &LabeledQuantumDataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(d.len() * d.samples.first().map_or(0, |s| s.0.dim()) * 16);
    for (s, _) in &d.samples {
        for a in s.amplitudes() {
            bytes.extend_from_slice(&a.re.to_le_bytes());
            bytes.extend_from_slice(&a.im.to_le_bytes());
        }
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    fs::write(dir.join(AMPLITUDE_FILE), &bytes)?;
    let manifest = DatasetManifest {
        n_qubits: d.n_qubits(),
        m: d.len(),
        k: d.k,
        labels: d.labels(),
        original_labels: d.original_labels.clone(),
        randomized: d.randomized.clone(),
        noise_fraction: d.noise_fraction,
        noise_seed: d.noise_seed,
        sample_seed: d.sample_seed,
        points: d.meta.clone(),
        amplitudes_file: AMPLITUDE_FILE.to_string(),
        amplitudes_sha256: digest,
    };
    let f = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<LabeledQuantumDataset> {
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?))?;
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(dir.join(&manifest.amplitudes_file))?).read_to_end(&mut bytes)?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.amplitudes_sha256 {
        return Err(Error::Format {
            offset: 0,
            message: "amplitude file checksum mismatch".into(),
        });
    }
    let dim = 1usize << manifest.n_qubits;
    if bytes.len() != manifest.m * dim * 16
        || manifest.labels.len() != manifest.m
        || manifest.original_labels.len() != manifest.m
        || manifest.randomized.len() != manifest.m
        || manifest.points.len() != manifest.m
    {
        return Err(Error::Format {
            offset: bytes.len(),
            message: "manifest and amplitude file disagree on sample count".into(),
        });
    }
    let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8-byte slice"));
    let mut samples = Vec::with_capacity(manifest.m);
    for (i, &y) in manifest.labels.iter().enumerate() {
        if y >= manifest.k {
            return domain(format!("stored label {y} outside [0, {})", manifest.k));
        }
        let base = i * dim * 16;
        let amps = (0..dim).map(|j| c64(f(base + 16 * j), f(base + 16 * j + 8))).collect();
        samples.push((Statevector::from_amplitudes(amps)?, y));
    }
    Ok(LabeledQuantumDataset {
        samples,
        k: manifest.k,
        original_labels: manifest.original_labels,
        randomized: manifest.randomized,
        noise_fraction: manifest.noise_fraction,
        noise_seed: manifest.noise_seed,
        sample_seed: manifest.sample_seed,
        meta: manifest.points,
    })
}

/// CSV with columns `J1,J2,label,energy`.
pub fn write_csv(d: &LabeledQuantumDataset, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["J1", "J2", "label", "energy"])?;
    for (m, (_, y)) in d.meta.iter().zip(&d.samples) {
        out.write_record([m.j1.to_string(), m.j2.to_string(), y.to_string(), m.energy.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numc::kron;

    fn pauli(name: char) -> CMatrix {
        let r = |v: [f64; 4]| CMatrix::from_real(2, 2, &v).unwrap();
        match name {
            'I' => r([1., 0., 0., 1.]),
            'X' => r([0., 1., 1., 0.]),
            'Z' => r([1., 0., 0., -1.]),
            _ => unreachable!(),
        }
    }

    /// Kronecker-product construction, one Pauli string at a time.
    fn hamiltonian_oracle(n: usize, j1: f64, j2: f64) -> CMatrix {
        let string = |ops: &[(usize, char)]| {
            let mut per_site = vec![pauli('I'); n];
            for &(site, p) in ops {
                per_site[site % n] = per_site[site % n].matmul(&pauli(p)).unwrap();
            }
            per_site.iter().skip(1).fold(per_site[0].clone(), |acc, m| kron(&acc, m).unwrap())
        };
        let dim = 1 << n;
        let mut h = CMatrix::zeros(dim, dim);
        for j in 0..n {
            h = h.add(&string(&[(j, 'Z')])).unwrap();
            h = h.sub(&string(&[(j, 'X'), (j + 1, 'X')]).scale_real(j1)).unwrap();
            h = h
                .sub(&string(&[(j + n - 1, 'X'), (j, 'Z'), (j + 1, 'X')]).scale_real(j2))
                .unwrap();
        }
        h
    }

    #[test]
    fn trivial_point_is_all_ones() {
        let h = build_hamiltonian(8, 0.0, 0.0).unwrap();
        assert!(h.is_diagonal());
        let (s, e) = ground_state(&h).unwrap();
        assert!((e + 8.0).abs() < 1e-9);
        let ones = Statevector::basis(8, 255).unwrap();
        assert!(s.fidelity(&ones) > 1.0 - 1e-9);
    }

    #[test]
    fn matches_kron_oracle() {
        for (n, j1, j2) in [(2, 0.7, -1.3), (3, 1.0, 0.4), (4, 1.0, 0.0), (5, -0.3, 2.2)] {
            let h = build_hamiltonian(n, j1, j2).unwrap();
            assert!(h.max_abs_diff(&hamiltonian_oracle(n, j1, j2)) < 1e-14, "n={n}");
            assert!(h.is_real());
            assert_eq!(h.hermitian_residual(), 0.0);
        }
        let h = build_hamiltonian(4, 1.0, 0.0).unwrap();
        let (_, e) = ground_state(&h).unwrap();
        let (_, e_oracle) = ground_state(&hamiltonian_oracle(4, 1.0, 0.0)).unwrap();
        assert!((e - e_oracle).abs() < 1e-10);
    }

    #[test]
    fn parity_sectors_agree_with_full_solve() {
        for (n, j1, j2) in [(3, 0.3, 2.5), (4, 2.4, 0.1), (6, -2.0, 0.3), (8, 0.1, -0.2)] {
            let h = build_hamiltonian(n, j1, j2).unwrap();
            let (s_full, e_full) = ground_state(&h).unwrap();
            let (s, e) = cluster_ground_state(n, j1, j2).unwrap();
            assert!((e - e_full).abs() < 1e-9);
            assert!(eigen_residual(&h, &s, e).unwrap() < 1e-8);
            // finite chains have a nondegenerate ground state here
            assert!(s.fidelity(&s_full) > 1.0 - 1e-8, "n={n}");
        }
    }

    #[test]
    fn capacity_bounds() {
        assert!(matches!(build_hamiltonian(1, 0.0, 0.0), Err(Error::Capacity(_))));
        assert!(matches!(build_hamiltonian(10, 0.0, 0.0), Err(Error::Capacity(_))));
    }

    #[test]
    fn scaling_and_residual() {
        let h = build_hamiltonian(4, 0.5, 0.5).unwrap();
        let (s, e) = ground_state(&h).unwrap();
        assert!(eigen_residual(&h, &s, e).unwrap() < 1e-8);
        let (s2, e2) = ground_state(&h.scale_real(2.0)).unwrap();
        assert!((e2 - 2.0 * e).abs() < 1e-10);
        assert!(s.fidelity(&s2) > 1.0 - 1e-10);
    }

    #[test]
    fn ising_dominated_energy_per_site() {
        let h = build_hamiltonian(4, 50.0, 0.0).unwrap();
        let (_, e) = ground_state(&h).unwrap();
        let per_site = e / 4.0;
        assert!((per_site + 50.0).abs() < 0.02 * 50.0, "{per_site}");
    }

    #[test]
    fn phase_convention_is_deterministic() {
        let h = build_hamiltonian(5, 1.3, 0.2).unwrap();
        let (s, _) = ground_state(&h).unwrap();
        let first = s.amplitudes().iter().find(|a| a.norm() > 1e-10).unwrap();
        assert!(first.im.abs() < 1e-14 && first.re > 0.0);
        let (s2, _) = ground_state(&h).unwrap();
        assert_eq!(s, s2);
    }

    fn small_grid() -> Vec<GridPoint> {
        default_grid(6, 11).unwrap()
    }

    #[test]
    fn even_split_and_determinism() {
        let grid = small_grid();
        let d = sample_dataset(4, &grid, 20, 3).unwrap();
        assert_eq!(d.len(), 20);
        for c in 0..4 {
            assert_eq!(d.labels().iter().filter(|&&y| y == c).count(), 5);
        }
        assert_eq!(d, sample_dataset(4, &grid, 20, 3).unwrap());
        assert!(sample_dataset(4, &grid, 28, 3).is_err());
        assert!(sample_dataset(4, &grid, 6, 3).is_err());
    }

    #[test]
    fn forced_selection() {
        let grid = default_grid(1, 0).unwrap();
        let idx = select_indices(&grid, 4, 99).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn label_noise_bookkeeping() {
        let grid = small_grid();
        let d = sample_dataset(3, &grid, 20, 1).unwrap();
        assert_eq!(randomize_labels(&d, 0.0, 5).unwrap(), d);
        let half = randomize_labels(&d, 0.5, 5).unwrap();
        assert_eq!(half.randomized.iter().filter(|&&r| r).count(), 10);
        assert_eq!(half.original_labels, d.labels());
        assert_eq!(half, randomize_labels(&d, 0.5, 5).unwrap());
        for (i, r) in half.randomized.iter().enumerate() {
            if !r {
                assert_eq!(half.samples[i].1, d.samples[i].1);
            }
        }
        assert!(randomize_labels(&d, 1.5, 0).is_err());
    }

    #[test]
    fn full_noise_agreement_near_one_quarter() {
        let points: Vec<QPRPoint> = (0..20)
            .map(|i| QPRPoint {
                j1: 0.0,
                j2: 0.0,
                ground_state: Statevector::zero(2).unwrap(),
                energy: 0.0,
                label: i % 4,
            })
            .collect();
        let d = LabeledQuantumDataset::from_points(points, 4, 0).unwrap();
        let mut agree = 0usize;
        for seed in 0..100 {
            let r = randomize_labels(&d, 1.0, seed).unwrap();
            assert!(r.randomized.iter().all(|&x| x));
            agree += r.labels().iter().zip(&d.original_labels).filter(|(a, b)| a == b).count();
        }
        let rate = agree as f64 / 2000.0;
        // binomial std at p = 1/4, n = 2000 is about 0.0097
        assert!((rate - 0.25).abs() < 0.04, "{rate}");
    }

    #[test]
    fn persistence_round_trip() {
        let grid = small_grid();
        let d = randomize_labels(&sample_dataset(3, &grid, 8, 2).unwrap(), 0.5, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
        let mut csv_out = Vec::new();
        write_csv(&d, &mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.starts_with("J1,J2,label,energy"));
        // corrupt one byte
        let path = dir.path().join(AMPLITUDE_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
