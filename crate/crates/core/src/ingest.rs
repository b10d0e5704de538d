//! Classical data: IDX parsing, binary class filtering, PCA and scaling of
//! features to `[0, π]`.

use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::numc::eig_symmetric_real;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Eigenvalues below this fraction of the largest count as zero when
/// measuring the rank of the covariance.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    Images { count: usize, rows: usize, cols: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(offset, format!("header needs 4 bytes at offset {offset}, file has {}", bytes.len())))
}

/// Parses an IDX image or label file; gzip input is detected by its magic.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| format_err(0, format!("gzip stream: {e}")))?;
        return parse_idx(&raw);
    }
    let magic = be_u32(bytes, 0)?;
    let count = be_u32(bytes, 4)? as usize;
    let (header, item) = match magic {
        IDX_IMAGES_MAGIC => {
            let rows = be_u32(bytes, 8)? as usize;
            let cols = be_u32(bytes, 12)? as usize;
            (16, rows * cols)
        }
        IDX_LABELS_MAGIC => (8, 1),
        other => return Err(format_err(0, format!("unknown IDX magic {other:#010x}"))),
    };
    let expected = header + count * item;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let payload = bytes[header..].to_vec();
    Ok(match magic {
        IDX_IMAGES_MAGIC => IdxData::Images {
            count,
            rows: be_u32(bytes, 8)? as usize,
            cols: be_u32(bytes, 12)? as usize,
            pixels: payload,
        },
        _ => IdxData::Labels(payload),
    })
}

/// Writes an uncompressed IDX file.
pub fn encode_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Images { count, rows, cols, pixels } => {
            out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
            for v in [count, rows, cols] {
                out.extend((*v as u32).to_be_bytes());
            }
            out.extend(pixels);
        }
        IdxData::Labels(labels) => {
            out.extend(IDX_LABELS_MAGIC.to_be_bytes());
            out.extend((labels.len() as u32).to_be_bytes());
            out.extend(labels);
        }
    }
    out
}

/// Feature vectors with labels. Raw data carries class ids; after
/// [`filter_binary`] the labels are ±1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalDataset {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<i64>,
    pub source: String,
    #[serde(default)]
    pub transform: Option<PcaTransform>,
}

impl ClassicalDataset {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// `(x, class)` pairs with `+1 → 0` and `−1 → 1`.
    pub fn binary_pairs(&self) -> Result<Vec<(Vec<f64>, usize)>> {
        self.vectors
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| match y {
                1 => Ok((x.clone(), 0)),
                -1 => Ok((x.clone(), 1)),
                other => domain(format!("label {other} is not ±1")),
            })
            .collect()
    }

    /// SHA-256 over labels and the little-endian feature bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (x, y) in self.vectors.iter().zip(&self.labels) {
            h.update(y.to_le_bytes());
            for v in x {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Pairs an IDX image file with its label file; pixels are scaled to
/// `[0, 1]`.
pub fn dataset_from_idx(images: &IdxData, labels: &IdxData, source: &str) -> Result<ClassicalDataset> {
    let (IdxData::Images { count, rows, cols, pixels }, IdxData::Labels(ys)) = (images, labels) else {
        return domain("expected an image file and a label file");
    };
    if *count != ys.len() {
        return domain(format!("{count} images but {} labels", ys.len()));
    }
    let d = rows * cols;
    Ok(ClassicalDataset {
        vectors: pixels.chunks(d.max(1)).take(*count).map(|p| p.iter().map(|&v| v as f64 / 255.0).collect()).collect(),
        labels: ys.iter().map(|&y| y as i64).collect(),
        source: source.to_string(),
        transform: None,
    })
}

pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<ClassicalDataset> {
    let img = parse_idx(&fs::read(images)?)?;
    let lab = parse_idx(&fs::read(labels)?)?;
    dataset_from_idx(&img, &lab, &images.display().to_string())
}

/// Keeps classes `a` and `b`, relabelled `+1` and `−1`.
pub fn filter_binary(data: &ClassicalDataset, class_a: i64, class_b: i64) -> Result<ClassicalDataset> {
    if class_a == class_b {
        return domain("the two classes must differ");
    }
    for c in [class_a, class_b] {
        if !data.labels.contains(&c) {
            return domain(format!("class {c} is absent"));
        }
    }
    let (vectors, labels) = data
        .vectors
        .iter()
        .zip(&data.labels)
        .filter(|(_, &y)| y == class_a || y == class_b)
        .map(|(x, &y)| (x.clone(), if y == class_a { 1 } else { -1 }))
        .unzip();
    Ok(ClassicalDataset {
        vectors,
        labels,
        source: format!("{} [{class_a} vs {class_b}]", data.source),
        transform: data.transform.clone(),
    })
}

/// Seeded subsample of at most `per_class` rows of every label, kept in
/// original order.
pub fn subsample_per_class(data: &ClassicalDataset, per_class: usize, seed: u64) -> ClassicalDataset {
    let mut classes: Vec<i64> = data.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; data.len()];
    for c in classes {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        let take = per_class.min(idx.len());
        for j in rand::seq::index::sample(&mut rng, idx.len(), take) {
            keep[idx[j]] = true;
        }
    }
    let (vectors, labels) = data
        .vectors
        .iter()
        .zip(&data.labels)
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|((x, y), _)| (x.clone(), *y))
        .unzip();
    ClassicalDataset {
        vectors,
        labels,
        source: data.source.clone(),
        transform: data.transform.clone(),
    }
}

/// Training-set PCA basis plus the per-feature affine map onto `[0, π]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    /// `components[k]` is the k-th principal axis (unit length).
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl PcaTransform {
    /// Principal coordinates before scaling.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return domain(format!("vector has length {}, basis expects {}", x.len(), self.mean.len()));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((a, v), m)| a * (v - m)).sum())
            .collect())
    }

    /// Projection rescaled to `[0, π]` with the training range, clamped.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .project(x)?
            .into_iter()
            .enumerate()
            .map(|(k, p)| {
                let span = self.hi[k] - self.lo[k];
                let t = if span > 0.0 { (p - self.lo[k]) / span } else { 0.5 };
                (t * PI).clamp(0.0, PI)
            })
            .collect())
    }

    pub fn target_dim(&self) -> usize {
        self.components.len()
    }
}

/// Fits PCA with `target_dim` components on `data`.
pub fn fit_pca(data: &ClassicalDataset, target_dim: usize) -> Result<PcaTransform> {
    let n = data.len();
    let d = data.dim();
    if target_dim == 0 || target_dim > d {
        return domain(format!("target dimension {target_dim} outside 1..={d}"));
    }
    if n < target_dim {
        return domain(format!("{n} samples cannot span {target_dim} dimensions"));
    }
    if data.vectors.iter().any(|x| x.len() != d) {
        return domain("vectors have mixed lengths");
    }
    let mut mean = vec![0.0; d];
    for x in &data.vectors {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for x in &data.vectors {
        for (c, (v, m)) in centered.iter_mut().zip(x.iter().zip(&mean)) {
            *c = v - m;
        }
        for r in 0..d {
            let cr = centered[r];
            if cr == 0.0 {
                continue;
            }
            for (slot, cc) in cov[r * d..(r + 1) * d].iter_mut().zip(&centered) {
                *slot += cr * cc;
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    let (values, vectors) = eig_symmetric_real(&cov, d)?;
    let top = values.last().copied().unwrap_or(0.0).max(0.0);
    let rank = values.iter().filter(|&&l| l > RANK_TOL * top.max(f64::MIN_POSITIVE)).count();
    if rank < target_dim {
        return domain(format!("data has rank {rank}, below the target dimension {target_dim}"));
    }
    let mut components = Vec::with_capacity(target_dim);
    let mut eigenvalues = Vec::with_capacity(target_dim);
    for j in (d - target_dim..d).rev() {
        let mut v = vectors[j * d..(j + 1) * d].to_vec();
        // Sign: largest-magnitude component positive.
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues.push(values[j]);
    }
    let mut t = PcaTransform {
        mean,
        components,
        eigenvalues,
        lo: vec![f64::INFINITY; target_dim],
        hi: vec![f64::NEG_INFINITY; target_dim],
    };
    for x in &data.vectors {
        for (k, p) in t.project(x)?.into_iter().enumerate() {
            t.lo[k] = t.lo[k].min(p);
            t.hi[k] = t.hi[k].max(p);
        }
    }
    Ok(t)
}

/// Applies a fitted transform to every vector.
pub fn apply_pca(data: &ClassicalDataset, t: &PcaTransform) -> Result<ClassicalDataset> {
    Ok(ClassicalDataset {
        vectors: data.vectors.iter().map(|x| t.apply(x)).collect::<Result<_>>()?,
        labels: data.labels.clone(),
        source: data.source.clone(),
        transform: Some(t.clone()),
    })
}

/// Fits PCA on `data` and returns the reduced, scaled dataset.
pub fn pca_reduce(data: &ClassicalDataset, target_dim: usize) -> Result<ClassicalDataset> {
    apply_pca(data, &fit_pca(data, target_dim)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalManifest {
    pub source: String,
    pub n_samples: usize,
    pub dim: usize,
    pub labels: Vec<i64>,
    pub transform: Option<PcaTransform>,
    pub features_file: String,
    pub sha256: String,
}

/// Writes `features.bin` (row-major little-endian f64) and `classical.json`.
pub fn save_classical(d: &ClassicalDataset, dir: &Path) -> Result<ClassicalManifest> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(d.len() * d.dim() * 8);
    for x in &d.vectors {
        for v in x {
            bytes.extend(v.to_le_bytes());
        }
    }
    fs::write(dir.join("features.bin"), &bytes)?;
    let manifest = ClassicalManifest {
        source: d.source.clone(),
        n_samples: d.len(),
        dim: d.dim(),
        labels: d.labels.clone(),
        transform: d.transform.clone(),
        features_file: "features.bin".into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    fs::write(dir.join("classical.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_classical(dir: &Path) -> Result<ClassicalDataset> {
    let manifest: ClassicalManifest = serde_json::from_str(&fs::read_to_string(dir.join("classical.json"))?)?;
    let bytes = fs::read(dir.join(&manifest.features_file))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(format_err(0, "feature file checksum mismatch"));
    }
    let expected = manifest.n_samples * manifest.dim * 8;
    if bytes.len() != expected {
        return Err(format_err(bytes.len().min(expected), format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(ClassicalDataset {
        vectors: values.chunks(manifest.dim.max(1)).map(<[f64]>::to_vec).take(manifest.n_samples).collect(),
        labels: manifest.labels,
        source: manifest.source,
        transform: manifest.transform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numc::{eig_jacobi, CMatrix};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn fixture_dir() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist")
    }

    #[test]
    fn crafted_image_round_trips() {
        let pixels: Vec<u8> = (0..784u32).map(|i| (i * 7 % 256) as u8).collect();
        let img = IdxData::Images { count: 1, rows: 28, cols: 28, pixels: pixels.clone() };
        let bytes = encode_idx(&img);
        assert_eq!(bytes.len(), 16 + 784);
        assert_eq!(parse_idx(&bytes).unwrap(), img);
        let labels = IdxData::Labels(vec![3, 1, 4]);
        match parse_idx(&encode_idx(&labels)).unwrap() {
            IdxData::Labels(l) => assert_eq!(l.len(), 3),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn malformed_files_report_offsets() {
        let bytes = encode_idx(&IdxData::Images { count: 1, rows: 28, cols: 28, pixels: vec![0; 784] });
        match parse_idx(&bytes[..500]) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 500);
                assert!(message.contains("800") && message.contains("500"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[3] = 0x07;
        assert!(matches!(parse_idx(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&[0, 0]), Err(Error::Format { .. })));
    }

    #[test]
    fn fixture_loads_and_filters() {
        let dir = fixture_dir();
        let d = load_idx_pair(&dir.join("train-images-idx3-ubyte.gz"), &dir.join("train-labels-idx1-ubyte.gz")).unwrap();
        assert_eq!(d.dim(), 784);
        assert!(d.vectors.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        let count = |ds: &ClassicalDataset, y: i64| ds.labels.iter().filter(|&&l| l == y).count();
        let (n0, n1) = (count(&d, 0), count(&d, 1));
        assert!(count(&d, 2) > 0);
        let b = filter_binary(&d, 0, 1).unwrap();
        assert_eq!(b.len(), n0 + n1);
        assert_eq!((count(&b, 1), count(&b, -1)), (n0, n1));
        assert_eq!(b.labels.iter().sum::<i64>(), n0 as i64 - n1 as i64);
        assert!(filter_binary(&d, 0, 7).is_err());
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> ClassicalDataset {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ClassicalDataset {
            vectors: (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect()).collect(),
            labels: (0..n as i64).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect(),
            source: "gaussian".into(),
            transform: None,
        }
    }

    #[test]
    fn exact_subspace_is_reconstructed() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = vec![1.0, 2.0, 0.0, -1.0, 0.5];
        let b: Vec<f64> = vec![0.0, 1.0, 1.0, 0.0, -2.0];
        let vectors: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let (s, t): (f64, f64) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
                a.iter().zip(&b).map(|(x, y)| 3.0 + s * x + t * y).collect()
            })
            .collect();
        let data = ClassicalDataset { vectors, labels: vec![1; 20], source: "plane".into(), transform: None };
        let t = fit_pca(&data, 2).unwrap();
        for x in &data.vectors {
            let p = t.project(x).unwrap();
            let rec: Vec<f64> = (0..5).map(|k| t.mean[k] + p[0] * t.components[0][k] + p[1] * t.components[1][k]).collect();
            assert!(rec.iter().zip(x).all(|(u, v)| (u - v).abs() < 1e-8));
        }
        assert!(t.project(&t.mean).unwrap().iter().all(|v| v.abs() < 1e-10));
        match fit_pca(&data, 3) {
            Err(Error::Domain(m)) => assert!(m.contains("rank 2"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn isotropic_cloud_variance_fraction() {
        let data = gaussian(4000, 10, 3);
        let t = fit_pca(&data, 4).unwrap();
        let total: f64 = {
            let mut v = [0.0; 10];
            for x in &data.vectors {
                for (k, a) in x.iter().enumerate() {
                    v[k] += (a - t.mean[k]).powi(2);
                }
            }
            v.iter().sum::<f64>() / 3999.0
        };
        let frac = t.eigenvalues.iter().sum::<f64>() / total;
        // Top-4 of 10 sample eigenvalues slightly exceed 0.4 at this size.
        assert!((0.4..0.47).contains(&frac), "{frac}");
    }

    #[test]
    fn projection_matches_dense_oracle() {
        let data = gaussian(30, 8, 4);
        let t = fit_pca(&data, 4).unwrap();
        let mean: Vec<f64> = (0..8).map(|k| data.vectors.iter().map(|x| x[k]).sum::<f64>() / 30.0).collect();
        let cov = CMatrix::from_fn(8, 8, |i, j| {
            let s: f64 = data.vectors.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum();
            crate::numc::c64(s / 29.0, 0.0)
        });
        let eig = eig_jacobi(&cov).unwrap();
        for k in 0..4 {
            let v: Vec<f64> = eig.eigenvector(7 - k).iter().map(|c| c.re).collect();
            assert!((eig.eigenvalues[7 - k] - t.eigenvalues[k]).abs() < 1e-8);
            for x in &data.vectors {
                let ours = t.project(x).unwrap()[k];
                let oracle: f64 = v.iter().zip(x).zip(&mean).map(|((a, b), m)| a * (b - m)).sum();
                assert!((ours.abs() - oracle.abs()).abs() < 1e-8);
            }
        }
        let dots: f64 = t.components[0].iter().zip(&t.components[1]).map(|(a, b)| a * b).sum();
        assert!(dots.abs() < 1e-8);
    }

    #[test]
    fn scaled_features_in_range_and_idempotent() {
        let train = gaussian(60, 6, 5);
        let test = gaussian(40, 6, 6);
        let reduced = pca_reduce(&train, 3).unwrap();
        assert!(reduced.vectors.iter().flatten().all(|v| (0.0..=PI).contains(v)));
        let t = reduced.transform.clone().unwrap();
        assert_eq!(apply_pca(&train, &t).unwrap(), reduced);
        let held = apply_pca(&test, &t).unwrap();
        assert!(held.vectors.iter().flatten().all(|v| (0.0..=PI).contains(v)));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let reduced = pca_reduce(&gaussian(20, 5, 7), 2).unwrap();
        save_classical(&reduced, dir.path()).unwrap();
        assert_eq!(load_classical(dir.path()).unwrap(), reduced);
        fs::write(dir.path().join("features.bin"), [0u8; 16]).unwrap();
        assert!(matches!(load_classical(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn subsample_keeps_per_class_counts() {
        let d = gaussian(50, 3, 8);
        let s = subsample_per_class(&d, 10, 1);
        assert_eq!(s.labels.iter().filter(|&&y| y == 1).count(), 10);
        assert_eq!(s.labels.iter().filter(|&&y| y == -1).count(), 10);
        assert_eq!(subsample_per_class(&d, 10, 1), s);
    }
}
