//! Dense complex linear algebra.
//!
//! Everything here works on a single row-major [`CMatrix`] type. Matrices in
//! this crate are small (at most a few hundred rows), so no sparse formats or
//! blocking are used.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{domain, Error, Result};

pub type C64 = Complex64;

/// Hermiticity tolerance (max elementwise |A − A†|).
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Default cap on either side of a Kronecker product.
pub const DEFAULT_KRON_CAP: usize = 1 << 16;

/// Dimension above which [`eig_hermitian`] switches from Jacobi rotations to
/// Householder tridiagonalization.
pub const JACOBI_MAX_DIM: usize = 64;

#[inline]
pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Dense complex matrix in row-major order.
#[derive(Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row: Vec<String> = (0..self.cols.min(8))
                .map(|c| {
                    let z = self[(r, c)];
                    format!("{:+.4}{:+.4}i", z.re, z.im)
                })
                .collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::default(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = c64(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return domain(format!(
                "entry count {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return domain("matrix entries must be finite");
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&x| c64(x, 0.0)).collect())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[C64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn diag_real(values: &[f64]) -> Self {
        let v: Vec<C64> = values.iter().map(|&x| c64(x, 0.0)).collect();
        Self::diag(&v)
    }

    /// Outer product |a⟩⟨b|.
    pub fn outer(a: &[C64], b: &[C64]) -> Self {
        Self::from_fn(a.len(), b.len(), |r, c| a[r] * b[c].conj())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.scale(c64(s, 0.0))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return domain(format!(
                "shape mismatch {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: C64, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return domain("shape mismatch in axpy");
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return domain(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == C64::default() {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if self.cols != v.len() {
            return domain(format!(
                "cannot apply {}x{} matrix to length-{} vector",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Max elementwise |A − A†|; `f64::INFINITY` for non-square input.
    pub fn hermitian_residual(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in r..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_residual() <= tol
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.rows).all(|r| (0..self.cols).all(|c| r == c || self[(r, c)] == C64::default()))
    }

    pub fn is_real(&self) -> bool {
        self.data.iter().all(|z| z.im == 0.0)
    }

    /// Max elementwise |A − B|.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.rows != other.rows || self.cols != other.cols {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Eigenvalues (ascending) and orthonormal eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMatrix,
}

impl EigenDecomposition {
    pub fn eigenvector(&self, i: usize) -> Vec<C64> {
        self.eigenvectors.column(i)
    }

    /// V · diag(λ) · V†.
    pub fn reconstruct(&self) -> CMatrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        CMatrix::from_fn(v.rows(), v.rows(), |r, c| {
            (0..n)
                .map(|k| v[(r, k)] * v[(c, k)].conj() * self.eigenvalues[k])
                .sum()
        })
    }
}

fn check_hermitian(a: &CMatrix) -> Result<()> {
    if !a.is_square() {
        return domain(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        ));
    }
    let res = a.hermitian_residual();
    if res > HERMITIAN_TOL {
        return domain(format!("matrix is not Hermitian (residual {res:.3e})"));
    }
    if !a.is_finite() {
        return domain("matrix has non-finite entries");
    }
    Ok(())
}

/// Hermitian eigendecomposition with eigenvalues sorted ascending.
///
/// Matrices up to [`JACOBI_MAX_DIM`] use [`eig_jacobi`]; larger ones use
/// [`eig_householder`].
pub fn eig_hermitian(a: &CMatrix) -> Result<EigenDecomposition> {
    if a.rows() > JACOBI_MAX_DIM && a.is_real() {
        check_hermitian(a)?;
        let n = a.rows();
        let re: Vec<f64> = a.as_slice().iter().map(|z| z.re).collect();
        let (values, vecs) = eig_symmetric_real(&re, n)?;
        let vectors = CMatrix::from_fn(n, n, |r, c| c64(vecs[c * n + r], 0.0));
        return Ok(EigenDecomposition {
            eigenvalues: values,
            eigenvectors: vectors,
        });
    }
    if a.rows() <= JACOBI_MAX_DIM {
        eig_jacobi(a)
    } else {
        eig_householder(a)
    }
}

/// Cyclic Jacobi eigensolver for Hermitian matrices.
pub fn eig_jacobi(a: &CMatrix) -> Result<EigenDecomposition> {
    check_hermitian(a)?;
    let n = a.rows();
    if n == 0 {
        return Ok(EigenDecomposition {
            eigenvalues: Vec::new(),
            eigenvectors: CMatrix::zeros(0, 0),
        });
    }
    // Symmetrize so rounding in the input cannot leak into the rotations.
    let mut m = CMatrix::from_fn(n, n, |r, c| (a[(r, c)] + a[(c, r)].conj()) * 0.5);
    let mut v = CMatrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[(p, q)];
                let mag = apq.norm();
                if mag <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                // Small entries relative to the diagonal are simply dropped.
                if mag < 1e-18 * (app.abs() + aqq.abs()) {
                    m[(p, q)] = C64::default();
                    m[(q, p)] = C64::default();
                    continue;
                }
                let u = apq / mag;
                let theta = (aqq - app) / (2.0 * mag);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cth = 1.0 / (t * t + 1.0).sqrt();
                let sth = t * cth;
                let uc = u.conj();
                // A <- A G with G_pp = c, G_pq = s, G_qp = -s ū, G_qq = c ū.
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = akp * cth - akq * uc * sth;
                    m[(k, q)] = akp * sth + akq * uc * cth;
                }
                // A <- G† A
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = apk * cth - aqk * u * sth;
                    m[(q, k)] = apk * sth + aqk * u * cth;
                }
                m[(p, q)] = C64::default();
                m[(q, p)] = C64::default();
                m[(p, p)].im = 0.0;
                m[(q, q)].im = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * cth - vkq * uc * sth;
                    v[(k, q)] = vkp * sth + vkq * uc * cth;
                }
            }
        }
    }
    let values: Vec<f64> = (0..n).map(|i| m[(i, i)].re).collect();
    Ok(sorted(values, v))
}

/// Householder tridiagonalization followed by implicit QL iterations.
///
/// The Hermitian input is first reduced to a real tridiagonal matrix by
/// unitary reflections; the eigenvectors of that tridiagonal are then mapped
/// back. `O(n³)` with a small constant, used for the larger matrices where
/// Jacobi sweeps get slow.
pub fn eig_householder(a: &CMatrix) -> Result<EigenDecomposition> {
    check_hermitian(a)?;
    let n = a.rows();
    if n == 0 {
        return eig_jacobi(a);
    }
    let mut m = CMatrix::from_fn(n, n, |r, c| (a[(r, c)] + a[(c, r)].conj()) * 0.5);
    // Accumulated unitary Q with A = Q T Q†.
    let mut q = CMatrix::identity(n);
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n];

    for k in 0..n.saturating_sub(2) {
        // Column k below the diagonal.
        let x: Vec<C64> = (k + 1..n).map(|r| m[(r, k)]).collect();
        let xnorm = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if xnorm <= 1e-300 {
            continue;
        }
        let phase = if x[0].norm() > 0.0 { x[0] / x[0].norm() } else { c64(1.0, 0.0) };
        let alpha = -phase * xnorm;
        let mut w = x.clone();
        w[0] -= alpha;
        let wnorm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if wnorm <= 1e-300 {
            continue;
        }
        for z in &mut w {
            *z /= wnorm;
        }
        // H = I - 2 w w† acting on indices k+1..n.
        // m <- H m H
        let len = n - k - 1;
        // left: rows k+1.. : m[r,:] -= 2 w_r (w† m[:,c])
        let mut wm = vec![C64::default(); n];
        for c in 0..n {
            let mut s = C64::default();
            for i in 0..len {
                s += w[i].conj() * m[(k + 1 + i, c)];
            }
            wm[c] = s;
        }
        for i in 0..len {
            let wi = w[i] * 2.0;
            for c in 0..n {
                let d = wi * wm[c];
                m[(k + 1 + i, c)] -= d;
            }
        }
        // right: m[:,c] -= 2 (m w)_r w_c†
        let mut mw = vec![C64::default(); n];
        for r in 0..n {
            let mut s = C64::default();
            let row = m.row(r);
            for i in 0..len {
                s += row[k + 1 + i] * w[i];
            }
            mw[r] = s;
        }
        for r in 0..n {
            let f = mw[r] * 2.0;
            for i in 0..len {
                m[(r, k + 1 + i)] -= f * w[i].conj();
            }
        }
        // q <- q H
        let mut qw = vec![C64::default(); n];
        for r in 0..n {
            let row = q.row(r);
            let mut s = C64::default();
            for i in 0..len {
                s += row[k + 1 + i] * w[i];
            }
            qw[r] = s;
        }
        for r in 0..n {
            let f = qw[r] * 2.0;
            for i in 0..len {
                q[(r, k + 1 + i)] -= f * w[i].conj();
            }
        }
    }
    // Make the sub-diagonal real with a diagonal phase transform D:
    // T' = D† T D, Q' = Q D.
    let mut phases = vec![c64(1.0, 0.0); n];
    for k in 0..n {
        diag[k] = m[(k, k)].re;
    }
    // d_{k+1} = e_k d_k / |e_k d_k| makes conj(d_{k+1}) e_k d_k = |e_k|.
    for k in 0..n.saturating_sub(1) {
        let e = m[(k + 1, k)] * phases[k];
        let mag = e.norm();
        off[k] = mag;
        phases[k + 1] = if mag > 0.0 { e / mag } else { c64(1.0, 0.0) };
    }
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    tql_implicit(&mut diag, &mut off, &mut z, n)?;
    // eigenvectors: Q · D · Z
    let mut vecs = CMatrix::zeros(n, n);
    for r in 0..n {
        let qrow = q.row(r);
        for c in 0..n {
            let mut s = C64::default();
            for k in 0..n {
                let zk = z[c * n + k];
                if zk != 0.0 {
                    s += qrow[k] * phases[k] * zk;
                }
            }
            vecs[(r, c)] = s;
        }
    }
    Ok(sorted(diag, vecs))
}

/// Eigendecomposition of a real symmetric row-major `n × n` matrix.
///
/// Returns eigenvalues in ascending order and the eigenvectors packed so
/// that `vectors[j * n + k]` is component `k` of eigenvector `j`.
pub fn eig_symmetric_real(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return domain(format!("expected {} entries, got {}", n * n, a.len()));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return domain("matrix has non-finite entries");
    }
    let mut m: Vec<f64> = (0..n * n)
        .map(|i| 0.5 * (a[i] + a[(i % n) * n + i / n]))
        .collect();
    // qt holds Q transposed: row j is column j of Q.
    let mut qt = vec![0.0; n * n];
    for i in 0..n {
        qt[i * n + i] = 1.0;
    }
    let mut w = vec![0.0; n];
    let mut p = vec![0.0; n];
    for k in 0..n.saturating_sub(2) {
        let lo = k + 1;
        let xnorm = (lo..n).map(|r| m[r * n + k].powi(2)).sum::<f64>().sqrt();
        if xnorm <= 1e-300 {
            continue;
        }
        let x0 = m[lo * n + k];
        let alpha = if x0 >= 0.0 { -xnorm } else { xnorm };
        for r in lo..n {
            w[r] = m[r * n + k];
        }
        w[lo] -= alpha;
        let wnorm = (lo..n).map(|r| w[r] * w[r]).sum::<f64>().sqrt();
        if wnorm <= 1e-300 {
            continue;
        }
        for r in lo..n {
            w[r] /= wnorm;
        }
        // trailing block: B <- B - 2 w vᵀ - 2 v wᵀ with v = Bw - (wᵀBw) w
        for r in lo..n {
            let row = &m[r * n..(r + 1) * n];
            p[r] = (lo..n).map(|c| row[c] * w[c]).sum();
        }
        let kk: f64 = (lo..n).map(|r| w[r] * p[r]).sum();
        for r in lo..n {
            p[r] -= kk * w[r];
        }
        for r in lo..n {
            let (wr, pr) = (2.0 * w[r], 2.0 * p[r]);
            let row = &mut m[r * n..(r + 1) * n];
            for c in lo..n {
                row[c] -= wr * p[c] + pr * w[c];
            }
        }
        m[lo * n + k] = alpha;
        m[k * n + lo] = alpha;
        for r in lo + 1..n {
            m[r * n + k] = 0.0;
            m[k * n + r] = 0.0;
        }
        // Q <- Q H, i.e. column c of Q gets -2 w_c (Q w)
        let mut qw = vec![0.0; n];
        for c in lo..n {
            let wc = w[c];
            for (acc, v) in qw.iter_mut().zip(&qt[c * n..(c + 1) * n]) {
                *acc += v * wc;
            }
        }
        for c in lo..n {
            let f = 2.0 * w[c];
            for (v, q) in qt[c * n..(c + 1) * n].iter_mut().zip(&qw) {
                *v -= f * q;
            }
        }
    }
    let mut diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    let mut off: Vec<f64> = (0..n).map(|i| if i + 1 < n { m[(i + 1) * n + i] } else { 0.0 }).collect();
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    if n > 0 {
        tql_implicit(&mut diag, &mut off, &mut z, n)?;
    }
    // eigenvector j = Q z_j = Σ_k z_j[k] · (column k of Q)
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| diag[x].total_cmp(&diag[y]).then(x.cmp(&y)));
    let mut vectors = vec![0.0; n * n];
    for (dst, &j) in order.iter().enumerate() {
        let out = &mut vectors[dst * n..(dst + 1) * n];
        for k in 0..n {
            let zk = z[j * n + k];
            if zk != 0.0 {
                for (o, q) in out.iter_mut().zip(&qt[k * n..(k + 1) * n]) {
                    *o += zk * q;
                }
            }
        }
    }
    let values = order.iter().map(|&j| diag[j]).collect();
    Ok((values, vectors))
}

/// Implicit QL on a real symmetric tridiagonal matrix. `d` holds the
/// diagonal, `e[i]` the entry between rows i and i+1. Rotations are
/// accumulated into `z`, stored so that `z[j * n + k]` is component `k` of
/// eigenvector `j`.
fn tql_implicit(d: &mut [f64], e: &mut [f64], z: &mut [f64], n: usize) -> Result<()> {
    if n == 1 {
        return Ok(());
    }
    e[n - 1] = 0.0;
    // Off-diagonals below ε·‖T‖ are dropped, so blocks of numerically zero
    // rows split instead of iterating on rounding noise.
    let scale = (0..n).map(|i| d[i].abs() + e[i].abs()).fold(0.0, f64::max);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut mm = l;
            while mm < n - 1 {
                let dd = (d[mm].abs() + d[mm + 1].abs()).max(scale);
                if e[mm].abs() <= f64::EPSILON * dd {
                    break;
                }
                mm += 1;
            }
            if mm == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::Numerical("tridiagonal QL did not converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[mm] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut i = mm;
            let mut early = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[mm] = 0.0;
                    early = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let (lo, hi) = z.split_at_mut((i + 1) * n);
                let zi = &mut lo[i * n..];
                let zi1 = &mut hi[..n];
                for k in 0..n {
                    let (a, b) = (zi[k], zi1[k]);
                    zi1[k] = s * a + c * b;
                    zi[k] = c * a - s * b;
                }
            }
            if early {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[mm] = 0.0;
        }
    }
    Ok(())
}

fn sorted(values: Vec<f64>, vectors: CMatrix) -> EigenDecomposition {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&i| values[i]).collect();
    let eigenvectors = CMatrix::from_fn(vectors.rows(), n, |r, c| vectors[(r, order[c])]);
    EigenDecomposition {
        eigenvalues,
        eigenvectors,
    }
}

/// Largest singular value.
pub fn spectral_norm(a: &CMatrix) -> Result<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return domain("spectral norm of an empty matrix");
    }
    if !a.is_finite() {
        return domain("matrix has non-finite entries");
    }
    if a.is_square() && a.is_diagonal() {
        return Ok((0..a.rows()).map(|i| a[(i, i)].norm()).fold(0.0, f64::max));
    }
    if a.is_square() && a.is_hermitian(HERMITIAN_TOL) {
        let eig = eig_hermitian(a)?;
        return Ok(eig.eigenvalues.iter().map(|l| l.abs()).fold(0.0, f64::max));
    }
    let gram = a.adjoint().matmul(a)?;
    let eig = eig_hermitian(&gram)?;
    Ok(eig.eigenvalues.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

/// Sum over columns of the column 2-norms.
pub fn norm_21(a: &CMatrix) -> f64 {
    (0..a.cols())
        .map(|c| {
            (0..a.rows())
                .map(|r| a[(r, c)].norm_sqr())
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// Σ|λ_i| of a Hermitian matrix.
pub fn trace_norm(a: &CMatrix) -> Result<f64> {
    check_hermitian(a)?;
    if a.is_diagonal() {
        return Ok((0..a.rows()).map(|i| a[(i, i)].re.abs()).sum());
    }
    let eig = eig_hermitian(a)?;
    Ok(eig.eigenvalues.iter().map(|l| l.abs()).sum())
}

/// Kronecker product with the default side-length cap.
pub fn kron(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    kron_capped(a, b, DEFAULT_KRON_CAP)
}

pub fn kron_capped(a: &CMatrix, b: &CMatrix, cap: usize) -> Result<CMatrix> {
    let rows = a.rows().checked_mul(b.rows());
    let cols = a.cols().checked_mul(b.cols());
    match (rows, cols) {
        (Some(r), Some(c)) if r <= cap && c <= cap => {
            let mut out = CMatrix::zeros(r, c);
            for ar in 0..a.rows() {
                for ac in 0..a.cols() {
                    let x = a[(ar, ac)];
                    if x == C64::default() {
                        continue;
                    }
                    for br in 0..b.rows() {
                        for bc in 0..b.cols() {
                            out[(ar * b.rows() + br, ac * b.cols() + bc)] = x * b[(br, bc)];
                        }
                    }
                }
            }
            Ok(out)
        }
        _ => Err(Error::Capacity(format!(
            "kron of {}x{} and {}x{} exceeds side cap {cap}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ))),
    }
}

/// Standard inner product ⟨a|b⟩ (conjugate-linear in `a`).
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    fn check_decomposition(a: &CMatrix, eig: &EigenDecomposition) {
        let n = a.rows();
        let v = &eig.eigenvectors;
        let vhv = v.adjoint().matmul(v).unwrap();
        assert!(vhv.max_abs_diff(&CMatrix::identity(n)) < 1e-10);
        for i in 0..n {
            let col = v.column(i);
            let av = a.matvec(&col).unwrap();
            let res: f64 = av
                .iter()
                .zip(&col)
                .map(|(x, y)| (x - y * eig.eigenvalues[i]).norm())
                .fold(0.0, f64::max);
            assert!(res < 1e-9, "column {i} residual {res}");
        }
        // direct multiplication oracle
        let lam = CMatrix::diag_real(&eig.eigenvalues);
        let recon = v.matmul(&lam).unwrap().matmul(&v.adjoint()).unwrap();
        assert!(recon.max_abs_diff(a) < 1e-8);
        assert!(eig.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eig_identity() {
        let eig = eig_hermitian(&CMatrix::identity(4)).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0; 4]);
    }

    #[test]
    fn eig_diagonal() {
        let a = CMatrix::diag_real(&[3.0, -2.0, 0.0]);
        let eig = eig_hermitian(&a).unwrap();
        assert_eq!(eig.eigenvalues, vec![-2.0, 0.0, 3.0]);
        check_decomposition(&a, &eig);
    }

    #[test]
    fn eig_random_hermitian_both_routes() {
        let mut r = rng(11);
        for &n in &[1usize, 2, 5, 8, 17, 40] {
            let a = random_hermitian(n, &mut r);
            let j = eig_jacobi(&a).unwrap();
            check_decomposition(&a, &j);
            let h = eig_householder(&a).unwrap();
            check_decomposition(&a, &h);
            for (x, y) in j.eigenvalues.iter().zip(&h.eigenvalues) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eig_large_real_symmetric() {
        let mut r = rng(5);
        let a = random_hermitian(100, &mut r);
        let a = CMatrix::from_fn(100, 100, |i, j| c64(a[(i, j)].re, 0.0));
        let eig = eig_hermitian(&a).unwrap();
        check_decomposition(&a, &eig);
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let a = CMatrix::from_real(2, 2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(eig_hermitian(&a), Err(Error::Domain(_))));
        let b = CMatrix::zeros(2, 3);
        assert!(matches!(eig_hermitian(&b), Err(Error::Domain(_))));
    }

    #[test]
    fn eig_invariant_under_unitary_conjugation() {
        let mut r = rng(3);
        let a = random_hermitian(6, &mut r);
        let u = random_unitary(6, &mut r);
        let b = u.matmul(&a).unwrap().matmul(&u.adjoint()).unwrap();
        let ea = eig_hermitian(&a).unwrap().eigenvalues;
        let eb = eig_hermitian(&b).unwrap().eigenvalues;
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_norm_examples() {
        assert_eq!(spectral_norm(&CMatrix::identity(5)).unwrap(), 1.0);
        assert_eq!(spectral_norm(&CMatrix::diag_real(&[3.0, 1.0])).unwrap(), 3.0);
        assert!(spectral_norm(&CMatrix::zeros(0, 0)).is_err());
        let mut r = rng(8);
        let a = random_matrix(6, 6, &mut r);
        let gram = a.adjoint().matmul(&a).unwrap();
        let oracle = eig_jacobi(&gram).unwrap().eigenvalues[5].sqrt();
        assert!((spectral_norm(&a).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn norm_21_examples() {
        assert_eq!(norm_21(&CMatrix::zeros(3, 3)), 0.0);
        assert_eq!(norm_21(&CMatrix::identity(7)), 7.0);
        let a = CMatrix::from_real(2, 2, &[3.0, 0.0, 4.0, 0.0]).unwrap();
        assert_eq!(norm_21(&a), 5.0);
        let mut r = rng(4);
        let u = random_unitary(9, &mut r);
        assert!((norm_21(&u) - 9.0).abs() < 1e-9);
    }

    #[test]
    fn trace_norm_examples() {
        assert_eq!(trace_norm(&CMatrix::zeros(2, 2)).unwrap(), 0.0);
        assert_eq!(trace_norm(&CMatrix::diag_real(&[0.5, -0.5])).unwrap(), 1.0);
        let mut r = rng(6);
        let a = random_hermitian(4, &mut r);
        let oracle: f64 = eig_jacobi(&a).unwrap().eigenvalues.iter().map(|l| l.abs()).sum();
        assert!((trace_norm(&a).unwrap() - oracle).abs() < 1e-9);
        let bad = CMatrix::from_real(2, 2, &[0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(trace_norm(&bad).is_err());
    }

    #[test]
    fn norm_ordering_for_hermitian() {
        let mut r = rng(21);
        for _ in 0..10 {
            let a = random_hermitian(5, &mut r);
            let s = spectral_norm(&a).unwrap();
            let t = trace_norm(&a).unwrap();
            assert!(s <= t + 1e-12 && t <= 5.0 * s + 1e-12);
        }
    }

    #[test]
    fn kron_examples() {
        let i2 = CMatrix::identity(2);
        assert_eq!(kron(&i2, &i2).unwrap(), CMatrix::identity(4));
        let k = kron(&CMatrix::diag_real(&[1.0, 2.0]), &CMatrix::diag_real(&[3.0, 4.0])).unwrap();
        assert_eq!(k, CMatrix::diag_real(&[3.0, 4.0, 6.0, 8.0]));
        let z = CMatrix::diag_real(&[1.0, -1.0]);
        let zz = kron(&z, &z).unwrap();
        assert_eq!(zz[(3, 3)], c64(1.0, 0.0));
        assert!(matches!(
            kron_capped(&CMatrix::identity(4), &CMatrix::identity(4), 8),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn real_symmetric_route_matches_jacobi() {
        let mut r = rng(33);
        for n in [1usize, 2, 7, 40, 90] {
            let a = random_hermitian(n, &mut r);
            let re: Vec<f64> = a.as_slice().iter().map(|z| z.re).collect();
            let sym = CMatrix::from_real(n, n, &re).unwrap();
            let (values, vecs) = eig_symmetric_real(&re, n).unwrap();
            let oracle = eig_jacobi(&sym).unwrap();
            for (x, y) in values.iter().zip(&oracle.eigenvalues) {
                assert!((x - y).abs() < 1e-9, "n={n}");
            }
            for j in 0..n {
                let v: Vec<C64> = vecs[j * n..(j + 1) * n].iter().map(|&x| c64(x, 0.0)).collect();
                let av = sym.matvec(&v).unwrap();
                let res: f64 = av.iter().zip(&v).map(|(p, q)| (p - q * values[j]).norm_sqr()).sum();
                assert!(res.sqrt() < 1e-9 && (vec_norm(&v) - 1.0).abs() < 1e-12);
            }
        }
    }
}
