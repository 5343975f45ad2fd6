//! Small dense linear algebra kit: a row-major matrix, a cyclic Jacobi
//! symmetric eigensolver, and PCA built on top of it.
//!
//! Everything here is double precision and allocation-light; matrices in this
//! crate stay below a few hundred rows.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from row-major data, checking the length.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::structural(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::structural("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major backing storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::structural(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::structural(format!(
                "vector of length {} against {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest |a_ij - a_ji|; `None` for non-square matrices.
    pub fn asymmetry(&self) -> Option<f64> {
        if !self.is_square() {
            return None;
        }
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        Some(worst)
    }

    /// Replaces the matrix with (A + Aᵀ)/2.
    pub fn symmetrize(&mut self) {
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::structural("shape mismatch in subtraction"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Unit eigenvectors stored as columns, in the order of `values`.
    pub vectors: Matrix,
}

impl SymEigen {
    /// V·diag(λ)·Vᵀ
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors[(i, k)] * self.values[k] * self.vectors[(j, k)])
                .sum()
        })
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Iterates until the off-diagonal Frobenius norm falls below 1e-12 of the
/// input's Frobenius norm, for at most 100 sweeps. Each eigenvector's
/// largest-magnitude entry is made positive so results are reproducible.
pub fn sym_eig(a: &Matrix) -> Result<SymEigen> {
    if !a.is_square() {
        return Err(Error::structural(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if !a.is_finite() {
        return Err(Error::structural("sym_eig input has non-finite entries"));
    }
    let asym = a.asymmetry().unwrap_or(0.0);
    if asym > SYMMETRY_TOLERANCE * a.max_abs().max(1.0) {
        return Err(Error::structural(format!(
            "sym_eig input is not symmetric (max |a_ij - a_ji| = {asym:e})"
        )));
    }

    let n = a.rows;
    let mut m = a.clone();
    m.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();

    let off_norm = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        s.sqrt()
    };

    let mut converged = scale == 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged || off_norm(&m) <= JACOBI_TOLERANCE * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }
    if !converged {
        let residual = off_norm(&m);
        if residual > JACOBI_TOLERANCE * scale {
            return Err(Error::numerical(format!(
                "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps \
                 (off-diagonal norm {residual:e}, scale {scale:e})"
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = v.column(src);
        let sign = orientation(&col);
        for (r, x) in col.into_iter().enumerate() {
            vectors[(r, dst)] = sign * x;
        }
    }
    Ok(SymEigen { values, vectors })
}

fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows;
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    // Rotation zeroes (p, q) analytically; pin it to avoid residue.
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// +1 or -1 such that the largest-magnitude entry becomes positive.
fn orientation(x: &[f64]) -> f64 {
    let mut best = 0.0_f64;
    for &xi in x {
        if xi.abs() > best.abs() {
            best = xi;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Principal component model: `x ≈ mean + components · y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    mean: Vec<f64>,
    /// d×k, one unit-norm component per column.
    components: Matrix,
    /// Singular values of the centered sample matrix, descending.
    singular_values: Vec<f64>,
    n_samples: usize,
}

impl Pca {
    /// Reassembles a model from stored parts (e.g. a model file).
    pub fn from_parts(
        mean: Vec<f64>,
        components: Matrix,
        singular_values: Vec<f64>,
        n_samples: usize,
    ) -> Result<Self> {
        if components.rows() != mean.len() || components.cols() != singular_values.len() {
            return Err(Error::structural(format!(
                "pca parts disagree: mean {}, components {}x{}, {} singular values",
                mean.len(),
                components.rows(),
                components.cols(),
                singular_values.len()
            )));
        }
        Ok(Pca {
            mean,
            components,
            singular_values,
            n_samples,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix {
        &self.components
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Input dimension d.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of retained components k.
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::structural(format!(
                "project: vector has length {}, model dimension is {}",
                x.len(),
                self.dim()
            )));
        }
        let k = self.k();
        let mut y = vec![0.0; k];
        for (i, (&xi, &mi)) in x.iter().zip(&self.mean).enumerate() {
            let centered = xi - mi;
            for (yj, &cij) in y.iter_mut().zip(self.components.row(i)) {
                *yj += cij * centered;
            }
        }
        Ok(y)
    }

    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.k() {
            return Err(Error::structural(format!(
                "reconstruct: coefficient vector has length {}, model keeps {} components",
                y.len(),
                self.k()
            )));
        }
        Ok(self
            .mean
            .iter()
            .enumerate()
            .map(|(i, &mi)| mi + dot(self.components.row(i), y))
            .collect())
    }
}

/// Fits a k-component PCA.
///
/// Decomposes the d×d scatter matrix when d ≤ n, otherwise the n×n Gram
/// matrix. Directions with no variance keep a zero singular value and are
/// filled with an orthonormal completion so the component set is always
/// orthonormal.
pub fn pca_fit(samples: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::structural(format!(
            "pca_fit needs at least 2 samples, got {n}"
        )));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::structural(
            "pca_fit samples must share a non-zero dimension",
        ));
    }
    if k == 0 || k > d.min(n - 1) {
        return Err(Error::structural(format!(
            "pca_fit: k = {k} must be in 1..={} for {n} samples of dimension {d}",
            d.min(n - 1)
        )));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::structural(
            "pca_fit samples contain non-finite values",
        ));
    }

    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, &x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let (mut singular_values, mut columns) = if d <= n {
        let scatter = Matrix::from_fn(d, d, |i, j| centered.iter().map(|x| x[i] * x[j]).sum());
        let eig = sym_eig(&scatter)?;
        let values: Vec<f64> = eig.values[..k].iter().map(|&l| l.max(0.0).sqrt()).collect();
        let cols: Vec<Vec<f64>> = (0..k).map(|j| eig.vectors.column(j)).collect();
        (values, cols)
    } else {
        let gram = Matrix::from_fn(n, n, |i, j| dot(&centered[i], &centered[j]));
        let eig = sym_eig(&gram)?;
        let mut values = Vec::with_capacity(k);
        let mut cols = Vec::with_capacity(k);
        for j in 0..k {
            let s = eig.values[j].max(0.0).sqrt();
            let u = eig.vectors.column(j);
            let mut v = vec![0.0; d];
            for (ui, xi) in u.iter().zip(&centered) {
                for (vv, &x) in v.iter_mut().zip(xi) {
                    *vv += ui * x;
                }
            }
            if s > 0.0 {
                for vv in &mut v {
                    *vv /= s;
                }
            }
            values.push(s);
            cols.push(v);
        }
        (values, cols)
    };

    // Directions below the rank tolerance carry no variance.
    let top = singular_values.first().copied().unwrap_or(0.0);
    let cutoff = top * 1e-9;
    let mut rank = 0;
    for s in singular_values.iter_mut() {
        if *s <= cutoff || *s == 0.0 {
            *s = 0.0;
        } else {
            rank += 1;
        }
    }
    orthonormalize(&mut columns, rank, d);
    for col in &mut columns {
        let sign = orientation(col);
        for x in col.iter_mut() {
            *x *= sign;
        }
    }

    let components = Matrix::from_fn(d, k, |i, j| columns[j][i]);
    Ok(Pca {
        mean,
        components,
        singular_values,
        n_samples: n,
    })
}

/// Modified Gram-Schmidt on the first `rank` columns, then replaces the rest
/// with a completion drawn from the standard basis.
fn orthonormalize(columns: &mut [Vec<f64>], rank: usize, d: usize) {
    for j in 0..columns.len() {
        let mut v = if j < rank {
            columns[j].clone()
        } else {
            Vec::new()
        };
        if !v.is_empty() {
            for _ in 0..2 {
                for prev in columns[..j].iter() {
                    let p = dot(prev, &v);
                    for (x, y) in v.iter_mut().zip(prev) {
                        *x -= p * y;
                    }
                }
            }
            let nv = norm(&v);
            if nv > 0.5 {
                v.iter_mut().for_each(|x| *x /= nv);
                columns[j] = v;
                continue;
            }
        }
        columns[j] = completion(&columns[..j], d);
    }
}

fn completion(existing: &[Vec<f64>], d: usize) -> Vec<f64> {
    for axis in 0..d {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        for _ in 0..2 {
            for prev in existing {
                let p = dot(prev, &v);
                for (x, y) in v.iter_mut().zip(prev) {
                    *x -= p * y;
                }
            }
        }
        let nv = norm(&v);
        if nv > 0.5 {
            v.iter_mut().for_each(|x| *x /= nv);
            return v;
        }
    }
    unreachable!("k <= d guarantees a completion direction exists")
}
