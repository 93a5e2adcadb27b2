//! Dense small-matrix utilities: Kronecker products and powers, the
//! commutation matrix, spectral radius and a discrete Lyapunov solver.
//!
//! Everything is row-major `f64`. Dimensions in this crate stay tiny
//! (at most `p^3` with `p` around 10), so plain dense storage is used
//! throughout and the heavier numerical kernels (eigenvalues, LU) are
//! delegated to `nalgebra`.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    ///
    /// Panics on ragged input; intended for literals and tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn diag(v: &[f64]) -> Self {
        let mut m = Self::zeros(v.len(), v.len());
        for (i, x) in v.iter().enumerate() {
            m[(i, i)] = *x;
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for (i, x) in v.iter().enumerate() {
            self[(i, j)] = *x;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::Shape(format!(
                "cannot apply {}x{} matrix to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn symmetrize(&self) -> Matrix {
        let t = self.transpose();
        self.zip_with(&t, |a, b| 0.5 * (a + b))
            .expect("square matrix")
    }

    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square());
        self.max_abs_diff(&self.transpose())
    }

    pub fn pow(&self, k: usize) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::Shape("power of a non-square matrix".into()));
        }
        let mut out = Matrix::identity(self.rows);
        let mut base = self.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                out = out.matmul(&base)?;
            }
            base = base.matmul(&base)?;
            e >>= 1;
        }
        Ok(out)
    }

    /// Solves `self * X = rhs` by LU with partial pivoting.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        if !self.is_square() || self.rows != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot solve {}x{} system with {}x{} right-hand side",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let lu = self.to_nalgebra().lu();
        let x = lu.solve(&rhs.to_nalgebra()).ok_or(Error::Singular)?;
        let out = Matrix::from_nalgebra(&x);
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        Ok(out)
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Result<Vector> {
        Ok(self.solve(&Matrix::column(rhs))?.into_vec())
    }

    pub fn inverse(&self) -> Result<Matrix> {
        self.solve(&Matrix::identity(self.rows))
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(i, j)] = m[(i, j)];
            }
        }
        out
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn symmetric_eigenvalues(&self) -> Result<Vector> {
        if !self.is_square() {
            return Err(Error::Shape("eigenvalues of a non-square matrix".into()));
        }
        let mut ev: Vector = self
            .symmetrize()
            .to_nalgebra()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        match self.symmetric_eigenvalues() {
            Ok(ev) => ev.first().is_none_or(|&l| l >= -tol),
            Err(_) => false,
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

// Serialized as a list of rows.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for i in 0..self.rows {
            seq.serialize_element(self.row(i))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(deserializer)?;
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Matrix::from_vec(r, c, rows.into_iter().flatten().collect())
            .map_err(serde::de::Error::custom)
    }
}

/// Standard Kronecker product, shape `(ra*rb) x (ca*cb)`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ra, ca, rb, cb) = (a.rows, a.cols, b.rows, b.cols);
    let mut out = Matrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..rb {
                for l in 0..cb {
                    out[(i * rb + k, j * cb + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Kronecker product of two vectors.
pub fn kron_vec(a: &[f64], b: &[f64]) -> Vector {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        out.extend(b.iter().map(|y| x * y));
    }
    out
}

pub fn kron_power(a: &Matrix, alpha: usize) -> Result<Matrix> {
    match alpha {
        1 => Ok(a.clone()),
        2 => Ok(kron(a, a)),
        3 => Ok(kron(&kron(a, a), a)),
        _ => Err(Error::InvalidOrder(alpha)),
    }
}

pub fn kron_vec_power(v: &[f64], alpha: usize) -> Result<Vector> {
    match alpha {
        1 => Ok(v.to_vec()),
        2 => Ok(kron_vec(v, v)),
        3 => Ok(kron_vec(&kron_vec(v, v), v)),
        _ => Err(Error::InvalidOrder(alpha)),
    }
}

/// The `p^2 x p^2` permutation `P` with `u ⊗ v = P (v ⊗ u)` for all `u, v ∈ R^p`.
pub fn commutation_matrix(p: usize) -> Matrix {
    let n = p * p;
    let mut m = Matrix::zeros(n, n);
    for a in 0..p {
        for b in 0..p {
            // (v ⊗ u)[a*p + b] = v_a u_b lands at (u ⊗ v)[b*p + a].
            m[(b * p + a, a * p + b)] = 1.0;
        }
    }
    m
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "spectral radius of a {}x{} matrix",
            m.rows, m.cols
        )));
    }
    if m.rows == 0 {
        return Ok(0.0);
    }
    if m.rows == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let ev = m.to_nalgebra().complex_eigenvalues();
    Ok(ev.iter().fold(0.0, |r, z| r.max(z.norm())))
}

/// Solves the discrete Lyapunov equation `S = V + M S M^T`.
///
/// Uses the vectorized form `(I - M⊗M) vec(S) = vec(V)`, which is
/// nonsingular whenever `ρ(M) < 1`.
pub fn lyapunov_solve(m: &Matrix, v: &Matrix) -> Result<Matrix> {
    if !m.is_square() || !v.is_square() || m.rows != v.rows {
        return Err(Error::Shape(format!(
            "lyapunov_solve needs square M and V of equal size, got {}x{} and {}x{}",
            m.rows, m.cols, v.rows, v.cols
        )));
    }
    let rho = spectral_radius(m)?;
    if rho >= 1.0 {
        return Err(Error::NotSubcritical { rho });
    }
    let p = m.rows;
    let lhs = Matrix::identity(p * p).sub(&kron(m, m))?;
    let s = lhs.solve_vec(v.as_slice())?;
    Ok(Matrix::from_vec(p, p, s)?.symmetrize())
}
