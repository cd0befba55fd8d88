//! Small dense row-major matrices and the determinant routines used by the
//! convexity penalty.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            assert_eq!(r.len(), m, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: n, cols: m, data }
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

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `vᵀ M w`.
    pub fn bilinear(&self, v: &[f64], w: &[f64]) -> f64 {
        assert_eq!(v.len(), self.rows);
        assert_eq!(w.len(), self.cols);
        (0..self.rows).map(|r| v[r] * dot(self.row(r), w)).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        assert!(self.is_square());
        let mut s = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                s[(r, c)] = 0.5 * (self[(r, c)] + self[(c, r)]);
            }
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Leading principal `k × k` submatrix.
    pub fn leading(&self, k: usize) -> Self {
        let mut m = Self::zeros(k, k);
        for r in 0..k {
            m.row_mut(r).copy_from_slice(&self.row(r)[..k]);
        }
        m
    }

    fn minor(&self, skip_r: usize, skip_c: usize) -> Self {
        let n = self.rows;
        let mut data = Vec::with_capacity((n - 1) * (n - 1));
        for r in (0..n).filter(|&r| r != skip_r) {
            for c in (0..n).filter(|&c| c != skip_c) {
                data.push(self[(r, c)]);
            }
        }
        Self::from_row_major(n - 1, n - 1, data)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Determinant of a square matrix.
///
/// Sizes up to 3 use the closed-form expansions; larger matrices go through
/// LU factorization with partial pivoting.
pub fn determinant(m: &Matrix) -> f64 {
    assert!(m.is_square(), "determinant of a non-square matrix");
    match m.rows() {
        0 => 1.0,
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        _ => lu_determinant(m),
    }
}

fn lu_determinant(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut a = m.clone();
    let mut det = 1.0;
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs()))
            .unwrap_or(k);
        if a[(pivot, k)] == 0.0 {
            return 0.0;
        }
        if pivot != k {
            for c in 0..n {
                let tmp = a[(k, c)];
                a[(k, c)] = a[(pivot, c)];
                a[(pivot, c)] = tmp;
            }
            det = -det;
        }
        let p = a[(k, k)];
        det *= p;
        for i in k + 1..n {
            let f = a[(i, k)] / p;
            if f != 0.0 {
                for c in k + 1..n {
                    a[(i, c)] -= f * a[(k, c)];
                }
            }
        }
    }
    det
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting; `None`
/// for a (numerically) singular `A`.
pub fn solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    assert!(a.is_square() && a.rows() == b.len());
    let n = b.len();
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.max_abs();
    for k in 0..n {
        let pivot = (k..n).max_by(|&i, &j| m[(i, k)].abs().total_cmp(&m[(j, k)].abs()))?;
        if m[(pivot, k)].abs() <= 1e-14 * scale {
            return None;
        }
        if pivot != k {
            for c in 0..n {
                let tmp = m[(k, c)];
                m[(k, c)] = m[(pivot, c)];
                m[(pivot, c)] = tmp;
            }
            x.swap(k, pivot);
        }
        for i in k + 1..n {
            let f = m[(i, k)] / m[(k, k)];
            for c in k..n {
                m[(i, c)] -= f * m[(k, c)];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let tail: f64 = (k + 1..n).map(|c| m[(k, c)] * x[c]).sum();
        x[k] = (x[k] - tail) / m[(k, k)];
    }
    Some(x)
}

/// Cofactor matrix `C` with `C[i][j] = (-1)^(i+j) det(minor_ij)`; this is the
/// gradient of `det(M)` with respect to the entries of `M`, and it stays well
/// defined when `M` is singular.
pub fn cofactor_matrix(m: &Matrix) -> Matrix {
    assert!(m.is_square());
    let n = m.rows();
    if n == 1 {
        return Matrix::from_row_major(1, 1, vec![1.0]);
    }
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            c[(i, j)] = sign * determinant(&m.minor(i, j));
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cofactor_det(m: &Matrix) -> f64 {
        let n = m.rows();
        if n == 1 {
            return m[(0, 0)];
        }
        (0..n)
            .map(|j| {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[(0, j)] * cofactor_det(&m.minor(0, j))
            })
            .sum()
    }

    #[test]
    fn small_determinants() {
        assert_eq!(determinant(&Matrix::identity(3)), 1.0);
        assert_eq!(determinant(&Matrix::from_diagonal(&[1.0, -1.0])), -1.0);
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]);
        assert_eq!(determinant(&m), 2.0);
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = Matrix::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, -1.0, 0.5], vec![3.0, 0.0, -2.0]]);
        let x = [1.5, -0.25, 2.0];
        let b = a.mul_vec(&x);
        let got = solve(&a, &b).unwrap();
        for (g, e) in got.iter().zip(x) {
            assert!((g - e).abs() < 1e-12);
        }
        let singular = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(solve(&singular, &[1.0, 2.0]).is_none());
    }

    #[test]
    fn lu_matches_cofactor_expansion() {
        let m = Matrix::from_rows(&[
            vec![0.0, 2.0, -1.0, 3.0, 0.5],
            vec![1.5, -0.3, 2.2, 0.0, 1.0],
            vec![-2.0, 1.0, 0.7, 1.1, -0.4],
            vec![0.3, 0.9, -1.3, 2.0, 0.0],
            vec![1.0, 0.0, 0.4, -0.8, 2.5],
        ]);
        let lu = determinant(&m);
        let oracle = cofactor_det(&m);
        assert!((lu - oracle).abs() < 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn singular_lu_is_zero() {
        let m = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0],
            vec![2.0, 4.0, 6.0, 8.0],
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0, 0.0],
        ]);
        assert!(determinant(&m).abs() < 1e-12);
    }

    #[test]
    fn cofactor_is_determinant_gradient() {
        let m = Matrix::from_rows(&[
            vec![1.0, 0.2, -0.4, 0.1],
            vec![0.3, 2.0, 0.5, -0.2],
            vec![-0.6, 0.1, 1.5, 0.3],
            vec![0.2, -0.3, 0.4, 0.9],
        ]);
        let c = cofactor_matrix(&m);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..4 {
                let mut p = m.clone();
                p[(i, j)] += h;
                let mut q = m.clone();
                q[(i, j)] -= h;
                let fd = (determinant(&p) - determinant(&q)) / (2.0 * h);
                assert!((fd - c[(i, j)]).abs() < 1e-8, "({i},{j}) {fd} vs {}", c[(i, j)]);
            }
        }
    }
}
