//! Small dense 2x2 helpers, a compressed sparse row matrix and an envelope
//! (skyline) Cholesky factorisation.
//!
//! The structured meshes used here number their vertices row by row, so the
//! envelope of every assembled matrix stays within a band of width `n + 2`
//! (twice that for vector problems). The envelope factorisation is exact and
//! cheap at that bandwidth.

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];
pub const ZERO2: Mat2 = [[0.0, 0.0], [0.0, 0.0]];

#[inline]
pub fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

#[inline]
pub fn inv2(m: &Mat2) -> Mat2 {
    let d = det2(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

#[inline]
pub fn transpose2(m: &Mat2) -> Mat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

#[inline]
pub fn mul2(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = ZERO2;
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

#[inline]
pub fn matvec2(a: &Mat2, v: &Vec2) -> Vec2 {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

#[inline]
pub fn sym2(m: &Mat2) -> Mat2 {
    let off = 0.5 * (m[0][1] + m[1][0]);
    [[m[0][0], off], [off, m[1][1]]]
}

#[inline]
pub fn add2(a: &Mat2, b: &Mat2) -> Mat2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

#[inline]
pub fn scale2(s: f64, a: &Mat2) -> Mat2 {
    [[s * a[0][0], s * a[0][1]], [s * a[1][0], s * a[1][1]]]
}

#[inline]
pub fn ddot2(a: &Mat2, b: &Mat2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

#[inline]
pub fn dot2(a: &Vec2, b: &Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Max-norm of the entries.
#[inline]
pub fn max_abs2(m: &Mat2) -> f64 {
    m.iter().flatten().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Square sparse matrix in compressed sparse row format.
///
/// Column indices are sorted within each row and every row stores its
/// diagonal entry, possibly as an explicit zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds the matrix from `(row, col, value)` triplets. Duplicates are
    /// summed in the order they were pushed, so the result does not depend on
    /// anything but the triplet sequence.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        for i in 0..n {
            triplets.push((i, i, 0.0));
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix { n, row_ptr, cols, vals }
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_triplets(n, Vec::new())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn diagonal(d: &[f64]) -> Self {
        Self::from_triplets(d.len(), d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()].iter().copied().zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// `xᵀ A y`.
    pub fn form(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.mul_vec(y))
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.n, other.n);
        let trip = self.triplets().chain(other.triplets().map(|(i, j, v)| (i, j, alpha * v))).collect();
        SparseMatrix::from_triplets(self.n, trip)
    }

    pub fn scaled(&self, alpha: f64) -> SparseMatrix {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.n);
        for (i, di) in d.iter().enumerate() {
            let range = self.row_ptr[i]..self.row_ptr[i + 1];
            let k = self.cols[range.clone()].binary_search(&i).expect("diagonal stored");
            self.vals[range.start + k] += di;
        }
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn symmetry_defect(&self) -> f64 {
        self.triplets().map(|(i, j, v)| (v - self.get(j, i)).abs()).fold(0.0, f64::max)
    }

    /// Principal submatrix on the (sorted) index list `idx`.
    pub fn principal_submatrix(&self, idx: &[usize]) -> SparseMatrix {
        let mut map = vec![usize::MAX; self.n];
        for (k, &i) in idx.iter().enumerate() {
            map[i] = k;
        }
        let mut trip = Vec::new();
        for (k, &i) in idx.iter().enumerate() {
            for (j, v) in self.row(i) {
                if map[j] != usize::MAX {
                    trip.push((k, map[j], v));
                }
            }
        }
        SparseMatrix::from_triplets(idx.len(), trip)
    }

    /// Rows `rows` restricted to columns `cols`, applied to `x` (indexed by
    /// `cols`).
    pub fn block_mul(&self, rows: &[usize], cols: &[usize], x: &[f64]) -> Vec<f64> {
        let mut map = vec![usize::MAX; self.n];
        for (k, &j) in cols.iter().enumerate() {
            map[j] = k;
        }
        rows.iter()
            .map(|&i| self.row(i).filter(|(j, _)| map[*j] != usize::MAX).map(|(j, v)| v * x[map[j]]).sum())
            .collect()
    }
}

/// Envelope Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        let n = a.dim();
        let mut first = vec![0; n];
        for (i, f) in first.iter_mut().enumerate() {
            *f = a.row(i).map(|(j, _)| j).filter(|&j| j <= i).min().unwrap_or(i);
        }
        let mut start = vec![0; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut data = vec![0.0; start[n]];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    data[start[i] + j - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut s = data[start[i] + j - fi];
                let ri = start[i] + lo - fi;
                let rj = start[j] + lo - fj;
                for k in 0..(j - lo) {
                    s -= data[ri + k] * data[rj + k];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                    }
                    data[start[i] + i - fi] = s.sqrt();
                } else {
                    data[start[i] + j - fi] = s / data[start[j] + j - fj];
                }
            }
        }
        Ok(Cholesky { first, start, data })
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            let mut s = y[i];
            for (k, j) in (fi..i).enumerate() {
                s -= row[k] * y[j];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, j) in (fi..i).enumerate() {
                y[j] -= row[k] * yi;
            }
        }
        y
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    Ok(Cholesky::factor(a)?.solve(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseMatrix::from_triplets(n, t)
    }

    #[test]
    fn duplicates_are_summed() {
        let m = SparseMatrix::from_triplets(2, vec![(0, 1, 1.0), (0, 1, 2.5), (1, 0, 3.5)]);
        assert_eq!(m.get(0, 1), 3.5);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.symmetry_defect(), 0.0);
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let a = laplace_1d(7);
        let x: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        let b = a.mul_vec(&x);
        let y = solve_spd(&a, &b).unwrap();
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SparseMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(Cholesky::factor(&a), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    }

    #[test]
    fn submatrix_and_block() {
        let a = laplace_1d(5);
        let s = a.principal_submatrix(&[1, 3, 4]);
        assert_eq!(s.dim(), 3);
        assert_eq!(s.get(1, 2), -1.0);
        assert_eq!(s.get(0, 1), 0.0);
        let y = a.block_mul(&[1, 2], &[0, 3], &[1.0, 2.0]);
        assert_eq!(y, vec![-1.0, -2.0]);
    }

    #[test]
    fn inverse_2x2() {
        let m = [[2.0, 1.0], [0.5, 3.0]];
        let p = mul2(&m, &inv2(&m));
        assert!(max_abs2(&add2(&p, &scale2(-1.0, &IDENTITY))) < 1e-15);
    }
}
