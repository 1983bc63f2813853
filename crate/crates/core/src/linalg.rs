//! Sparse and dense linear algebra used throughout the reconstruction code.
//!
//! Matrices are stored in compressed sparse row (CSR) form. Products with the
//! transpose are computed by scattering over the rows, so a matrix is only ever
//! stored in one orientation. Linear solves go through a dense LU
//! factorization of `A + ridge*I`, which is fast enough for the image sizes
//! this crate targets (a few thousand voxels).

use faer::linalg::solvers::Solve;
use faer::Mat;

use crate::error::{check_len, Error, Result};

/// Relative residual a linear solve must reach to be accepted.
pub const SOLVE_TOLERANCE: f64 = 1e-8;

/// Default floor used for EM-style elementwise divisions.
pub const DEFAULT_DIV_FLOOR: f64 = 1e-12;

#[cfg(feature = "parallel")]
const PAR_ROW_THRESHOLD: usize = 4096;

/// Row-compressed sparse matrix of `f64`.
///
/// Column indices are strictly increasing within each row and every stored
/// value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from raw CSR arrays, validating every invariant.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        indptr: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != n_rows + 1 {
            return Err(Error::MalformedMatrix(format!(
                "indptr has length {}, expected {}",
                indptr.len(),
                n_rows + 1
            )));
        }
        if indptr[0] != 0 || *indptr.last().unwrap() != indices.len() {
            return Err(Error::MalformedMatrix("indptr does not span the index array".into()));
        }
        if indices.len() != values.len() {
            return Err(Error::MalformedMatrix("index/value length mismatch".into()));
        }
        if n_cols > u32::MAX as usize {
            return Err(Error::MalformedMatrix("too many columns for 32-bit indices".into()));
        }
        for i in 0..n_rows {
            let (lo, hi) = (indptr[i], indptr[i + 1]);
            if lo > hi {
                return Err(Error::MalformedMatrix(format!("row {i}: decreasing indptr")));
            }
            let row = &indices[lo..hi];
            if row.iter().any(|&c| c as usize >= n_cols) {
                return Err(Error::MalformedMatrix(format!("row {i}: column out of bounds")));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::MalformedMatrix(format!(
                    "row {i}: columns not strictly increasing"
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedMatrix("non-finite stored value".into()));
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut b = RowBuilder::new(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            if d != 0.0 {
                b.push(i, d);
            }
            b.finish_row();
        }
        b.build()
    }

    /// Builds a matrix from a row-major dense array, dropping exact zeros.
    pub fn from_dense(n_rows: usize, n_cols: usize, data: &[f64]) -> Result<Self> {
        check_len("from_dense", n_rows * n_cols, data.len())?;
        let mut b = RowBuilder::new(n_rows, n_cols);
        for row in data.chunks(n_cols.max(1)).take(n_rows) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    b.push(j, v);
                }
            }
            b.finish_row();
        }
        if n_cols == 0 {
            for _ in 0..n_rows {
                b.finish_row();
            }
        }
        let m = b.build();
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed
    /// and entries that end up exactly zero are dropped.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_rows];
        for (i, j, v) in triplets {
            if i >= n_rows || j >= n_cols {
                return Err(Error::MalformedMatrix(format!(
                    "triplet ({i}, {j}) outside {n_rows}x{n_cols}"
                )));
            }
            rows[i].push((j as u32, v));
        }
        let mut b = RowBuilder::new(n_rows, n_cols);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let col = row[k].0;
                let mut sum = 0.0;
                while k < row.len() && row[k].0 == col {
                    sum += row[k].1;
                    k += 1;
                }
                if sum != 0.0 {
                    b.push(col as usize, sum);
                }
            }
            b.finish_row();
        }
        let m = b.build();
        m.check_finite()?;
        Ok(m)
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::MalformedMatrix("non-finite stored value".into()))
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_square(&self) -> bool {
        self.n_rows == self.n_cols
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values stored in row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out[i * self.n_cols + c as usize] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for j in 0..self.n_cols {
            counts[j + 1] += counts[j];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let dst = next[c as usize];
                indices[dst] = i as u32;
                values[dst] = v;
                next[c as usize] += 1;
            }
        }
        Self {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            indptr,
            indices,
            values,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Divides every row by its sum. Fails if a row sums to zero.
    pub fn normalize_rows(&mut self) -> Result<()> {
        for i in 0..self.n_rows {
            let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
            let s: f64 = self.values[lo..hi].iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::Degenerate(format!("row {i} has zero sum")));
            }
            for v in &mut self.values[lo..hi] {
                *v /= s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// Returns `self + alpha * I` (square matrices only).
    pub fn add_identity(&self, alpha: f64) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                op: "add_identity",
                rows: self.n_rows,
                cols: self.n_cols,
            });
        }
        let diag = Self::diagonal(&vec![alpha; self.n_rows]);
        add(self, &diag, 1.0)
    }

    /// Drops stored entries whose magnitude is below `threshold`.
    pub fn pruned(&self, threshold: f64) -> Self {
        let mut b = RowBuilder::new(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                if v.abs() >= threshold && v != 0.0 {
                    b.push(c as usize, v);
                }
            }
            b.finish_row();
        }
        b.build()
    }

    /// `out = self * v`. Panics on length mismatch; see [`matvec`] for the
    /// checked variant.
    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.n_cols);
        assert_eq!(out.len(), self.n_rows);
        let row_dot = |i: usize| -> f64 {
            let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.values[k] * v[self.indices[k] as usize];
            }
            acc
        };
        #[cfg(feature = "parallel")]
        if self.n_rows >= PAR_ROW_THRESHOLD && rayon::current_num_threads() > 1 {
            use rayon::prelude::*;
            out.par_iter_mut()
                .enumerate()
                .for_each(|(i, o)| *o = row_dot(i));
            return;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = row_dot(i);
        }
    }

    /// `out = self^T * v`, computed by scattering rows.
    pub fn tmul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.n_rows);
        assert_eq!(out.len(), self.n_cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.n_rows {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
            for k in lo..hi {
                out[self.indices[k] as usize] += self.values[k] * vi;
            }
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    pub fn tmul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        self.tmul_vec_into(v, &mut out);
        out
    }

    fn to_faer(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(i, c as usize)] = v;
            }
        }
        m
    }

    fn from_faer(m: &Mat<f64>, threshold: f64) -> Self {
        let mut b = RowBuilder::new(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 && v.abs() >= threshold {
                    b.push(j, v);
                }
            }
            b.finish_row();
        }
        b.build()
    }
}

/// Incremental CSR assembly; callers push strictly increasing columns per row.
pub(crate) struct RowBuilder {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl RowBuilder {
    pub(crate) fn new(n_rows: usize, n_cols: usize) -> Self {
        let mut indptr = Vec::with_capacity(n_rows + 1);
        indptr.push(0);
        Self {
            n_rows,
            n_cols,
            indptr,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, col: usize, value: f64) {
        debug_assert!(col < self.n_cols);
        self.indices.push(col as u32);
        self.values.push(value);
    }

    pub(crate) fn finish_row(&mut self) {
        self.indptr.push(self.indices.len());
    }

    pub(crate) fn build(self) -> SparseMatrix {
        assert_eq!(self.indptr.len(), self.n_rows + 1, "unfinished rows");
        SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            indptr: self.indptr,
            indices: self.indices,
            values: self.values,
        }
    }
}

pub fn matvec(a: &SparseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    check_len("matvec", a.n_cols, v.len())?;
    Ok(a.mul_vec(v))
}

pub fn matvec_transpose(a: &SparseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    check_len("matvec_transpose", a.n_rows, v.len())?;
    Ok(a.tmul_vec(v))
}

/// Sparse-sparse product `A * B`. Entries that cancel to exactly zero are
/// dropped.
pub fn spmm(a: &SparseMatrix, b: &SparseMatrix) -> Result<SparseMatrix> {
    spmm_pruned(a, b, 0.0)
}

/// Sparse-sparse product dropping entries with magnitude below `threshold`.
pub fn spmm_pruned(a: &SparseMatrix, b: &SparseMatrix, threshold: f64) -> Result<SparseMatrix> {
    check_len("spmm", a.n_cols, b.n_rows)?;
    let n = b.n_cols;
    let mut acc = vec![0.0; n];
    let mut seen = vec![false; n];
    let mut touched: Vec<u32> = Vec::new();
    let mut out = RowBuilder::new(a.n_rows, n);
    for i in 0..a.n_rows {
        let (acols, avals) = a.row(i);
        for (&k, &aik) in acols.iter().zip(avals) {
            let (bcols, bvals) = b.row(k as usize);
            for (&j, &bkj) in bcols.iter().zip(bvals) {
                let j = j as usize;
                if !seen[j] {
                    seen[j] = true;
                    touched.push(j as u32);
                }
                acc[j] += aik * bkj;
            }
        }
        touched.sort_unstable();
        for &j in &touched {
            let j = j as usize;
            let v = acc[j];
            if v != 0.0 && v.abs() >= threshold {
                out.push(j, v);
            }
            acc[j] = 0.0;
            seen[j] = false;
        }
        touched.clear();
        out.finish_row();
    }
    Ok(out.build())
}

/// `A + alpha * B` for equally shaped matrices.
pub fn add(a: &SparseMatrix, b: &SparseMatrix, alpha: f64) -> Result<SparseMatrix> {
    check_len("add (rows)", a.n_rows, b.n_rows)?;
    check_len("add (cols)", a.n_cols, b.n_cols)?;
    let mut out = RowBuilder::new(a.n_rows, a.n_cols);
    for i in 0..a.n_rows {
        let (ac, av) = a.row(i);
        let (bc, bv) = b.row(i);
        let (mut p, mut q) = (0, 0);
        while p < ac.len() || q < bc.len() {
            let (col, v) = if q >= bc.len() || (p < ac.len() && ac[p] < bc[q]) {
                p += 1;
                (ac[p - 1], av[p - 1])
            } else if p >= ac.len() || bc[q] < ac[p] {
                q += 1;
                (bc[q - 1], alpha * bv[q - 1])
            } else {
                p += 1;
                q += 1;
                (ac[p - 1], av[p - 1] + alpha * bv[q - 1])
            };
            if v != 0.0 {
                out.push(col as usize, v);
            }
        }
        out.finish_row();
    }
    Ok(out.build())
}

/// Right-hand side of a linear solve.
#[derive(Debug, Clone, Copy)]
pub enum Rhs<'a> {
    Vector(&'a [f64]),
    Matrix(&'a SparseMatrix),
}

/// Result of [`solve_sparse`], shaped like its right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub enum Solution {
    Vector(Vec<f64>),
    Matrix(SparseMatrix),
}

impl Solution {
    pub fn into_vector(self) -> Option<Vec<f64>> {
        match self {
            Solution::Vector(v) => Some(v),
            Solution::Matrix(_) => None,
        }
    }

    pub fn into_matrix(self) -> Option<SparseMatrix> {
        match self {
            Solution::Matrix(m) => Some(m),
            Solution::Vector(_) => None,
        }
    }
}

/// LU factorization (partial pivoting) of `A + ridge*I`, kept together with
/// the sparse operator for residual checks.
pub struct DenseLu<'a> {
    a: &'a SparseMatrix,
    ridge: f64,
    dense: Mat<f64>,
    lu: faer::linalg::solvers::PartialPivLu<f64>,
}

impl<'a> DenseLu<'a> {
    pub fn factor(a: &'a SparseMatrix, ridge: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                op: "solve_sparse",
                rows: a.n_rows,
                cols: a.n_cols,
            });
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::InvalidParameter(format!("ridge must be >= 0, got {ridge}")));
        }
        let mut dense = a.to_faer();
        for i in 0..a.n_rows {
            dense[(i, i)] += ridge;
        }
        let lu = dense.partial_piv_lu();
        Ok(Self { a, ridge, dense, lu })
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    fn shifted_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.a.mul_vec(x);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += self.ridge * xi;
        }
        y
    }

    /// Solves for a single vector, with one step of iterative refinement.
    pub fn solve_vector(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("solve_sparse", self.a.n_rows, b.len())?;
        let b_norm = norm2(b);
        if b_norm == 0.0 {
            return Ok(vec![0.0; b.len()]);
        }
        let mut x = self.lu_solve(b);
        let mut residual = self.residual_vec(&x, b);
        if norm2(&residual) / b_norm > SOLVE_TOLERANCE * 1e-3 {
            let dx = self.lu_solve(&residual);
            x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
            residual = self.residual_vec(&x, b);
        }
        let rel = norm2(&residual) / b_norm;
        if !(rel <= SOLVE_TOLERANCE) {
            return Err(Error::NotConverged {
                op: "solve_sparse",
                residual: if rel.is_nan() { f64::INFINITY } else { rel },
            });
        }
        Ok(x)
    }

    fn lu_solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }

    fn residual_vec(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        let ax = self.shifted_mul(x);
        b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
    }

    /// Solves for every column of a sparse right-hand side. Returns the dense
    /// solution and the dense residual `B - (A + ridge I) X`.
    pub fn solve_columns(&self, b: &SparseMatrix) -> Result<ColumnSolve> {
        check_len("solve_sparse", self.a.n_rows, b.n_rows)?;
        let b_dense = b.to_faer();
        let b_norm = b.frobenius_norm();
        if b_norm == 0.0 {
            return Ok(ColumnSolve {
                x: Mat::zeros(b.n_rows, b.n_cols),
                residual: Mat::zeros(b.n_rows, b.n_cols),
                b_norm,
            });
        }
        let mut x = self.lu.solve(&b_dense);
        let mut r = &b_dense - &self.dense * &x;
        let rel = r.norm_l2() / b_norm;
        if rel > SOLVE_TOLERANCE * 1e-3 && rel.is_finite() {
            x += self.lu.solve(&r);
            r = &b_dense - &self.dense * &x;
        }
        let rel = r.norm_l2() / b_norm;
        if !(rel <= SOLVE_TOLERANCE) {
            return Err(Error::NotConverged {
                op: "solve_sparse",
                residual: if rel.is_nan() { f64::INFINITY } else { rel },
            });
        }
        Ok(ColumnSolve { x, residual: r, b_norm })
    }

    /// Solves for a sparse right-hand side and returns a sparse solution.
    pub fn solve_matrix(&self, b: &SparseMatrix) -> Result<SparseMatrix> {
        Ok(self.solve_columns(b)?.sparse_solution())
    }
}

/// Dense output of [`DenseLu::solve_columns`].
pub struct ColumnSolve {
    pub x: Mat<f64>,
    /// `B - (A + ridge I) X`
    pub residual: Mat<f64>,
    pub b_norm: f64,
}

impl ColumnSolve {
    /// Sparse copy of the solution; entries below `1e-14 * max|X|` are dropped.
    pub fn sparse_solution(&self) -> SparseMatrix {
        let mut max = 0.0f64;
        for j in 0..self.x.ncols() {
            for &v in self.x.col(j).iter() {
                max = max.max(v.abs());
            }
        }
        SparseMatrix::from_faer(&self.x, max * 1e-14)
    }
}

/// Solves `(A + ridge*I) X = B`.
///
/// The relative residual `|(A + ridge I) X - B|_F / |B|_F` must reach
/// [`SOLVE_TOLERANCE`]; otherwise `Error::NotConverged` reports it.
pub fn solve_sparse(a: &SparseMatrix, rhs: Rhs<'_>, ridge: f64) -> Result<Solution> {
    let lu = DenseLu::factor(a, ridge)?;
    match rhs {
        Rhs::Vector(b) => lu.solve_vector(b).map(Solution::Vector),
        Rhs::Matrix(b) => lu.solve_matrix(b).map(Solution::Matrix),
    }
}

pub fn hadamard(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_len("hadamard", u.len(), v.len())?;
    Ok(u.iter().zip(v).map(|(a, b)| a * b).collect())
}

/// Elementwise `u / max(v, floor)`.
pub fn hadamard_div(u: &[f64], v: &[f64], floor: f64) -> Result<Vec<f64>> {
    check_len("hadamard_div", u.len(), v.len())?;
    if !(floor > 0.0) {
        return Err(Error::InvalidParameter(format!("division floor must be > 0, got {floor}")));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a / b.max(floor)).collect())
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm2(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}
