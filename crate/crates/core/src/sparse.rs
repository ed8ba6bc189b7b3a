//! Compressed sparse row storage and a preconditioned conjugate-gradient solver.
//!
//! All matrices produced by assembly are square and symmetric. Sums are
//! accumulated row-major in ascending column order so that repeated runs are
//! bit-reproducible.

use std::io::Write;

use crate::error::{Error, Result};

/// Square or rectangular matrix in canonical CSR form (sorted, unique columns per row).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

/// Coordinate-format accumulator. Duplicate entries are summed in insertion order
/// when compressed.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n_rows: usize, n_cols: usize, capacity: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            entries: Vec::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        self.entries.push((row, col, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Compress into CSR. Stable sort keeps duplicate summation order deterministic.
    pub fn build(mut self) -> SparseMatrix {
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0usize; self.n_rows + 1];
        let mut col_indices = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(c);
                values.push(v);
                row_offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.n_rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }
}

impl SparseMatrix {
    /// Build from raw CSR arrays, checking the canonical-form invariants.
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 {
            return Err(Error::DimensionMismatch {
                context: "row_offsets",
                expected: n_rows + 1,
                found: row_offsets.len(),
            });
        }
        if col_indices.len() != values.len() || *row_offsets.last().unwrap() != values.len() {
            return Err(Error::Invalid(
                "column and value arrays disagree with row offsets".into(),
            ));
        }
        for i in 0..n_rows {
            if row_offsets[i] > row_offsets[i + 1] {
                return Err(Error::Invalid(format!("row offsets decrease at row {i}")));
            }
            let cols = &col_indices[row_offsets[i]..row_offsets[i + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Invalid(format!("row {i} columns not strictly increasing")));
            }
            if cols.iter().any(|&c| c >= n_cols) {
                return Err(Error::Invalid(format!("row {i} has a column out of range")));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    /// Dense row-major input; zeros are dropped.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut b = TripletBuilder::new(n_rows, n_cols);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n_cols, "ragged dense input");
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    b.push(i, j, v);
                }
            }
        }
        b.build()
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

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterate the stored `(col, value)` pairs of a row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        match self.col_indices[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sum of all stored entries.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `a * self + b * other`, union of sparsity patterns.
    pub fn linear_combination(&self, a: f64, other: &SparseMatrix, b: f64) -> Result<Self> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(Error::DimensionMismatch {
                context: "linear_combination",
                expected: self.n_rows,
                found: other.n_rows,
            });
        }
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        let mut cols = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut vals = Vec::with_capacity(self.nnz().max(other.nnz()));
        row_offsets.push(0);
        for i in 0..self.n_rows {
            let mut x = self.row(i).peekable();
            let mut y = other.row(i).peekable();
            loop {
                match (x.peek().copied(), y.peek().copied()) {
                    (Some((cx, vx)), Some((cy, vy))) => {
                        if cx == cy {
                            cols.push(cx);
                            vals.push(a * vx + b * vy);
                            x.next();
                            y.next();
                        } else if cx < cy {
                            cols.push(cx);
                            vals.push(a * vx);
                            x.next();
                        } else {
                            cols.push(cy);
                            vals.push(b * vy);
                            y.next();
                        }
                    }
                    (Some((cx, vx)), None) => {
                        cols.push(cx);
                        vals.push(a * vx);
                        x.next();
                    }
                    (None, Some((cy, vy))) => {
                        cols.push(cy);
                        vals.push(b * vy);
                        y.next();
                    }
                    (None, None) => break,
                }
            }
            row_offsets.push(cols.len());
        }
        Ok(Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_offsets,
            col_indices: cols,
            values: vals,
        })
    }

    /// Copy of `self` with `diag` added on the main diagonal. The diagonal must
    /// already be present in the pattern.
    pub fn with_added_diagonal(&self, diag: &[f64]) -> Result<Self> {
        if diag.len() != self.n_rows {
            return Err(Error::DimensionMismatch {
                context: "with_added_diagonal",
                expected: self.n_rows,
                found: diag.len(),
            });
        }
        let mut out = self.clone();
        for (i, &d) in diag.iter().enumerate() {
            let range = out.row_offsets[i]..out.row_offsets[i + 1];
            match out.col_indices[range.clone()].binary_search(&i) {
                Ok(k) => out.values[range.start + k] += d,
                Err(_) if d == 0.0 => {}
                Err(_) => {
                    return Err(Error::Invalid(format!(
                        "row {i} has no stored diagonal entry"
                    )))
                }
            }
        }
        Ok(out)
    }

    /// True when every stored `(i, j, v)` has a partner `(j, i, v')` with
    /// `|v - v'| <= tol * max|v|`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        let bound = tol * self.max_abs();
        (0..self.n_rows).all(|i| {
            self.row(i)
                .all(|(j, v)| (v - self.get(j, i)).abs() <= bound)
        })
    }

    /// `y = A x` into a caller-provided buffer.
    pub fn spmv_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.n_cols {
            return Err(Error::DimensionMismatch {
                context: "spmv input",
                expected: self.n_cols,
                found: x.len(),
            });
        }
        if y.len() != self.n_rows {
            return Err(Error::DimensionMismatch {
                context: "spmv output",
                expected: self.n_rows,
                found: y.len(),
            });
        }
        self.spmv_unchecked(x, y);
        Ok(())
    }

    fn spmv_unchecked(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (s, e) = (self.row_offsets[i], self.row_offsets[i + 1]);
            let mut acc = 0.0;
            for k in s..e {
                acc += self.values[k] * x[self.col_indices[k]];
            }
            *yi = acc;
        }
    }

    /// `x^T A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64> {
        let y = spmv(self, x)?;
        Ok(dot(x, &y))
    }

    /// MatrixMarket coordinate dump (1-based indices, general real).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }
}

pub fn spmv(a: &SparseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = vec![0.0; a.n_rows()];
    a.spmv_into(x, &mut y)?;
    Ok(y)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    None,
    #[default]
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Relative residual target `||Ax - b|| <= tolerance * ||b||`.
    pub tolerance: f64,
    /// Defaults to `10 n` when `None`.
    pub max_iterations: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: None,
            preconditioner: Preconditioner::Jacobi,
        }
    }
}

impl SolveOptions {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Invalid("solver tolerance must be positive".into()));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::Invalid("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final relative residual `||b - Ax|| / ||b||` (0 for a zero right-hand side).
    pub residual: f64,
}

/// Solve the SPD system `A x = b` from a zero initial guess.
pub fn cg_solve(a: &SparseMatrix, b: &[f64], opts: &SolveOptions) -> Result<CgSolution> {
    cg_solve_from(a, b, vec![0.0; b.len()], opts)
}

/// Preconditioned conjugate gradients starting from `x0`.
pub fn cg_solve_from(
    a: &SparseMatrix,
    b: &[f64],
    x0: Vec<f64>,
    opts: &SolveOptions,
) -> Result<CgSolution> {
    opts.validate()?;
    let n = a.n_rows();
    if a.n_cols() != n {
        return Err(Error::DimensionMismatch {
            context: "cg_solve matrix (square)",
            expected: n,
            found: a.n_cols(),
        });
    }
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            context: "cg_solve right-hand side",
            expected: n,
            found: b.len(),
        });
    }
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            context: "cg_solve initial guess",
            expected: n,
            found: x0.len(),
        });
    }

    let inv_diag = match opts.preconditioner {
        Preconditioner::None => None,
        Preconditioner::Jacobi => {
            let d = a.diagonal();
            if let Some(row) = d.iter().position(|&v| v == 0.0) {
                return Err(Error::ZeroDiagonal { row });
            }
            Some(d.iter().map(|v| 1.0 / v).collect::<Vec<_>>())
        }
    };

    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let max_iter = opts.max_iterations.unwrap_or(10 * n.max(1));
    let target = opts.tolerance * b_norm;

    let mut x = x0;
    let mut ax = vec![0.0; n];
    a.spmv_unchecked(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut r_norm = norm2(&r);
    if r_norm <= target {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual: r_norm / b_norm,
        });
    }

    let precondition = |r: &[f64], z: &mut [f64]| match &inv_diag {
        Some(d) => z.iter_mut().zip(r.iter().zip(d)).for_each(|(zi, (ri, di))| *zi = ri * di),
        None => z.copy_from_slice(r),
    };

    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut best = (r_norm, x.clone());

    for it in 1..=max_iter {
        a.spmv_unchecked(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            // Breakdown: A is not positive definite along p (or p vanished).
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        r_norm = norm2(&r);
        if r_norm <= target {
            return Ok(CgSolution {
                x,
                iterations: it,
                residual: r_norm / b_norm,
            });
        }
        if r_norm < best.0 {
            best = (r_norm, x.clone());
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        if it == max_iter {
            break;
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: best.0 / b_norm,
        best: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two() -> SparseMatrix {
        SparseMatrix::from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]])
    }

    #[test]
    fn spmv_identity() {
        let y = spmv(&SparseMatrix::identity(2), &[3.0, -1.0]).unwrap();
        assert_eq!(y, vec![3.0, -1.0]);
    }

    #[test]
    fn spmv_small() {
        let a = two_by_two();
        assert_eq!(spmv(&a, &[1.0, 0.0]).unwrap(), vec![4.0, 1.0]);
        assert_eq!(spmv(&a, &[1.0, 2.0]).unwrap(), vec![6.0, 7.0]);
    }

    #[test]
    fn spmv_dimension_mismatch() {
        let err = spmv(&two_by_two(), &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, found: 3, .. }));
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let mut b = TripletBuilder::new(2, 3);
        b.push(1, 2, 1.0);
        b.push(0, 1, 2.0);
        b.push(1, 0, 3.0);
        b.push(0, 1, 0.5);
        let a = b.build();
        assert_eq!(a.row_offsets(), &[0, 1, 3]);
        assert_eq!(a.col_indices(), &[1, 0, 2]);
        assert_eq!(a.values(), &[2.5, 3.0, 1.0]);
    }

    #[test]
    fn from_csr_rejects_unsorted_columns() {
        let err = SparseMatrix::from_csr(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]);
        assert!(err.is_err());
    }

    #[test]
    fn cg_identity_single_iteration() {
        let b = vec![1.5, -2.0, 0.25];
        let sol = cg_solve(&SparseMatrix::identity(3), &b, &SolveOptions::default()).unwrap();
        assert_eq!(sol.x, b);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn cg_two_by_two() {
        let sol = cg_solve(&two_by_two(), &[1.0, 2.0], &SolveOptions::default()).unwrap();
        assert!((sol.x[0] - 1.0 / 11.0).abs() < 1e-10);
        assert!((sol.x[1] - 7.0 / 11.0).abs() < 1e-10);
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn cg_zero_rhs() {
        let sol = cg_solve(&two_by_two(), &[0.0, 0.0], &SolveOptions::default()).unwrap();
        assert_eq!(sol.x, vec![0.0, 0.0]);
        assert_eq!(sol.residual, 0.0);
    }

    #[test]
    fn cg_zero_diagonal_with_jacobi() {
        let a = SparseMatrix::from_dense(&[vec![0.0, 1.0], vec![1.0, 2.0]]);
        let err = cg_solve(&a, &[1.0, 1.0], &SolveOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ZeroDiagonal { row: 0 }));
    }

    #[test]
    fn cg_reports_best_iterate_on_failure() {
        let n = 50;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i: usize| {
                (0..n)
                    .map(|j| match i.abs_diff(j) {
                        0 => 2.0,
                        1 => -1.0,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        let a = SparseMatrix::from_dense(&rows);
        let opts = SolveOptions {
            tolerance: 1e-14,
            max_iterations: Some(3),
            preconditioner: Preconditioner::None,
        };
        match cg_solve(&a, &vec![1.0; n], &opts).unwrap_err() {
            Error::NotConverged { iterations, residual, best } => {
                assert_eq!(iterations, 3);
                assert!(residual.is_finite() && residual > 1e-14);
                assert_eq!(best.len(), n);
                let r: Vec<f64> = spmv(&a, &best).unwrap().iter().map(|v| v - 1.0).collect();
                assert!((norm2(&r) / (n as f64).sqrt() - residual).abs() < 1e-12);
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn linear_combination_merges_patterns() {
        let a = SparseMatrix::from_dense(&[vec![1.0, 0.0], vec![2.0, 3.0]]);
        let b = SparseMatrix::from_dense(&[vec![0.0, 5.0], vec![1.0, 0.0]]);
        let c = a.linear_combination(2.0, &b, -1.0).unwrap();
        assert_eq!(c.get(0, 0), 2.0);
        assert_eq!(c.get(0, 1), -5.0);
        assert_eq!(c.get(1, 0), 3.0);
        assert_eq!(c.get(1, 1), 6.0);
    }

    #[test]
    fn matrix_market_dump() {
        let mut out = Vec::new();
        two_by_two().write_matrix_market(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real general\n2 2 4\n"));
        assert_eq!(text.lines().count(), 6);
    }

    /// Diagonally dominant random SPD matrix with a few off-diagonal entries per row.
    fn random_spd(n: usize, seeds: &[(usize, usize, f64)]) -> SparseMatrix {
        let mut dense = vec![vec![0.0; n]; n];
        for &(i, j, v) in seeds {
            let (i, j) = (i % n, j % n);
            if i != j {
                dense[i][j] += v;
                dense[j][i] += v;
            }
        }
        for (i, row) in dense.iter_mut().enumerate() {
            let off: f64 = row.iter().map(|v| v.abs()).sum();
            row[i] = off + 1.0;
        }
        SparseMatrix::from_dense(&dense)
    }

    fn dense_solve(a: &SparseMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.n_rows();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a.get(i, j));
        let rhs = nalgebra::DVector::from_column_slice(b);
        m.lu().solve(&rhs).unwrap().iter().copied().collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cg_matches_dense_oracle(
            n in 2usize..200,
            seeds in proptest::collection::vec((0usize..1000, 0usize..1000, -1.0f64..1.0), 1..600),
            b_seed in proptest::collection::vec(-10.0f64..10.0, 200),
        ) {
            let a = random_spd(n, &seeds);
            prop_assert!(a.is_symmetric(1e-12));
            let b = &b_seed[..n];
            let sol = cg_solve(&a, b, &SolveOptions::default().with_tolerance(1e-12)).unwrap();
            let exact = dense_solve(&a, b);
            let err: f64 = sol.x.iter().zip(&exact).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-8 * norm2(&exact).max(1e-300));
            prop_assert!(sol.iterations <= 3 * n);
        }
    }
}
