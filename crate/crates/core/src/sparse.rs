//! Compressed-column sparse matrices and an envelope Cholesky factorization
//! with reverse Cuthill–McKee ordering.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
}

/// Compressed sparse column matrix. Row indices within each column are
/// strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    rows: usize,
    cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Assembles from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|t| (t.1, t.0));
        let mut col_ptr = vec![0usize; cols + 1];
        let mut row_idx: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(
                r < rows && c < cols,
                "triplet ({r}, {c}) outside {rows}x{cols}"
            );
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..cols {
            col_ptr[c + 1] += col_ptr[c];
        }
        Self {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates `(row, value)` over the stored entries of one column.
    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.col_ptr[c]..self.col_ptr[c + 1];
        match self.row_idx[span.clone()].binary_search(&r) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for c in 0..self.cols {
            for (r, v) in self.column(c) {
                d[r][c] += v;
            }
        }
        d
    }

    pub fn transpose(&self) -> Self {
        let mut t = Vec::with_capacity(self.nnz());
        for c in 0..self.cols {
            for (r, v) in self.column(c) {
                t.push((c, r, v));
            }
        }
        Self::from_triplets(self.cols, self.rows, t)
    }

    /// `A · X` where `X` is row-major `cols × k`; returns row-major `rows × k`.
    pub fn mul_dense(&self, x: &[f64], k: usize) -> Result<Vec<f64>, SparseError> {
        if x.len() != self.cols * k {
            return Err(SparseError::Dimension {
                expected: self.cols * k,
                actual: x.len(),
            });
        }
        let mut y = vec![0.0; self.rows * k];
        for c in 0..self.cols {
            let xc = &x[c * k..(c + 1) * k];
            for (r, v) in self.column(c) {
                let yr = &mut y[r * k..(r + 1) * k];
                for j in 0..k {
                    yr[j] += v * xc[j];
                }
            }
        }
        Ok(y)
    }

    /// `Aᵀ · X` where `X` is row-major `rows × k`; returns row-major `cols × k`.
    pub fn tmul_dense(&self, x: &[f64], k: usize) -> Result<Vec<f64>, SparseError> {
        if x.len() != self.rows * k {
            return Err(SparseError::Dimension {
                expected: self.rows * k,
                actual: x.len(),
            });
        }
        let mut y = vec![0.0; self.cols * k];
        for c in 0..self.cols {
            let yc = &mut y[c * k..(c + 1) * k];
            for (r, v) in self.column(c) {
                let xr = &x[r * k..(r + 1) * k];
                for j in 0..k {
                    yc[j] += v * xr[j];
                }
            }
        }
        Ok(y)
    }

    /// Copy with row and column `drop` removed (square matrices).
    pub fn without_row_col(&self, drop: usize) -> Self {
        let shift = |i: usize| if i > drop { i - 1 } else { i };
        let mut t = Vec::with_capacity(self.nnz());
        for c in (0..self.cols).filter(|&c| c != drop) {
            for (r, v) in self.column(c).filter(|&(r, _)| r != drop) {
                t.push((shift(r), shift(c), v));
            }
        }
        Self::from_triplets(self.rows - 1, self.cols - 1, t)
    }
}

/// Reverse Cuthill–McKee ordering of the symmetric pattern of `a`.
/// `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CscMatrix) -> Vec<usize> {
    let n = a.cols();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|c| a.column(c).map(|(r, _)| r).filter(|&r| r != c).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize| -> (usize, usize) {
        // (eccentricity, a farthest node of minimal degree)
        let mut dist = vec![usize::MAX; n];
        dist[start] = 0;
        let mut q = VecDeque::from([start]);
        let mut far = (0, start);
        while let Some(u) = q.pop_front() {
            let du = dist[u];
            if du > far.0 || (du == far.0 && degree[u] < degree[far.1]) {
                far = (du, u);
            }
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = du + 1;
                    q.push_back(v);
                }
            }
        }
        far
    };

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start within this component
        let mut start = seed;
        let (mut ecc, mut far) = bfs_levels(start);
        for _ in 0..8 {
            let (e, f) = bfs_levels(far);
            if e <= ecc {
                break;
            }
            start = far;
            ecc = e;
            far = f;
        }
        visited[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(u) = q.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            next.sort_by_key(|&v| (degree[v], v));
            for v in next {
                visited[v] = true;
                q.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

/// `P A Pᵀ = L Lᵀ` with `L` stored row-wise over its envelope.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    /// first stored column of each row of L
    first: Vec<usize>,
    /// start of each row's slice in `values`
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factorize(a: &CscMatrix) -> Result<Self, SparseError> {
        if a.rows() != a.cols() {
            return Err(SparseError::NotSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for c in 0..n {
            for (r, _) in a.column(c) {
                let (pr, pc) = (inv[r], inv[c]);
                let (hi, lo) = (pr.max(pc), pr.min(pc));
                first[hi] = first[hi].min(lo);
            }
        }
        let mut offset = vec![0usize; n + 1];
        for i in 0..n {
            offset[i + 1] = offset[i] + (i - first[i] + 1);
        }
        let mut values = vec![0.0; offset[n]];
        for c in 0..n {
            for (r, v) in a.column(c) {
                let (pr, pc) = (inv[r], inv[c]);
                if pc <= pr {
                    values[offset[pr] + (pc - first[pr])] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let start = fi.max(fj);
                let mut s = values[offset[i] + (j - fi)];
                for k in start..j {
                    s -= values[offset[i] + (k - fi)] * values[offset[j] + (k - fj)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(SparseError::NotPositiveDefinite {
                            pivot: perm[i],
                            value: s,
                        });
                    }
                    values[offset[i] + (i - fi)] = s.sqrt();
                } else {
                    values[offset[i] + (j - fi)] = s / values[offset[j] + (j - fj)];
                }
            }
        }
        Ok(Self {
            n,
            perm,
            first,
            offset,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of the factor, a proxy for solve cost.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    /// Solves `A x = b` in place for one right-hand side.
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<(), SparseError> {
        if b.len() != self.n {
            return Err(SparseError::Dimension {
                expected: self.n,
                actual: b.len(),
            });
        }
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            let mut s = y[i];
            for k in fi..i {
                s -= row[k - fi] * y[k];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for k in fi..i {
                y[k] -= row[k - fi] * yi;
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = y[new];
        }
        Ok(())
    }

    /// Solves for a row-major `n × k` block of right-hand sides.
    pub fn solve_dense(&self, b: &[f64], k: usize) -> Result<Vec<f64>, SparseError> {
        if b.len() != self.n * k {
            return Err(SparseError::Dimension {
                expected: self.n * k,
                actual: b.len(),
            });
        }
        let mut out = vec![0.0; b.len()];
        let mut col = vec![0.0; self.n];
        for j in 0..k {
            for i in 0..self.n {
                col[i] = b[i * k + j];
            }
            self.solve_in_place(&mut col)?;
            for i in 0..self.n {
                out[i * k + j] = col[i];
            }
        }
        Ok(out)
    }
}
