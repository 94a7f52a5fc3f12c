//! Small dense containers used throughout the solver.
//!
//! The game only ever needs an `m x tau` coupling matrix and `N x tau`
//! strategy profiles, so both are plain row-major buffers.

use std::fmt;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `y = M x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            *out = dot(self.row(r), x);
        }
    }

    /// `y = M^T x`
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        self.matvec_transpose_into(x, &mut y);
        y
    }

    pub fn matvec_transpose_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        y.iter_mut().for_each(|v| *v = 0.0);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (yc, &m) in y.iter_mut().zip(self.row(r)) {
                *yc += m * xr;
            }
        }
    }

    /// `M M^T`, returned as a dense `rows x rows` matrix.
    pub fn gram_rows(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in i..self.rows {
                let v = dot(self.row(i), self.row(j));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }
}

/// An `N x tau` strategy profile: row `i` is agent `i`'s discharge schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Strategies {
    n_agents: usize,
    horizon: usize,
    data: Vec<f64>,
}

impl Strategies {
    pub fn zeros(n_agents: usize, horizon: usize) -> Self {
        Self {
            n_agents,
            horizon,
            data: vec![0.0; n_agents * horizon],
        }
    }

    pub fn filled(n_agents: usize, horizon: usize, value: f64) -> Self {
        Self {
            n_agents,
            horizon,
            data: vec![value; n_agents * horizon],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let horizon = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * horizon);
        for r in rows {
            assert_eq!(r.len(), horizon, "ragged strategy rows");
            data.extend_from_slice(r);
        }
        Self {
            n_agents: rows.len(),
            horizon,
            data,
        }
    }

    pub fn from_flat(n_agents: usize, horizon: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_agents * horizon);
        Self {
            n_agents,
            horizon,
            data,
        }
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    #[inline]
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.horizon..(i + 1) * self.horizon]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.horizon.max(1)).take(self.n_agents)
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        let n = self.n_agents;
        self.data.chunks_exact_mut(self.horizon.max(1)).take(n)
    }

    /// The stacked vector `col(u_1, ..., u_N)`.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.data[i * self.horizon + t]
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize, v: f64) {
        self.data[i * self.horizon + t] = v;
    }

    /// Aggregate `sum_j u_j`, a length-`tau` vector.
    pub fn aggregate(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.horizon];
        self.aggregate_into(&mut s);
        s
    }

    pub fn aggregate_into(&self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for row in self.rows() {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
    }

    pub fn same_shape(&self, other: &Strategies) -> bool {
        self.n_agents == other.n_agents && self.horizon == other.horizon
    }

    /// `max_i ||self_i - other_i||_inf`
    pub fn max_abs_diff(&self, other: &Strategies) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

impl fmt::Display for Strategies {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, row) in self.rows().enumerate() {
            write!(f, "agent {i}:")?;
            for v in row {
                write!(f, " {v:.6}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_entry(a: &[f64]) -> f64 {
    a.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Prefix sums `(M v)_t = sum_{k <= t} v_k` for the lower-triangular all-ones `M`.
pub fn cumulative_sum(v: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    v.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}
