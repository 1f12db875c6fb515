//! Dense row-major linear algebra in 64-bit precision.
//!
//! Everything here is deterministic: reductions run in a fixed order, so the
//! same inputs produce bit-identical outputs regardless of thread count.

use std::ops::Index;

use crate::error::{Error, Result};
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq)]
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting length mismatches and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let len = rows.checked_mul(cols).ok_or(Error::DimensionOverflow { rows, cols })?;
        if data.len() != len {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                expected: format!("{len} entries ({rows}x{cols})"),
                actual: format!("{} entries", data.len()),
            });
        }
        let m = Self { rows, cols, data };
        m.check_finite("matrix")?;
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "from_rows",
                    expected: format!("{cols} columns"),
                    actual: format!("{} columns in row {i}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    /// Copies row `i` out as a 1-row matrix.
    pub fn row_matrix(&self, i: usize) -> Matrix {
        Matrix {
            rows: 1,
            cols: self.cols,
            data: self.row(i).to_vec(),
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for (j, &v) in self.row(i).iter().enumerate() {
                out.data[j * self.rows + i] = v;
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                expected: format!("lhs cols == rhs rows ({})", self.cols),
                actual: format!("{}x{} * {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, rhs.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::DimensionMismatch {
                op: "t_matmul",
                expected: format!("equal row counts ({})", self.rows),
                actual: format!("{}x{} vs {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            });
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let b = rhs.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, b, &mut out.data[i * rhs.cols..(i + 1) * rhs.cols]);
            }
        }
        Ok(out)
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                expected: format!("{}x{}", self.rows, self.cols),
                actual: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..*self
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_scaled")?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn add_diagonal(&mut self, value: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += value;
        }
    }

    /// Sum of the elementwise product.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "frobenius_dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols))
            .map(|i| self.data[i * self.cols + i])
            .sum()
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(Error::NonFinite {
                what,
                row: p / self.cols.max(1),
                col: p % self.cols.max(1),
            }),
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of bounds");
        &self.data[i * self.cols + j]
    }
}

/// Fixed-order dot product with four independent accumulators.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramMode {
    /// `MᵀM`, cols x cols.
    Feature,
    /// `MMᵀ`, rows x rows.
    Sample,
}

/// Gram matrix of `m`. Only the upper triangle is accumulated and then mirrored,
/// so the result is exactly symmetric.
pub fn gram(m: &Matrix, mode: GramMode) -> Result<Matrix> {
    m.check_finite("gram input")?;
    let n = match mode {
        GramMode::Feature => m.cols,
        GramMode::Sample => m.rows,
    };
    n.checked_mul(n).ok_or(Error::DimensionOverflow { rows: n, cols: n })?;
    let mut g = Matrix::zeros(n, n);
    match mode {
        GramMode::Feature => {
            for r in 0..m.rows {
                let x = m.row(r);
                for a in 0..n {
                    let xa = x[a];
                    if xa == 0.0 {
                        continue;
                    }
                    axpy(xa, &x[a..], &mut g.data[a * n + a..(a + 1) * n]);
                }
            }
        }
        GramMode::Sample => {
            for i in 0..n {
                for j in i..n {
                    g.data[i * n + j] = dot(m.row(i), m.row(j));
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            g.data[i * n + j] = g.data[j * n + i];
        }
    }
    Ok(g)
}

const ASYMMETRY_TOL: f64 = 1e-9;
const JITTER_ESCALATION: f64 = 1e-10;

/// Cholesky factor `L` of `A + jitter·I`, stored row-major (lower triangle).
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factorizes `a + jitter·I`. On failure retries once with
    /// `jitter + 1e-10·trace(a)/n`; a second failure is an error naming both jitters.
    pub fn factor(a: &Matrix, jitter: f64) -> Result<Self> {
        let n = a.rows;
        if a.cols != n {
            return Err(Error::DimensionMismatch {
                op: "cholesky",
                expected: "square matrix".into(),
                actual: format!("{}x{}", a.rows, a.cols),
            });
        }
        if !(jitter.is_finite() && jitter >= 0.0) {
            return Err(Error::invalid(
                "jitter",
                format!("must be finite and >= 0, got {jitter}"),
            ));
        }
        a.check_finite("cholesky input")?;
        let tol = ASYMMETRY_TOL * a.max_abs();
        for i in 0..n {
            for j in 0..i {
                let gap = (a.data[i * n + j] - a.data[j * n + i]).abs();
                if gap > tol {
                    return Err(Error::Asymmetric { row: i, col: j, gap });
                }
            }
        }
        if let Some(lower) = factor_lower(a, jitter) {
            return Ok(Self { n, lower, jitter });
        }
        let escalated = jitter + JITTER_ESCALATION * a.trace() / n.max(1) as f64;
        match factor_lower(a, escalated) {
            Some(lower) => Ok(Self {
                n,
                lower,
                jitter: escalated,
            }),
            None => Err(Error::NotPositiveDefinite {
                first: jitter,
                second: escalated,
            }),
        }
    }

    /// Diagonal shift actually used (differs from the request after escalation).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `(A + jitter·I) X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if b.rows != n {
            return Err(Error::DimensionMismatch {
                op: "cholesky solve",
                expected: format!("{n} rows"),
                actual: format!("{} rows", b.rows),
            });
        }
        // one contiguous right-hand side per row of bt
        let mut bt = b.transpose();
        for rhs in bt.data.chunks_exact_mut(n.max(1)) {
            self.solve_in_place(rhs);
        }
        Ok(bt.transpose())
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        let l = &self.lower;
        for i in 0..n {
            let row = &l[i * n..i * n + i];
            x[i] = (x[i] - dot(row, &x[..i])) / l[i * n + i];
        }
        for i in (0..n).rev() {
            x[i] /= l[i * n + i];
            let xi = x[i];
            if xi != 0.0 {
                axpy(-xi, &l[i * n..i * n + i], &mut x[..i]);
            }
        }
    }
}

const ROW_BLOCK: usize = 16;

/// Row-oriented (Cholesky-Banachiewicz) factorization, blocked over rows so that
/// each finished row is streamed once per block instead of once per row.
fn factor_lower(a: &Matrix, jitter: f64) -> Option<Vec<f64>> {
    let n = a.rows;
    let mut l = vec![0.0f64; n * n];
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + ROW_BLOCK).min(n);
        let (done, block) = l.split_at_mut(i0 * n);
        // columns left of the block depend only on finished rows
        for j in 0..i0 {
            let lj = &done[j * n..j * n + j];
            let djj = done[j * n + j];
            for i in i0..i1 {
                let li = &mut block[(i - i0) * n..(i - i0 + 1) * n];
                let s = a.data[i * n + j] - dot(&li[..j], lj);
                li[j] = s / djj;
            }
        }
        // diagonal block
        for i in i0..i1 {
            for j in i0..=i {
                let s = {
                    let li = &block[(i - i0) * n..(i - i0) * n + j];
                    let lj = &block[(j - i0) * n..(j - i0) * n + j];
                    a.data[i * n + j] - dot(li, lj)
                };
                if i == j {
                    let s = s + jitter;
                    if !(s > 0.0 && s.is_finite()) {
                        return None;
                    }
                    block[(i - i0) * n + i] = s.sqrt();
                } else {
                    block[(i - i0) * n + j] = s / block[(j - i0) * n + j];
                }
            }
        }
        i0 = i1;
    }
    Some(l)
}

/// Solves `(A + jitter·I) X = B` for symmetric `A` by Cholesky factorization.
pub fn solve_spd(a: &Matrix, b: &Matrix, jitter: f64) -> Result<Matrix> {
    Cholesky::factor(a, jitter)?.solve(b)
}

/// Seeded Gaussian random projection `d -> d_prime` with entries drawn
/// i.i.d. from `N(0, 1/d_prime)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    seed: u64,
    entries: Matrix,
}

/// Stream id reserved for projection matrices.
const PROJECTION_STREAM: u64 = 0x5052_4f4a;

pub fn make_projection(seed: u64, d: usize, d_prime: usize) -> Result<Projection> {
    if d_prime == 0 || d_prime > d {
        return Err(Error::InvalidProjection { d, d_prime });
    }
    let len = d
        .checked_mul(d_prime)
        .ok_or(Error::DimensionOverflow { rows: d, cols: d_prime })?;
    let scale = 1.0 / (d_prime as f64).sqrt();
    let mut rng = DetRng::new(seed, PROJECTION_STREAM);
    let data = (0..len).map(|_| scale * rng.standard_normal()).collect();
    Ok(Projection {
        seed,
        entries: Matrix {
            rows: d,
            cols: d_prime,
            data,
        },
    })
}

impl Projection {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_dim(&self) -> usize {
        self.entries.rows
    }

    pub fn target_dim(&self) -> usize {
        self.entries.cols
    }

    pub fn matrix(&self) -> &Matrix {
        &self.entries
    }
}

/// `m · P`.
pub fn project(m: &Matrix, p: &Projection) -> Result<Matrix> {
    if m.cols != p.source_dim() {
        return Err(Error::DimensionMismatch {
            op: "project",
            expected: format!("{} columns", p.source_dim()),
            actual: format!("{} columns", m.cols),
        });
    }
    m.matmul(&p.entries)
}
