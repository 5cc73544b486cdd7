//! Dense 2-D tensors, deterministic random generation, and the small set of
//! matrix kernels the calibration engine is built on.
//!
//! All arithmetic runs in f64 regardless of the storage dtype tag; the tag
//! only governs how a matrix is narrowed when written to the on-disk
//! container. Random generation uses a splitmix64 stream with an explicit
//! Box-Muller transform so that a given [`Seed`] reproduces the same bits on
//! every platform.

use std::ops::Range;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── Storage dtype ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype tag 0x{other:02x}"))),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

// ── Matrix ───────────────────────────────────────────────────────────────

/// Row-major dense matrix. Values are held as f64; `dtype` records the
/// precision the matrix is stored at on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    dtype: Dtype,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, dtype: Dtype) -> Self {
        Matrix {
            rows,
            cols,
            dtype,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, dtype: Dtype, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Format(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix {
            rows,
            cols,
            dtype,
            data,
        })
    }

    /// Identity, always f64 (used for synthetic calibration inputs).
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n, Dtype::F64);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
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

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows, self.dtype);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`, computed in f64. Requires matching inner dimension
    /// and dtype.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        if self.dtype != other.dtype {
            return Err(Error::DtypeMismatch { op: "matmul" });
        }
        let bt = other.transpose();
        Ok(self.mul_with_bt(&bt))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        if self.dtype != other.dtype {
            return Err(Error::DtypeMismatch { op: "matmul_nt" });
        }
        Ok(self.mul_with_bt(other))
    }

    /// Shared kernel: C[i][j] = dot(A row i, BT row j), tiled over BT rows
    /// so a column block stays cache-resident across all rows of A. Each
    /// output element is one contiguous dot with a fixed summation order,
    /// so results do not depend on the thread count.
    fn mul_with_bt(&self, bt: &Matrix) -> Matrix {
        let (m, k, n) = (self.rows, self.cols, bt.rows);
        let mut out = Matrix::zeros(m, n, self.dtype);
        const TILE: usize = 48;
        let a = &self.data;
        let b = &bt.data;
        par_row_chunks(&mut out.data, n, m, |row0, chunk| {
            let rows = chunk.len() / n.max(1);
            for j0 in (0..n).step_by(TILE) {
                let j1 = (j0 + TILE).min(n);
                for i in 0..rows {
                    let ar = &a[(row0 + i) * k..(row0 + i + 1) * k];
                    let or = &mut chunk[i * n..(i + 1) * n];
                    for j in j0..j1 {
                        or[j] = dot(ar, &b[j * k..(j + 1) * k]);
                    }
                }
            }
        });
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.zip_check("add", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_check("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, self.dtype, data)
    }

    fn zip_check(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op,
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Mean absolute elementwise difference.
    pub fn mean_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.zip_check("mean_abs_diff", other)?;
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(total / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.zip_check("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// New matrix whose row i is `self` row `perm[i]`.
    pub fn rows_permuted(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.rows);
        let mut out = Matrix::zeros(self.rows, self.cols, self.dtype);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }

    /// New matrix whose column j is `self` column `perm[j]`.
    pub fn cols_permuted(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.cols);
        let mut out = Matrix::zeros(self.rows, self.cols, self.dtype);
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = out.row_mut(r);
            for (j, &p) in perm.iter().enumerate() {
                dst[j] = src[p];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the shape, dtype tag, and little-endian value bits.
    /// Stable across runs and platforms; used by determinism tests.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(&(self.rows as u64).to_le_bytes());
        eat(&(self.cols as u64).to_le_bytes());
        eat(&[self.dtype.tag()]);
        for v in &self.data {
            eat(&v.to_le_bytes());
        }
        h
    }
}

/// Contiguous dot product with four accumulators. The summation order is
/// fixed, so the result is reproducible for given inputs.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let quads = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for q in 0..quads {
        let i = 4 * q;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for i in 4 * quads..n {
        s0 += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3)
}

/// `y += c * x` over contiguous slices.
#[inline]
pub fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

// ── Thread pool ──────────────────────────────────────────────────────────

/// Worker count for row-partitioned kernels: `ASYMCAL_THREADS` if set (and
/// at least 1), otherwise the number of available cores.
pub fn configured_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        if let Ok(raw) = std::env::var("ASYMCAL_THREADS") {
            if let Ok(n) = raw.trim().parse::<usize>() {
                return n.max(1);
            }
        }
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

/// Splits a row-major buffer into per-thread row chunks and runs `f` on
/// each with its starting row. Work is partitioned by output rows only, so
/// every element is produced by exactly one thread with the same inner
/// summation order regardless of the thread count.
pub fn par_row_chunks<F>(data: &mut [f64], cols: usize, rows: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let threads = configured_threads();
    if threads <= 1 || rows < 2 * threads || data.len() < (1 << 16) {
        f(0, data);
        return;
    }
    let per = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        for (k, chunk) in data.chunks_mut(per * cols).enumerate() {
            let f = &f;
            scope.spawn(move || f(k * per, chunk));
        }
    });
}

// ── Deterministic random generation ──────────────────────────────────────

/// A 64-bit seed. Identical seeds yield bit-identical matrices across runs
/// and platforms; `stream` derives independent substreams for different
/// purposes (weights, calibration data, noise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed(pub u64);

impl Seed {
    pub fn stream(self, salt: u64) -> Rng {
        // One splitmix step over seed XOR a salted odd constant keeps
        // substreams decorrelated without a heavier PRF.
        let mixed = splitmix_step(self.0 ^ salt.wrapping_mul(0x9E3779B97F4A7C15));
        Rng { state: mixed }
    }

    pub fn rng(self) -> Rng {
        Rng { state: self.0 }
    }
}

#[inline]
fn splitmix_step(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// splitmix64 generator with a Box-Muller normal transform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in (0, 1]: 53 mantissa bits, never exactly zero (the normal
    /// transform takes a log of this value).
    pub fn next_f64(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via Box-Muller. Draws a (u1, u2) pair per call and
    /// discards the sine branch, keeping the stream position independent of
    /// how callers interleave draws.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Row-major matrix of standard normals.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, dtype: Dtype) -> Matrix {
        let mut m = Matrix::zeros(rows, cols, dtype);
        for v in m.data_mut() {
            *v = self.next_normal();
        }
        m
    }

    /// Uniform integer in [0, bound).
    pub fn next_below(&mut self, bound: usize) -> usize {
        (self.next_u64() % bound as u64) as usize
    }

    pub fn range_f64(&mut self, range: Range<f64>) -> f64 {
        range.start + (range.end - range.start) * self.next_f64()
    }
}

/// Correlated calibration-style data: X = A·Z where Z is n×k standard
/// normal and A is lower-triangular with A[i][j] = decay^(i-j). Larger
/// decay couples adjacent channels more strongly and worsens the Gram
/// matrix conditioning. The product uses an explicit fixed-order loop so
/// generation stays bit-stable independent of the fast matmul path.
pub fn gen_correlated(seed: Seed, n: usize, k: usize, decay: f64) -> Result<Matrix> {
    if n == 0 || k == 0 {
        return Err(Error::DegenerateInput(format!(
            "gen_correlated needs n, k >= 1 (got {n}x{k})"
        )));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "correlation decay must lie in (0, 1], got {decay}"
        )));
    }
    let z = seed.stream(0x67656e).normal_matrix(n, k, Dtype::F64);
    let mut x = Matrix::zeros(n, k, Dtype::F64);
    let mut coeff = vec![0.0; n];
    for i in 0..n {
        // coeff[j] = decay^(i-j) for j <= i, accumulated low-to-high.
        coeff[i] = 1.0;
        for j in (0..i).rev() {
            coeff[j] = coeff[j + 1] * decay;
        }
        for col in 0..k {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += coeff[j] * z.at(j, col);
            }
            x.set(i, col, acc);
        }
    }
    Ok(x)
}
