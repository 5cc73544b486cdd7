//! Dense symmetric linear algebra for calibration: Gram/Hessian assembly,
//! the inverse-Cholesky factor, Gaussian elimination on the inverse, and
//! the cross-layer compensation matrix P.
//!
//! Everything here is sized for one layer at a time (n up to a few
//! thousand). Factorizations are routed as Cholesky(H), triangular
//! inversion, then Cholesky(H^-1), which keeps the factor of the inverse
//! available without forming an explicit matrix inverse of the factor at
//! solve time.

use crate::error::{Error, Result};
use crate::tensor::{dot, Dtype, Matrix};

// ── Hessian ──────────────────────────────────────────────────────────────

/// Dampened proxy Hessian H = X·Xᵀ + λI for one layer, with bookkeeping
/// about dead input channels (rows of X that are identically zero).
#[derive(Debug, Clone)]
pub struct HessianState {
    h: Matrix,
    lambda: f64,
    dead: Vec<usize>,
}

impl HessianState {
    /// Wraps an existing symmetric matrix without dampening it further.
    /// Intended for tests and oracles that construct H directly.
    pub fn from_matrix(h: Matrix) -> Result<Self> {
        if h.rows() != h.cols() {
            return Err(Error::ShapeMismatch {
                op: "hessian",
                left: (h.rows(), h.cols()),
                right: (h.cols(), h.rows()),
            });
        }
        let scale = h.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..h.rows() {
            for j in 0..i {
                if (h.at(i, j) - h.at(j, i)).abs() > 1e-10 * scale.max(1.0) {
                    return Err(Error::DegenerateInput(format!(
                        "hessian is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(HessianState {
            h,
            lambda: 0.0,
            dead: Vec::new(),
        })
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }

    pub fn n(&self) -> usize {
        self.h.rows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Channels whose Gram diagonal was exactly zero before dampening.
    pub fn dead_channels(&self) -> &[usize] {
        &self.dead
    }

    /// Pre-dampening Gram diagonal entry.
    pub fn raw_diag(&self, i: usize) -> f64 {
        self.h.at(i, i) - self.lambda
    }
}

/// H = X·Xᵀ + λI with λ = damp_ratio × mean(diag(X·Xᵀ)). Channels with a
/// zero diagonal before dampening are recorded as dead; their dampened
/// diagonal is λ alone. All-zero input is rejected because λ would vanish.
pub fn build_hessian(x: &Matrix, damp_ratio: f64) -> Result<HessianState> {
    if !(damp_ratio > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "damp_ratio must be positive, got {damp_ratio}"
        )));
    }
    let n = x.rows();
    let mut h = x.matmul_nt(x)?;
    // X·Xᵀ is symmetric up to summation order; mirror the upper triangle so
    // downstream exactness arguments can rely on h[i][j] == h[j][i].
    for i in 0..n {
        for j in 0..i {
            let v = h.at(j, i);
            h.set(i, j, v);
        }
    }
    let mut dead = Vec::new();
    let mut trace = 0.0;
    for i in 0..n {
        let d = h.at(i, i);
        trace += d;
        if d == 0.0 {
            dead.push(i);
        }
    }
    let mean_diag = trace / n as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::DegenerateInput(
            "calibration input is all zero; Hessian diagonal vanishes".into(),
        ));
    }
    let lambda = damp_ratio * mean_diag;
    for i in 0..n {
        let v = h.at(i, i) + lambda;
        h.set(i, i, v);
    }
    Ok(HessianState { h, lambda, dead })
}

// ── Cholesky and the factor of the inverse ───────────────────────────────

/// Lower-triangular L with L·Lᵀ = H^-1.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: Matrix,
}

impl CholFactor {
    /// Wraps a lower-triangular matrix with positive diagonal. Intended for
    /// tests that need a factor with known entries.
    pub fn from_lower(l: Matrix) -> Result<Self> {
        if l.rows() != l.cols() {
            return Err(Error::ShapeMismatch {
                op: "chol_factor",
                left: (l.rows(), l.cols()),
                right: (l.cols(), l.rows()),
            });
        }
        for i in 0..l.rows() {
            if !(l.at(i, i) > 0.0) {
                return Err(Error::NotSpd {
                    pivot: i,
                    value: l.at(i, i),
                });
            }
            for j in i + 1..l.cols() {
                if l.at(i, j) != 0.0 {
                    return Err(Error::DegenerateInput(format!(
                        "factor has a nonzero above the diagonal at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(CholFactor { l })
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn n(&self) -> usize {
        self.l.rows()
    }

    /// Diagonal entry L[q][q].
    pub fn diag(&self, q: usize) -> f64 {
        self.l.at(q, q)
    }
}

/// Standard lower Cholesky factorization. Fails with the pivot index on
/// any non-positive (or non-finite) pivot.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            left: (a.rows(), a.cols()),
            right: (a.cols(), a.rows()),
        });
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        let (head, tail) = l.split_at_mut(i * n);
        let li = &mut tail[..n];
        for j in 0..i {
            let lj = &head[j * n..j * n + n];
            let s = a.at(i, j) - dot(&li[..j], &lj[..j]);
            li[j] = s / lj[j];
        }
        let d = a.at(i, i) - dot(&li[..i], &li[..i]);
        if !(d > 0.0) {
            return Err(Error::NotSpd { pivot: i, value: d });
        }
        li[i] = d.sqrt();
    }
    Matrix::from_vec(n, n, a.dtype(), l)
}

/// Inverse of a lower-triangular matrix (forward substitution per column).
fn invert_lower(l: &Matrix) -> Matrix {
    let n = l.rows();
    let mut y = Matrix::zeros(n, n, l.dtype());
    for i in 0..n {
        let di = 1.0 / l.at(i, i);
        y.set(i, i, di);
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s += l.at(i, k) * y.at(k, j);
            }
            y.set(i, j, -s * di);
        }
    }
    y
}

/// Inverse of a symmetric positive-definite matrix via Cholesky and two
/// triangular inversions: H^-1 = Y'·Y with Y = Lh^-1. The result is
/// exactly symmetric by construction.
pub fn spd_inverse(h: &Matrix) -> Result<Matrix> {
    let lh = cholesky(h)?;
    let y = invert_lower(&lh);
    let n = h.rows();
    // Transposing Y makes every inner product a contiguous dot.
    let yt = y.transpose();
    let mut inv = Matrix::zeros(n, n, h.dtype());
    for i in 0..n {
        for j in 0..=i {
            // Column dots run over rows k >= max(i, j) = i.
            let v = dot(&yt.row(i)[i..], &yt.row(j)[i..]);
            inv.set(i, j, v);
            inv.set(j, i, v);
        }
    }
    Ok(inv)
}

/// Lower-triangular L with L·Lᵀ = H^-1, the factor the calibration loop
/// consumes. Routed as Cholesky(H) → triangular inversion → Cholesky(H^-1)
/// so failures name the offending pivot of the original matrix first.
pub fn inverse_cholesky(hs: &HessianState) -> Result<CholFactor> {
    let hinv = spd_inverse(hs.h())?;
    let l = cholesky(&hinv)?;
    Ok(CholFactor { l })
}

// ── Gaussian elimination on the inverse ──────────────────────────────────

/// Removes index q from an inverse Hessian:
/// H^-1 - H^-1[:,q]·H^-1[q,:] / H^-1[q][q], with row q and column q of the
/// result set identically to zero. This is the rank-one downdate that
/// keeps the matrix equal to the inverse of H with row/column q deleted
/// (zero-padded back to full size).
pub fn ge_eliminate(hinv: &Matrix, q: usize) -> Result<Matrix> {
    let n = hinv.rows();
    if hinv.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "ge_eliminate",
            left: (hinv.rows(), hinv.cols()),
            right: (hinv.cols(), hinv.rows()),
        });
    }
    if q >= n {
        return Err(Error::InvalidConfig(format!(
            "eliminate index {q} out of range for n = {n}"
        )));
    }
    let pivot = hinv.at(q, q);
    if pivot == 0.0 || !pivot.is_finite() {
        return Err(Error::ZeroPivot { index: q });
    }
    let mut out = hinv.clone();
    let inv_p = 1.0 / pivot;
    for i in 0..n {
        let ci = hinv.at(i, q) * inv_p;
        if ci == 0.0 {
            continue;
        }
        let row_q = hinv.row(q);
        let row_i = out.row_mut(i);
        for j in 0..n {
            row_i[j] -= ci * row_q[j];
        }
    }
    // The update annihilates row/column q only up to roundoff; pin the
    // invariant e_q·H^-1_{-q} = 0 exactly.
    for j in 0..n {
        out.set(q, j, 0.0);
        out.set(j, q, 0.0);
    }
    Ok(out)
}

/// Trailing (n-q)×(n-q) product L[q:, q:]·L[q:, q:]ᵀ. By the block
/// recursion of the Cholesky factor this equals the result of eliminating
/// indices 0..q from H^-1, restricted to the trailing block, which is what
/// the per-iteration update actually needs.
pub fn chol_slice_hinv(l: &CholFactor, q: usize) -> Result<Matrix> {
    let n = l.n();
    if q >= n {
        return Err(Error::InvalidConfig(format!(
            "slice start {q} out of range for n = {n}"
        )));
    }
    let r = n - q;
    let ld = l.l();
    let mut out = Matrix::zeros(r, r, Dtype::F64);
    for i in 0..r {
        for j in 0..=i {
            // Row i of the slice is l[q+i][q..]; entries past the diagonal
            // of the slice are zero, so the dot stops at slice column j.
            let a = &ld.row(q + i)[q..q + j + 1];
            let b = &ld.row(q + j)[q..q + j + 1];
            let v = dot(a, b);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

// ── Compensation matrix P ────────────────────────────────────────────────

/// Row-by-row reference for the compensation matrix:
/// P[q][:] = ΔX[q][:]·Xᵀ·L[q+1:, q+1:]·L[q+1:, q+1:]ᵀ (zero-padded in
/// columns ≤ q). Deliberately plain: one row at a time through the sliced
/// factor, textbook vector-matrix products. Used as the oracle for
/// [`compute_p_fused`] and as the unparallel benchmark variant.
pub fn compute_p_reference(dx: &Matrix, x: &Matrix, l: &CholFactor) -> Result<Matrix> {
    let n = l.n();
    if dx.rows() != n || x.rows() != n || dx.cols() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "compute_p_reference",
            left: (dx.rows(), dx.cols()),
            right: (x.rows(), x.cols()),
        });
    }
    let mut p = Matrix::zeros(n, n, Dtype::F64);
    let mut gram_row = vec![0.0; n];
    for q in 0..n {
        for b in 0..n {
            gram_row[b] = dot(dx.row(q), x.row(b));
        }
        p_row_from_gram(&gram_row, l, q, p.row_mut(q));
    }
    Ok(p)
}

/// Same row loop starting from a precomputed ΔX·Xᵀ. This is the variant
/// the benchmark times, so both paths consume identical inputs.
pub fn compute_p_rowloop(dx_xt: &Matrix, l: &CholFactor) -> Result<Matrix> {
    let n = l.n();
    if dx_xt.rows() != n || dx_xt.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "compute_p_rowloop",
            left: (dx_xt.rows(), dx_xt.cols()),
            right: (n, n),
        });
    }
    let mut p = Matrix::zeros(n, n, Dtype::F64);
    for q in 0..n {
        p_row_from_gram(dx_xt.row(q), l, q, p.row_mut(q));
    }
    Ok(p)
}

/// One output row: t·Lsl·Lslᵀ where t is the trailing part of the gram row
/// and Lsl = L[q+1:, q+1:].
fn p_row_from_gram(gram_row: &[f64], l: &CholFactor, q: usize, out: &mut [f64]) {
    let n = l.n();
    let base = q + 1;
    let r = n - base;
    if r == 0 {
        return;
    }
    let ld = l.l();
    let mut s1 = vec![0.0; r];
    for j in 0..r {
        let mut acc = 0.0;
        for i in j..r {
            acc += gram_row[base + i] * ld.at(base + i, base + j);
        }
        s1[j] = acc;
    }
    for j in 0..r {
        let mut acc = 0.0;
        for i in 0..=j {
            acc += s1[i] * ld.at(base + j, base + i);
        }
        out[base + j] = acc;
    }
}

/// Tile width for the fused compensation kernel. Eight factor rows are
/// packed per group, so this must stay a multiple of 8.
const P_TILE: usize = 64;

/// acc[t] += Σ_b a[b]·pk[8b + t], the 1×8 micro-kernel of the fused
/// compensation product. `pk` holds eight packed factor rows interleaved
/// element-by-element, so each lane group maps onto one 512-bit fused
/// multiply-add. Eight accumulator groups keep enough of them in flight
/// to cover their latency; the split accumulators fix the summation
/// order independent of length.
#[inline]
fn oct_dot(a: &[f64], pk: &[f64]) -> [f64; 8] {
    debug_assert_eq!(pk.len(), 8 * a.len());
    let mut acc = [[0.0f64; 8]; 8];
    let mut pks = pk.chunks_exact(64);
    let mut ats = a.chunks_exact(8);
    for (p64, a8) in (&mut pks).zip(&mut ats) {
        for u in 0..8 {
            let au = a8[u];
            for t in 0..8 {
                acc[u][t] = au.mul_add(p64[8 * u + t], acc[u][t]);
            }
        }
    }
    let (ra, rp) = (ats.remainder(), pks.remainder());
    for (b, &ab) in ra.iter().enumerate() {
        for t in 0..8 {
            acc[0][t] = ab.mul_add(rp[8 * b + t], acc[0][t]);
        }
    }
    for u in 1..8 {
        for t in 0..8 {
            acc[0][t] += acc[u][t];
        }
    }
    acc[0]
}

/// Four-row variant of [`oct_dot`]: the packed group is loaded once and
/// multiplied against four broadcast streams, so the packed tile is
/// traversed a quarter as often. Two accumulator groups per row keep the
/// chains short; all four streams must share one length.
#[inline]
fn oct_dot4(a: [&[f64]; 4], pk: &[f64]) -> [[f64; 8]; 4] {
    let len = a[0].len();
    debug_assert!(a.iter().all(|r| r.len() == len));
    debug_assert_eq!(pk.len(), 8 * len);
    let mut acc = [[[0.0f64; 8]; 4]; 2];
    let mut pks = pk.chunks_exact(16);
    let mut b = 0;
    while b + 2 <= len {
        let p16 = pks.next().unwrap();
        for u in 0..2 {
            for (r, row) in a.iter().enumerate() {
                let ab = row[b + u];
                for t in 0..8 {
                    acc[u][r][t] = ab.mul_add(p16[8 * u + t], acc[u][r][t]);
                }
            }
        }
        b += 2;
    }
    if b < len {
        let rp = pks.remainder();
        for (r, row) in a.iter().enumerate() {
            let ab = row[b];
            for t in 0..8 {
                acc[0][r][t] = ab.mul_add(rp[t], acc[0][r][t]);
            }
        }
    }
    let mut out = [[0.0f64; 8]; 4];
    for r in 0..4 {
        for t in 0..8 {
            out[r][t] = acc[0][r][t] + acc[1][r][t];
        }
    }
    out
}

/// Packs rows j0..j1 of a row-major n-column buffer, restricted to columns
/// [b0, b1), into groups of eight interleaved rows: group g holds element
/// (b, t) at g·8·(b1-b0) + (b-b0)·8 + t. Rows past j1 pad with zeros.
fn pack_octs(src: &[f64], n: usize, j0: usize, j1: usize, b0: usize, b1: usize, out: &mut Vec<f64>) {
    let span = b1 - b0;
    let octs = (j1 - j0 + 7) / 8;
    out.clear();
    out.resize(octs * 8 * span, 0.0);
    for g in 0..octs {
        let gbase = g * 8 * span;
        for t in 0..8 {
            let j = j0 + g * 8 + t;
            if j >= j1 {
                continue;
            }
            for (db, &v) in src[j * n + b0..j * n + b1].iter().enumerate() {
                out[gbase + db * 8 + t] = v;
            }
        }
    }
}

/// Fused computation of the full compensation matrix:
/// P = ((ΔX·Xᵀ·L) ⊙ M_U)·Lᵀ with M_U the strictly-upper ones mask.
///
/// Masking after the first product makes row q of P depend only on the
/// trailing factor block, which is exactly the per-row sliced product the
/// reference computes; doing it this way turns n small sliced products
/// into two triangular matrix products. Both products run through a packed
/// micro-kernel: eight factor rows at a time are packed interleaved per
/// column tile, and each output row is produced by broadcast
/// multiply-adds against the packed group. The ragged triangular summation
/// ranges are padded to one uniform range per group — exact, because every
/// padded factor entry sits in the strictly-upper half of L (or on the
/// never-written diagonal of the intermediate) and is stored as literal
/// zero.
pub fn compute_p_fused(dx_xt: &Matrix, l: &CholFactor) -> Result<Matrix> {
    let n = l.n();
    if dx_xt.rows() != n || dx_xt.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "compute_p_fused",
            left: (dx_xt.rows(), dx_xt.cols()),
            right: (n, n),
        });
    }
    let lt = l.l().transpose();
    let mut packed = Vec::new();
    // O = (ΔX·Xᵀ·L) ⊙ M_U. Entry (i, j) only sums over b >= j because L is
    // lower triangular; within a column tile the start is padded down to
    // the tile base j0, so every quad shares the suffix range [j0, n).
    let mut o = Matrix::zeros(n, n, Dtype::F64);
    {
        let g = dx_xt.data();
        let od = o.data_mut();
        for j0 in (0..n).step_by(P_TILE) {
            let j1 = (j0 + P_TILE).min(n);
            pack_octs(lt.data(), n, j0, j1, j0, n, &mut packed);
            let span = n - j0;
            let octs = (j1 - j0 + 7) / 8;
            let rows = j1.saturating_sub(1);
            let mut i0 = 0;
            while i0 < rows {
                let take = (rows - i0).min(4);
                if take == 4 {
                    let a = [
                        &g[i0 * n + j0..i0 * n + n],
                        &g[(i0 + 1) * n + j0..(i0 + 1) * n + n],
                        &g[(i0 + 2) * n + j0..(i0 + 2) * n + n],
                        &g[(i0 + 3) * n + j0..(i0 + 3) * n + n],
                    ];
                    for q in 0..octs {
                        let jq = j0 + 8 * q;
                        if jq + 7 <= i0 {
                            continue;
                        }
                        let res = oct_dot4(a, &packed[q * 8 * span..(q + 1) * 8 * span]);
                        for (r, lane) in res.iter().enumerate() {
                            let i = i0 + r;
                            for t in 0..8 {
                                let j = jq + t;
                                if j > i && j < j1 {
                                    od[i * n + j] = lane[t];
                                }
                            }
                        }
                    }
                } else {
                    for i in i0..i0 + take {
                        let arow = &g[i * n + j0..(i + 1) * n];
                        for q in 0..octs {
                            let jq = j0 + 8 * q;
                            if jq + 7 <= i {
                                continue;
                            }
                            let res = oct_dot(arow, &packed[q * 8 * span..(q + 1) * 8 * span]);
                            for t in 0..8 {
                                let j = jq + t;
                                if j > i && j < j1 {
                                    od[i * n + j] = res[t];
                                }
                            }
                        }
                    }
                }
                i0 += take;
            }
        }
    }
    // P = O·Lᵀ. With O strictly upper and L lower triangular, entry (i, j)
    // sums over a in (i, j]; the end is padded up to the quad end (row j
    // of L is zero past the diagonal), so a quad shares the range
    // (i, jq+4).
    let mut p = Matrix::zeros(n, n, Dtype::F64);
    {
        let od = o.data();
        let ld = l.l().data();
        let pd = p.data_mut();
        for j0 in (0..n).step_by(P_TILE) {
            let j1 = (j0 + P_TILE).min(n);
            pack_octs(ld, n, j0, j1, 0, j1, &mut packed);
            let span = j1;
            let octs = (j1 - j0 + 7) / 8;
            let rows = j1.saturating_sub(1);
            let mut i0 = 0;
            while i0 < rows {
                let take = (rows - i0).min(4);
                if take == 4 {
                    for q in 0..octs {
                        let jq = j0 + 8 * q;
                        if jq + 7 <= i0 {
                            continue;
                        }
                        let bend = (jq + 8).min(j1);
                        if i0 + 1 >= bend {
                            continue;
                        }
                        // All four streams share the span (i0, bend); rows
                        // past i0 read a few of O's stored zeros at or left
                        // of their own diagonal, which is exact.
                        let a = [
                            &od[i0 * n + i0 + 1..i0 * n + bend],
                            &od[(i0 + 1) * n + i0 + 1..(i0 + 1) * n + bend],
                            &od[(i0 + 2) * n + i0 + 1..(i0 + 2) * n + bend],
                            &od[(i0 + 3) * n + i0 + 1..(i0 + 3) * n + bend],
                        ];
                        let pkq =
                            &packed[q * 8 * span + (i0 + 1) * 8..q * 8 * span + bend * 8];
                        let res = oct_dot4(a, pkq);
                        for (r, lane) in res.iter().enumerate() {
                            let i = i0 + r;
                            for t in 0..8 {
                                let j = jq + t;
                                if j > i && j < j1 {
                                    pd[i * n + j] = lane[t];
                                }
                            }
                        }
                    }
                } else {
                    for i in i0..i0 + take {
                        for q in 0..octs {
                            let jq = j0 + 8 * q;
                            if jq + 7 <= i {
                                continue;
                            }
                            let bend = (jq + 8).min(j1);
                            if i + 1 >= bend {
                                continue;
                            }
                            let arow = &od[i * n + i + 1..i * n + bend];
                            let pkq =
                                &packed[q * 8 * span + (i + 1) * 8..q * 8 * span + bend * 8];
                            let res = oct_dot(arow, pkq);
                            for t in 0..8 {
                                let j = jq + t;
                                if j > i && j < j1 {
                                    pd[i * n + j] = res[t];
                                }
                            }
                        }
                    }
                }
                i0 += take;
            }
        }
    }
    Ok(p)
}
