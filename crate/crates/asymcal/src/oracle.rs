//! Slow, obviously-correct references for the calibration math.
//!
//! Everything here favors transparency over speed: the closed-form
//! single-weight update and its loss score, an independent dense-KKT
//! solver for the same constrained least-squares problem, the greedy
//! minimal-score quantizer (per-row optimal ordering), and a naive
//! column-by-column engine that re-estimates the full output residual at
//! every step. The fast engine is validated against these routines in
//! the test suites; none of them share its fused code paths.

use std::time::Instant;

use crate::engine::{asym_loss, sym_loss, LayerResult, QuantConfig};
use crate::error::{Error, Result};
use crate::linalg::{build_hessian, ge_eliminate, spd_inverse};
use crate::quantizer::{fit_params_minmax, fit_params_mse, QuantParams};
use crate::tensor::{axpy, dot, Dtype, Matrix};

/// Largest column count the per-row greedy quantizer accepts. The search
/// re-scores every remaining weight each step, so cost grows as n⁴.
pub const GREEDY_MAX_N: usize = 16;

/// Largest column count [`naive_engine`] accepts; each column costs a
/// full residual re-estimation, O(mnk).
pub const NAIVE_MAX_N: usize = 64;

/// One row's constrained quantization problem: minimize ‖Δw·X − r‖² with
/// the q-th updated weight pinned to a grid value. `hinv` is the inverse
/// of whichever (possibly damped) Hessian the caller is working with; a
/// partially eliminated inverse (zeroed rows/columns for already-handled
/// indices) is accepted, and the per-index operations reject pivots that
/// were eliminated away.
#[derive(Debug, Clone)]
pub struct SingleRowProblem {
    w: Vec<f64>,
    x: Matrix,
    r: Vec<f64>,
    hinv: Matrix,
}

impl SingleRowProblem {
    /// Builds the problem with the residual target r = w·X̃ − w·X.
    pub fn new(w: &[f64], x: &Matrix, x_tilde: &Matrix, hinv: Matrix) -> Result<Self> {
        if x_tilde.rows() != x.rows() || x_tilde.cols() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "single_row_problem",
                left: (x.rows(), x.cols()),
                right: (x_tilde.rows(), x_tilde.cols()),
            });
        }
        let mut r = vec![0.0; x.cols()];
        for (t, &wt) in w.iter().enumerate() {
            for s in 0..x.cols() {
                r[s] += wt * (x_tilde.at(t, s) - x.at(t, s));
            }
        }
        Self::with_residual(w.to_vec(), x.clone(), r, hinv)
    }

    /// Builds the problem from an explicit residual target.
    pub fn with_residual(w: Vec<f64>, x: Matrix, r: Vec<f64>, hinv: Matrix) -> Result<Self> {
        let n = w.len();
        if x.rows() != n {
            return Err(Error::ShapeMismatch {
                op: "single_row_problem",
                left: (1, n),
                right: (x.rows(), x.cols()),
            });
        }
        if r.len() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "single_row_problem",
                left: (1, r.len()),
                right: (x.rows(), x.cols()),
            });
        }
        if hinv.rows() != n || hinv.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "single_row_problem",
                left: (1, n),
                right: (hinv.rows(), hinv.cols()),
            });
        }
        if !hinv.all_finite() {
            return Err(Error::DegenerateInput("non-finite inverse Hessian".into()));
        }
        for i in 0..n {
            if hinv.at(i, i) < 0.0 {
                return Err(Error::NotSpd {
                    pivot: i,
                    value: hinv.at(i, i),
                });
            }
            for j in 0..i {
                let (a, b) = (hinv.at(i, j), hinv.at(j, i));
                if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::DegenerateInput(format!(
                        "inverse Hessian is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(SingleRowProblem { w, x, r, hinv })
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn hinv(&self) -> &Matrix {
        &self.hinv
    }
}

/// r·Xᵀ as a length-n vector: component t is ⟨r, X[t]⟩.
fn residual_gram(r: &[f64], x: &Matrix) -> Vec<f64> {
    (0..x.rows()).map(|t| dot(r, x.row(t))).collect()
}

fn checked_pivot(hinv: &Matrix, q: usize) -> Result<f64> {
    if q >= hinv.rows() {
        return Err(Error::InvalidConfig(format!(
            "index {q} out of range for n = {}",
            hinv.rows()
        )));
    }
    let hqq = hinv.at(q, q);
    if hqq <= 0.0 {
        return Err(Error::ZeroPivot { index: q });
    }
    Ok(hqq)
}

fn delta_w_parts(
    w: &[f64],
    x: &Matrix,
    r: &[f64],
    hinv: &Matrix,
    q: usize,
    w_hat_q: f64,
) -> Result<Vec<f64>> {
    let hqq = checked_pivot(hinv, q)?;
    let hm = ge_eliminate(hinv, q)?;
    let n = w.len();
    let scale = (w_hat_q - w[q]) / hqq;
    let grx = residual_gram(r, x);
    let mut dw = vec![0.0; n];
    for j in 0..n {
        let mut second = 0.0;
        for t in 0..n {
            second += grx[t] * hm.at(t, j);
        }
        dw[j] = scale * hinv.at(q, j) + second;
    }
    Ok(dw)
}

fn loss_q_parts(w: &[f64], x: &Matrix, r: &[f64], hinv: &Matrix, q: usize, w_hat_q: f64) -> Result<f64> {
    let hqq = checked_pivot(hinv, q)?;
    let hm = ge_eliminate(hinv, q)?;
    let n = w.len();
    let d = w_hat_q - w[q];
    let grx = residual_gram(r, x);
    // grx · H⁻¹_{-q} · grxᵀ, the part of the residual the remaining
    // weights can still absorb.
    let mut absorbed = 0.0;
    for t in 0..n {
        let mut row = 0.0;
        for s in 0..n {
            row += hm.at(t, s) * grx[s];
        }
        absorbed += grx[t] * row;
    }
    // grx · (full) H⁻¹ column q: the cross term between the pinned
    // coordinate and the residual steering.
    let mut cross = 0.0;
    for t in 0..n {
        cross += grx[t] * hinv.at(t, q);
    }
    Ok(d * d / hqq + dot(r, r) - absorbed - 2.0 * (d / hqq) * cross)
}

/// Closed-form minimizer of ‖Δw·X − r‖² subject to Δw_q = ŵ_q − w_q:
/// the pinned-coordinate term scaled along row q of H⁻¹, plus the
/// residual projected through the q-eliminated inverse.
pub fn optimal_delta_w(p: &SingleRowProblem, q: usize, w_hat_q: f64) -> Result<Vec<f64>> {
    delta_w_parts(&p.w, &p.x, &p.r, &p.hinv, q, w_hat_q)
}

/// Closed-form value of the constrained minimum reached by
/// [`optimal_delta_w`]. For r = 0 it reduces to the classic per-weight
/// score (ŵ_q − w_q)²/H⁻¹_qq.
pub fn loss_q(p: &SingleRowProblem, q: usize, w_hat_q: f64) -> Result<f64> {
    loss_q_parts(&p.w, &p.x, &p.r, &p.hinv, q, w_hat_q)
}

/// Dense LU solve with partial pivoting. Plain textbook code: factor in
/// place on a copy, forward/back substitute. Errors on a structurally
/// singular system.
pub fn solve_dense(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_dense",
            left: (a.rows(), a.cols()),
            right: (b.len(), 1),
        });
    }
    let mut m = a.data().to_vec();
    let mut v = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for row in col + 1..n {
            let cand = m[row * n + col].abs();
            if cand > best {
                best = cand;
                piv = row;
            }
        }
        if best == 0.0 {
            return Err(Error::ZeroPivot { index: col });
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
            }
            v.swap(col, piv);
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[row * n + j] -= f * m[col * n + j];
            }
            v[row] -= f * v[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = v[col];
        for j in col + 1..n {
            s -= m[col * n + j] * v[j];
        }
        v[col] = s / m[col * n + col];
    }
    Ok(v)
}

/// Independent route to the same constrained optimum: assemble the
/// bordered stationarity system
///
/// ```text
/// [ 2·X·Xᵀ   e_qᵀ ] [ Δwᵀ ]   [ 2·X·rᵀ ]
/// [ e_q       0   ] [  λ  ] = [    c    ]
/// ```
///
/// and solve it densely. Builds the Gram matrix straight from X — no
/// inverse, no elimination — so it shares nothing with the closed form.
/// `c` is the pinned value of Δw_q; the caller must supply an X whose
/// Gram matrix is nonsingular (k ≥ n and full rank).
pub fn kkt_delta_w(x: &Matrix, r: &[f64], q: usize, c: f64) -> Result<Vec<f64>> {
    let n = x.rows();
    if r.len() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "kkt_delta_w",
            left: (1, r.len()),
            right: (x.rows(), x.cols()),
        });
    }
    if q >= n {
        return Err(Error::InvalidConfig(format!(
            "index {q} out of range for n = {n}"
        )));
    }
    let h = x.matmul_nt(x)?;
    let mut a = Matrix::zeros(n + 1, n + 1, Dtype::F64);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 2.0 * h.at(i, j));
        }
    }
    a.set(q, n, 1.0);
    a.set(n, q, 1.0);
    let mut b = vec![0.0; n + 1];
    for i in 0..n {
        b[i] = 2.0 * dot(r, x.row(i));
    }
    b[n] = c;
    let sol = solve_dense(&a, &b)?;
    Ok(sol[..n].to_vec())
}

fn fit_oracle_params(w: &Matrix, cfg: &QuantConfig) -> Result<Option<QuantParams>> {
    cfg.validate()?;
    if cfg.bits == 16 {
        return Ok(None);
    }
    let p = match cfg.clip_search {
        crate::engine::ClipSearch::Minmax => {
            fit_params_minmax(w, cfg.bits, cfg.symmetric, cfg.group_size)?
        }
        crate::engine::ClipSearch::Mse => {
            fit_params_mse(w, cfg.bits, cfg.symmetric, cfg.group_size)?
        }
    };
    Ok(Some(p))
}

#[inline]
fn quant_one(params: &Option<QuantParams>, row: usize, col: usize, w: f64) -> f64 {
    match params {
        Some(p) => p.quant_deq(row, col, w).1,
        None => w,
    }
}

fn check_calib_shapes(w: &Matrix, x: &Matrix, x_tilde: &Matrix) -> Result<()> {
    if x.rows() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "oracle_calibrate",
            left: (w.rows(), w.cols()),
            right: (x.rows(), x.cols()),
        });
    }
    if x_tilde.rows() != x.rows() || x_tilde.cols() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "oracle_calibrate",
            left: (x.rows(), x.cols()),
            right: (x_tilde.rows(), x_tilde.cols()),
        });
    }
    Ok(())
}

/// Greedy minimal-score quantization, independently per row: at each
/// step, score every still-unquantized weight with [`loss_q`] against
/// the row's current residual target — the gap between the original
/// row's output on the full-precision stream and the working row's
/// output on the quantized stream — quantize the cheapest one, apply the
/// closed-form update to the rest, eliminate the index, and re-estimate
/// the gap from scratch. Returns the quantized matrix and each row's
/// processing order.
pub fn greedy_optimal_quantize(
    w: &Matrix,
    x: &Matrix,
    x_tilde: &Matrix,
    cfg: &QuantConfig,
) -> Result<(Matrix, Vec<Vec<usize>>)> {
    check_calib_shapes(w, x, x_tilde)?;
    let n = w.cols();
    if n > GREEDY_MAX_N {
        return Err(Error::SizeCap {
            limit: GREEDY_MAX_N,
            got: n,
        });
    }
    let params = fit_oracle_params(w, cfg)?;
    let hs = build_hessian(x, cfg.damp_ratio)?;
    let hinv0 = spd_inverse(hs.h())?;
    let k = x.cols();

    let mut q_out = Matrix::zeros(w.rows(), n, w.dtype());
    let mut orders = Vec::with_capacity(w.rows());
    for row in 0..w.rows() {
        // Fixed target: the original row through the full-precision
        // stream. Every iteration re-derives the residual as the distance
        // still left to this target.
        let mut target = vec![0.0; k];
        for t in 0..n {
            axpy(w.at(row, t), x_tilde.row(t), &mut target);
        }
        let mut w_cur: Vec<f64> = w.row(row).to_vec();
        let mut hinv = hinv0.clone();
        let mut active: Vec<usize> = (0..n).collect();
        let mut order = Vec::with_capacity(n);
        while !active.is_empty() {
            let mut r = target.clone();
            for t in 0..n {
                axpy(-w_cur[t], x.row(t), &mut r);
            }
            let mut best: Option<(f64, usize, f64)> = None;
            for &q in &active {
                let w_hat = quant_one(&params, row, q, w_cur[q]);
                let score = loss_q_parts(&w_cur, x, &r, &hinv, q, w_hat)?;
                if best.map_or(true, |(s, _, _)| score < s) {
                    best = Some((score, q, w_hat));
                }
            }
            let (_, q, w_hat) = best.unwrap();
            let dw = delta_w_parts(&w_cur, x, &r, &hinv, q, w_hat)?;
            for (t, d) in dw.iter().enumerate() {
                w_cur[t] += d;
            }
            w_cur[q] = w_hat;
            hinv = ge_eliminate(&hinv, q)?;
            active.retain(|&t| t != q);
            order.push(q);
        }
        q_out.row_mut(row).copy_from_slice(&w_cur);
        orders.push(order);
    }
    Ok((q_out, orders))
}

/// Column-by-column calibration with full residual re-estimation: at
/// every column the residual R = W·X̃ − W_cur·X — the current gap between
/// the full-precision layer's output and the working quantized layer's
/// output — is rebuilt from scratch, then each row gets the closed-form
/// update through the iteratively eliminated inverse. With X̃ = X the
/// initial gap is zero and each step's least-squares optimality keeps
/// the later gaps orthogonal to the remaining channels, so the routine
/// degenerates to plain error-propagation quantization. `cfg.mode`,
/// `block_size`, and `act_order` are ignored — columns go first to last.
pub fn naive_engine(
    w: &Matrix,
    x: &Matrix,
    x_tilde: &Matrix,
    cfg: &QuantConfig,
) -> Result<LayerResult> {
    check_calib_shapes(w, x, x_tilde)?;
    let n = w.cols();
    let m = w.rows();
    if n > NAIVE_MAX_N {
        return Err(Error::SizeCap {
            limit: NAIVE_MAX_N,
            got: n,
        });
    }
    let started = Instant::now();
    let params = fit_oracle_params(w, cfg)?;
    let hs = build_hessian(x, cfg.damp_ratio)?;
    let mut hinv = spd_inverse(hs.h())?;
    let target = w.matmul(x_tilde)?;

    let mut w_cur = w.clone();
    for q in 0..n {
        let hqq = checked_pivot(&hinv, q)?;
        let hm = ge_eliminate(&hinv, q)?;
        for row in 0..m {
            // Current gap to the full-precision target, then its Gram
            // with the calibration channels.
            let mut r = target.row(row).to_vec();
            for t in 0..n {
                axpy(-w_cur.at(row, t), x.row(t), &mut r);
            }
            let grx = residual_gram(&r, x);
            let w_hat = quant_one(&params, row, q, w_cur.at(row, q));
            let scale = (w_hat - w_cur.at(row, q)) / hqq;
            for j in 0..n {
                let mut second = 0.0;
                for t in 0..n {
                    second += grx[t] * hm.at(t, j);
                }
                let v = w_cur.at(row, j) + scale * hinv.at(q, j) + second;
                w_cur.set(row, j, v);
            }
            w_cur.set(row, q, w_hat);
        }
        hinv = hm;
    }
    let sym = sym_loss(&w_cur, w, x)?;
    let asym = asym_loss(&w_cur, w, x, x_tilde)?;
    Ok(LayerResult {
        q: w_cur,
        params,
        sym_loss: sym,
        asym_loss: asym,
        elapsed: started.elapsed(),
        perm: None,
    })
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi rotation
/// method, returned in ascending order. Small and self-contained; used
/// for conditioning checks on desk-scale matrices.
pub fn sym_eigenvalues_jacobi(a: &Matrix) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "sym_eigenvalues_jacobi",
            left: (a.rows(), a.cols()),
            right: (a.cols(), a.rows()),
        });
    }
    for i in 0..n {
        for j in 0..i {
            let (u, v) = (a.at(i, j), a.at(j, i));
            if (u - v).abs() > 1e-9 * u.abs().max(v.abs()).max(1.0) {
                return Err(Error::DegenerateInput(format!(
                    "matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let mut m = a.clone();
    let scale = (0..n).map(|i| m.at(i, i).abs()).fold(1.0f64, f64::max);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                off = off.max(m.at(i, j).abs());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let (app, aqq) = (m.at(p, p), m.at(q, q));
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (aip, aiq) = (m.at(i, p), m.at(i, q));
                    m.set(i, p, c * aip - s * aiq);
                    m.set(i, q, s * aip + c * aiq);
                }
                for i in 0..n {
                    let (api, aqi) = (m.at(p, i), m.at(q, i));
                    m.set(p, i, c * api - s * aqi);
                    m.set(q, i, s * api + c * aqi);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{calibrate_layer, Mode};
    use crate::tensor::{gen_correlated, Seed};

    fn random_problem(seed: u64, n: usize, k: usize) -> SingleRowProblem {
        let w: Vec<f64> = Seed(seed).stream(1).normal_matrix(1, n, Dtype::F64).row(0).to_vec();
        let x = Seed(seed).stream(2).normal_matrix(n, k, Dtype::F64);
        let xt_noise = {
            let mut nz = Seed(seed).stream(3).normal_matrix(n, k, Dtype::F64);
            nz.scale(0.05);
            nz
        };
        let mut xt = x.clone();
        xt.add_assign(&xt_noise).unwrap();
        // Undamped Gram inverse: with k >> n the instance is solidly PD,
        // and the closed form then minimizes the plain least-squares
        // objective the plug-in check evaluates.
        let h = x.matmul_nt(&x).unwrap();
        let hinv = spd_inverse(&h).unwrap();
        SingleRowProblem::new(&w, &x, &xt, hinv).unwrap()
    }

    fn layer_instance(seed: u64, m: usize, n: usize, k: usize) -> (Matrix, Matrix, Matrix) {
        let w = Seed(seed).stream(1).normal_matrix(m, n, Dtype::F64);
        let x = gen_correlated(Seed(seed ^ 0xbeef), n, k, 0.5).unwrap();
        let mut noise = Seed(seed ^ 0x77).stream(4).normal_matrix(n, k, Dtype::F64);
        noise.scale(0.04);
        let mut xt = x.clone();
        xt.add_assign(&noise).unwrap();
        (w, x, xt)
    }

    fn small_cfg() -> QuantConfig {
        QuantConfig {
            bits: 4,
            block_size: 4,
            ..QuantConfig::default()
        }
    }

    #[test]
    fn zero_residual_reduces_to_per_weight_update() {
        let p0 = random_problem(17, 6, 48);
        let p = SingleRowProblem::with_residual(
            p0.w().to_vec(),
            p0.x.clone(),
            vec![0.0; p0.x.cols()],
            p0.hinv.clone(),
        )
        .unwrap();
        let q = 2;
        let w_hat = p.w()[q] + 0.37;
        let dw = optimal_delta_w(&p, q, w_hat).unwrap();
        let scale = (w_hat - p.w()[q]) / p.hinv().at(q, q);
        for j in 0..p.n() {
            assert_eq!(dw[j], scale * p.hinv().at(q, j), "component {j}");
        }
        // And with the pinned value equal to the current one, nothing moves.
        let dw0 = optimal_delta_w(&p, q, p.w()[q]).unwrap();
        assert!(dw0.iter().all(|&d| d == 0.0));
        let score = loss_q(&p, q, w_hat).unwrap();
        let direct = (w_hat - p.w()[q]).powi(2) / p.hinv().at(q, q);
        assert!((score - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn constraint_is_satisfied() {
        for seed in 0..20 {
            let p = random_problem(seed, 6, 40);
            let q = (seed as usize) % 6;
            let w_hat = p.w()[q] * 0.5 + 0.1;
            let dw = optimal_delta_w(&p, q, w_hat).unwrap();
            assert!(
                (dw[q] - (w_hat - p.w()[q])).abs() <= 1e-10,
                "seed {seed}: constraint violated by {}",
                (dw[q] - (w_hat - p.w()[q])).abs()
            );
        }
    }

    #[test]
    fn closed_form_matches_dense_kkt() {
        let p = random_problem(6, 6, 40);
        let q = 3;
        let w_hat = p.w()[q] + 0.21;
        let dw = optimal_delta_w(&p, q, w_hat).unwrap();
        let kkt = kkt_delta_w(&p.x, p.r(), q, w_hat - p.w()[q]).unwrap();
        for j in 0..6 {
            assert!(
                (dw[j] - kkt[j]).abs() <= 1e-8,
                "component {j}: {} vs {}",
                dw[j],
                kkt[j]
            );
        }
        // Stationarity: the gradient 2ΔwH − 2rXᵀ may only point along e_q.
        let h = p.x.matmul_nt(&p.x).unwrap();
        for j in 0..6 {
            if j == q {
                continue;
            }
            let mut g = 0.0;
            for t in 0..6 {
                g += 2.0 * dw[t] * h.at(t, j);
            }
            g -= 2.0 * dot(p.r(), p.x.row(j));
            assert!(g.abs() <= 1e-8, "gradient component {j} = {g}");
        }
    }

    #[test]
    fn closed_form_loss_matches_plug_in() {
        for seed in 0..20 {
            let p = random_problem(100 + seed, 5, 35);
            let q = (seed as usize) % 5;
            let w_hat = p.w()[q] - 0.3;
            let dw = optimal_delta_w(&p, q, w_hat).unwrap();
            // ‖Δw·X − r‖² evaluated directly.
            let mut plug = 0.0;
            for s in 0..p.x.cols() {
                let mut v = -p.r()[s];
                for t in 0..p.n() {
                    v += dw[t] * p.x.at(t, s);
                }
                plug += v * v;
            }
            let closed = loss_q(&p, q, w_hat).unwrap();
            assert!(
                (closed - plug).abs() <= 1e-8 * plug.max(1.0),
                "seed {seed}: closed {closed} vs plug-in {plug}"
            );
        }
    }

    #[test]
    fn unchanged_weight_loss_is_residual_absorption_gap() {
        let p = random_problem(55, 6, 44);
        let q = 4;
        let closed = loss_q(&p, q, p.w()[q]).unwrap();
        assert!(closed >= -1e-10, "loss {closed} negative");
        let dw = optimal_delta_w(&p, q, p.w()[q]).unwrap();
        let mut plug = 0.0;
        for s in 0..p.x.cols() {
            let mut v = -p.r()[s];
            for t in 0..p.n() {
                v += dw[t] * p.x.at(t, s);
            }
            plug += v * v;
        }
        assert!((closed - plug).abs() <= 1e-8 * plug.max(1.0));
    }

    #[test]
    fn eliminated_pivot_is_rejected() {
        let p = random_problem(8, 5, 30);
        let hm = ge_eliminate(p.hinv(), 2).unwrap();
        let p2 = SingleRowProblem::with_residual(
            p.w().to_vec(),
            p.x.clone(),
            p.r().to_vec(),
            hm,
        )
        .unwrap();
        match loss_q(&p2, 2, 0.0) {
            Err(Error::ZeroPivot { index: 2 }) => {}
            other => panic!("expected zero-pivot error, got {other:?}"),
        }
    }

    #[test]
    fn repeated_elimination_keeps_exact_zeros() {
        let p = random_problem(9, 8, 50);
        let mut hinv = p.hinv().clone();
        let order = [3usize, 0, 5, 7];
        for (step, &q) in order.iter().enumerate() {
            hinv = ge_eliminate(&hinv, q).unwrap();
            for &done in &order[..=step] {
                for j in 0..8 {
                    assert_eq!(hinv.at(done, j), 0.0, "row {done} col {j}");
                    assert_eq!(hinv.at(j, done), 0.0, "col {done} row {j}");
                }
            }
        }
    }

    #[test]
    fn solve_dense_roundtrip_and_singular() {
        let a = Seed(12).stream(0).normal_matrix(7, 7, Dtype::F64);
        let truth: Vec<f64> = (0..7).map(|i| (i as f64) - 3.0).collect();
        let mut b = vec![0.0; 7];
        for i in 0..7 {
            b[i] = dot(a.row(i), &truth);
        }
        let got = solve_dense(&a, &b).unwrap();
        for i in 0..7 {
            assert!((got[i] - truth[i]).abs() <= 1e-9, "component {i}");
        }
        let mut sing = Matrix::zeros(3, 3, Dtype::F64);
        sing.set(0, 0, 1.0);
        sing.set(1, 1, 1.0);
        match solve_dense(&sing, &[1.0, 1.0, 1.0]) {
            Err(Error::ZeroPivot { .. }) => {}
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn greedy_single_weight_is_plain_rounding() {
        let w = Matrix::from_vec(1, 1, Dtype::F64, vec![0.83]).unwrap();
        let x = Seed(2).stream(0).normal_matrix(1, 16, Dtype::F64);
        let (q, orders) = greedy_optimal_quantize(&w, &x, &x, &small_cfg()).unwrap();
        assert_eq!(orders, vec![vec![0]]);
        let params = fit_params_minmax(&w, 4, false, None).unwrap();
        assert_eq!(q.at(0, 0), params.quant_deq(0, 0, 0.83).1);
    }

    #[test]
    fn greedy_two_weights_picks_minimal_score_first() {
        let w = Matrix::from_vec(1, 2, Dtype::F64, vec![0.31, -0.92]).unwrap();
        let x = gen_correlated(Seed(5), 2, 24, 0.4).unwrap();
        let cfg = small_cfg();
        let (q, orders) = greedy_optimal_quantize(&w, &x, &x, &cfg).unwrap();
        // Recompute both initial scores by hand; the trace must start with
        // the cheaper index.
        let hs = build_hessian(&x, cfg.damp_ratio).unwrap();
        let hinv = spd_inverse(hs.h()).unwrap();
        let params = fit_params_minmax(&w, 4, false, None).unwrap();
        let p = SingleRowProblem::with_residual(
            vec![0.31, -0.92],
            x.clone(),
            vec![0.0; 24],
            hinv,
        )
        .unwrap();
        let mut scores = [0.0; 2];
        for q_idx in 0..2 {
            let w_hat = params.quant_deq(0, q_idx, p.w()[q_idx]).1;
            scores[q_idx] = loss_q(&p, q_idx, w_hat).unwrap();
        }
        let first = if scores[0] <= scores[1] { 0 } else { 1 };
        assert_eq!(orders[0][0], first);
        // Both outputs sit on their own grid.
        for c in 0..2 {
            let (_, again) = params.quant_deq(0, c, q.at(0, c));
            assert_eq!(again, q.at(0, c));
        }
    }

    #[test]
    fn greedy_order_no_worse_than_first_to_last_on_seed9() {
        let (w, x, xt) = layer_instance(9, 2, 8, 48);
        let cfg = small_cfg();
        let (gq, _) = greedy_optimal_quantize(&w, &x, &xt, &cfg).unwrap();
        let naive = naive_engine(&w, &x, &xt, &cfg).unwrap();
        let greedy_loss = asym_loss(&gq, &w, &x, &xt).unwrap();
        assert!(
            greedy_loss <= naive.asym_loss,
            "greedy {greedy_loss} vs naive {}",
            naive.asym_loss
        );
    }

    #[test]
    fn greedy_size_cap() {
        let (w, x, xt) = layer_instance(1, 1, 17, 20);
        match greedy_optimal_quantize(&w, &x, &xt, &small_cfg()) {
            Err(Error::SizeCap { limit: 16, got: 17 }) => {}
            other => panic!("expected size-cap error, got {other:?}"),
        }
    }

    #[test]
    fn naive_size_cap() {
        let (w, x, xt) = layer_instance(1, 1, 65, 70);
        match naive_engine(&w, &x, &xt, &small_cfg()) {
            Err(Error::SizeCap { limit: 64, got: 65 }) => {}
            other => panic!("expected size-cap error, got {other:?}"),
        }
    }

    #[test]
    fn naive_with_identical_streams_matches_engine_gptq() {
        let (w, x, _) = layer_instance(5, 4, 8, 32);
        let cfg = QuantConfig {
            mode: Mode::Gptq,
            ..small_cfg()
        };
        let fast = calibrate_layer(&w, &x, &x, &cfg).unwrap();
        let slow = naive_engine(&w, &x, &x, &cfg).unwrap();
        let diff = fast.q.max_abs_diff(&slow.q).unwrap();
        assert!(diff <= 1e-9, "max diff {diff}");
    }

    #[test]
    fn naive_seed5_beats_plain_rounding() {
        let (w, x, xt) = layer_instance(5, 4, 8, 32);
        let naive = naive_engine(&w, &x, &xt, &small_cfg()).unwrap();
        assert!(naive.asym_loss.is_finite());
        let rtn = calibrate_layer(
            &w,
            &x,
            &xt,
            &QuantConfig {
                mode: Mode::Rtn,
                ..small_cfg()
            },
        )
        .unwrap();
        assert!(
            naive.asym_loss <= rtn.asym_loss,
            "naive {} vs rtn {}",
            naive.asym_loss,
            rtn.asym_loss
        );
    }

    #[test]
    fn fast_engine_loss_within_2x_of_naive() {
        let (w, x, xt) = layer_instance(5, 4, 8, 32);
        let cfg = small_cfg();
        let fast = calibrate_layer(&w, &x, &xt, &cfg).unwrap();
        let slow = naive_engine(&w, &x, &xt, &cfg).unwrap();
        assert!(
            fast.asym_loss <= 2.0 * slow.asym_loss,
            "fast {} vs naive {}",
            fast.asym_loss,
            slow.asym_loss
        );
    }

    #[test]
    fn jacobi_eigenvalues_known_cases() {
        let mut d = Matrix::zeros(4, 4, Dtype::F64);
        for (i, v) in [3.0, -1.0, 7.0, 0.5].iter().enumerate() {
            d.set(i, i, *v);
        }
        let eig = sym_eigenvalues_jacobi(&d).unwrap();
        assert_eq!(eig, vec![-1.0, 0.5, 3.0, 7.0]);
        let a = Matrix::from_vec(2, 2, Dtype::F64, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = sym_eigenvalues_jacobi(&a).unwrap();
        assert!((e[0] - 1.0).abs() <= 1e-12 && (e[1] - 3.0).abs() <= 1e-12);
        // Spectrum is rotation-invariant: conjugate by a Givens rotation.
        let (c, s) = (0.6, 0.8);
        let g = Matrix::from_vec(2, 2, Dtype::F64, vec![c, -s, s, c]).unwrap();
        let rot = g.matmul(&a).unwrap().matmul_nt(&g).unwrap();
        let er = sym_eigenvalues_jacobi(&rot).unwrap();
        assert!((er[0] - 1.0).abs() <= 1e-10 && (er[1] - 3.0).abs() <= 1e-10);
    }
}
