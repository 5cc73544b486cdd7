//! Uniform affine quantization grids.
//!
//! Weights quantize per output channel or per group within a channel,
//! symmetric or asymmetric, with an optional clip search that shrinks the
//! fitted range to minimize squared reconstruction error. Activations
//! quantize per token (column) with a fixed clip ratio. Everything here is
//! simulated quantization: values are rounded onto the grid and
//! immediately dequantized back to real arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Matrix};

/// Smallest representable scale; ranges narrower than this (constant-zero
/// channels, empty tokens) are floored instead of dividing by zero.
pub const SCALE_FLOOR: f64 = 1e-12;

/// Shrink candidates for the MSE clip search: 1.00 down to 0.20 in steps
/// of 0.01, evaluated in that order so ties resolve toward the larger
/// factor.
pub const SHRINK_GRID_LEN: usize = 81;

fn shrink_candidates() -> impl Iterator<Item = f64> {
    (0..SHRINK_GRID_LEN).map(|i| 1.0 - 0.01 * i as f64)
}

/// Fitted grid for one weight matrix.
///
/// `scale` (and `zero` when asymmetric) hold one entry per channel-group
/// in row-major order: row r, group g at index `r * groups_per_row + g`.
/// The zero point is kept in real precision rather than rounded to an
/// integer so that both endpoints of the fitted range dequantize exactly;
/// it always lies inside `[0, 2^bits - 1]` because the fitted range is
/// widened to include zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    bits: u32,
    symmetric: bool,
    group_size: Option<usize>,
    rows: usize,
    cols: usize,
    scale: Vec<f64>,
    zero: Option<Vec<f64>>,
    /// True when at least one channel/group had a degenerate range and
    /// received the floored scale.
    floored: bool,
}

impl QuantParams {
    /// Validated assembly from raw parts, used by tests and by report
    /// deserialization checks.
    pub fn from_parts(
        bits: u32,
        symmetric: bool,
        group_size: Option<usize>,
        rows: usize,
        cols: usize,
        scale: Vec<f64>,
        zero: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_bits(bits)?;
        let gs = effective_group_size(cols, group_size)?;
        let expect = rows * (cols / gs);
        if scale.len() != expect {
            return Err(Error::InvalidConfig(format!(
                "scale has {} entries, expected {expect}",
                scale.len()
            )));
        }
        if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("scale must be positive".into()));
        }
        match (&zero, symmetric) {
            (Some(z), false) => {
                if z.len() != expect {
                    return Err(Error::InvalidConfig(format!(
                        "zero has {} entries, expected {expect}",
                        z.len()
                    )));
                }
                let hi = ((1u64 << bits) - 1) as f64;
                if z.iter().any(|&v| !(0.0..=hi).contains(&v)) {
                    return Err(Error::InvalidConfig(
                        "zero point outside the integer range of the bit-width".into(),
                    ));
                }
            }
            (None, true) => {}
            (Some(_), true) => {
                return Err(Error::InvalidConfig(
                    "symmetric grid carries no zero point".into(),
                ))
            }
            (None, false) => {
                return Err(Error::InvalidConfig(
                    "asymmetric grid requires a zero point".into(),
                ))
            }
        }
        Ok(QuantParams {
            bits,
            symmetric,
            group_size,
            rows,
            cols,
            scale,
            zero,
            floored: false,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn group_size(&self) -> Option<usize> {
        self.group_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scales(&self) -> &[f64] {
        &self.scale
    }

    pub fn zeros(&self) -> Option<&[f64]> {
        self.zero.as_deref()
    }

    pub fn floored(&self) -> bool {
        self.floored
    }

    pub fn groups_per_row(&self) -> usize {
        self.cols / self.group_size.unwrap_or(self.cols)
    }

    fn group_index(&self, row: usize, col: usize) -> usize {
        let gs = self.group_size.unwrap_or(self.cols);
        row * self.groups_per_row() + col / gs
    }

    /// Integer clamp bounds of the grid.
    pub fn grid_bounds(&self) -> (f64, f64) {
        grid_bounds(self.bits, self.symmetric)
    }

    /// Rounds one entry onto the grid: returns (integer level, dequantized
    /// value).
    pub fn quant_deq(&self, row: usize, col: usize, w: f64) -> (f64, f64) {
        let g = self.group_index(row, col);
        let s = self.scale[g];
        let z = self.zero.as_ref().map_or(0.0, |z| z[g]);
        let (lo, hi) = self.grid_bounds();
        quant_deq_value(w, s, z, lo, hi)
    }
}

/// Per-token activation grid settings. `clip_ratio` shrinks each token's
/// observed range before fitting; quantization is skipped entirely when
/// disabled or at 16 bits and wider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuantConfig {
    pub bits: u32,
    pub clip_ratio: f64,
    pub enabled: bool,
}

impl Default for ActQuantConfig {
    fn default() -> Self {
        ActQuantConfig {
            bits: 8,
            clip_ratio: 0.9,
            enabled: false,
        }
    }
}

impl ActQuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.bits < 16 {
            check_bits(self.bits)?;
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_ratio must lie in (0, 1], got {}",
                self.clip_ratio
            )));
        }
        Ok(())
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if matches!(bits, 2 | 3 | 4 | 8) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "unsupported bit-width {bits}; expected 2, 3, 4 or 8"
        )))
    }
}

fn effective_group_size(cols: usize, group_size: Option<usize>) -> Result<usize> {
    match group_size {
        None => Ok(cols),
        Some(0) => Err(Error::InvalidConfig("group_size must be positive".into())),
        Some(gs) => {
            if cols % gs != 0 {
                Err(Error::InvalidConfig(format!(
                    "group_size {gs} does not divide channel length {cols}"
                )))
            } else {
                Ok(gs)
            }
        }
    }
}

/// Integer clamp bounds: [0, 2^b - 1] asymmetric, [-2^(b-1), 2^(b-1) - 1]
/// symmetric.
fn grid_bounds(bits: u32, symmetric: bool) -> (f64, f64) {
    if symmetric {
        let half = 1i64 << (bits - 1);
        (-(half as f64), (half - 1) as f64)
    } else {
        (0.0, ((1u64 << bits) - 1) as f64)
    }
}

/// clamp(round(w/scale + zero)) and its dequantization. `f64::round` is
/// round-half-away-from-zero, the fixed rounding mode of the grid.
#[inline]
fn quant_deq_value(w: f64, scale: f64, zero: f64, lo: f64, hi: f64) -> (f64, f64) {
    let q = (w / scale + zero).round().clamp(lo, hi);
    (q, (q - zero) * scale)
}

/// Scale/zero for one channel-group from its observed range. Asymmetric
/// ranges are widened to include zero so the zero point stays inside the
/// integer range; `shrink` scales both endpoints (the clip-search knob).
fn fit_range(mn: f64, mx: f64, bits: u32, symmetric: bool, shrink: f64) -> (f64, f64, bool) {
    if symmetric {
        let top = ((1i64 << (bits - 1)) - 1) as f64;
        let absmax = mn.abs().max(mx.abs()) * shrink;
        if absmax < SCALE_FLOOR * top {
            (SCALE_FLOOR, 0.0, true)
        } else {
            (absmax / top, 0.0, false)
        }
    } else {
        let lo = (mn * shrink).min(0.0);
        let hi = (mx * shrink).max(0.0);
        let top = ((1u64 << bits) - 1) as f64;
        if hi - lo < SCALE_FLOOR * top {
            (SCALE_FLOOR, 0.0, true)
        } else {
            let scale = (hi - lo) / top;
            // -lo/scale can land one ulp past `top` when hi == 0; keep the
            // zero point inside the integer range.
            (scale, (-lo / scale).clamp(0.0, top), false)
        }
    }
}

fn group_min_max(vals: &[f64]) -> (f64, f64) {
    let mut mn = f64::INFINITY;
    let mut mx = f64::NEG_INFINITY;
    for &v in vals {
        mn = mn.min(v);
        mx = mx.max(v);
    }
    (mn, mx)
}

fn group_sq_err(vals: &[f64], scale: f64, zero: f64, lo: f64, hi: f64) -> f64 {
    let mut acc = 0.0;
    for &v in vals {
        let (_, deq) = quant_deq_value(v, scale, zero, lo, hi);
        let d = v - deq;
        acc += d * d;
    }
    acc
}

fn fit_impl(
    w: &Matrix,
    bits: u32,
    symmetric: bool,
    group_size: Option<usize>,
    search: bool,
) -> Result<QuantParams> {
    check_bits(bits)?;
    let (rows, cols) = (w.rows(), w.cols());
    let gs = effective_group_size(cols, group_size)?;
    let groups_per_row = cols / gs;
    let (lo, hi) = grid_bounds(bits, symmetric);
    let mut scale = Vec::with_capacity(rows * groups_per_row);
    let mut zero = if symmetric {
        None
    } else {
        Some(Vec::with_capacity(rows * groups_per_row))
    };
    let mut floored = false;
    for r in 0..rows {
        let row = w.row(r);
        for g in 0..groups_per_row {
            let vals = &row[g * gs..(g + 1) * gs];
            let (mn, mx) = group_min_max(vals);
            let (mut s, mut z, fl) = fit_range(mn, mx, bits, symmetric, 1.0);
            if search && !fl {
                let mut best = group_sq_err(vals, s, z, lo, hi);
                for shrink in shrink_candidates().skip(1) {
                    let (cs, cz, cfl) = fit_range(mn, mx, bits, symmetric, shrink);
                    if cfl {
                        break;
                    }
                    let err = group_sq_err(vals, cs, cz, lo, hi);
                    if err < best {
                        best = err;
                        s = cs;
                        z = cz;
                    }
                }
            }
            floored |= fl;
            scale.push(s);
            if let Some(zv) = zero.as_mut() {
                zv.push(z);
            }
        }
    }
    Ok(QuantParams {
        bits,
        symmetric,
        group_size,
        rows,
        cols,
        scale,
        zero,
        floored,
    })
}

/// Grid fit from the raw min/max of each channel (or group within a
/// channel). Channels whose range collapses to a point at zero get the
/// floored scale and raise the params' warning flag.
pub fn fit_params_minmax(
    w: &Matrix,
    bits: u32,
    symmetric: bool,
    group_size: Option<usize>,
) -> Result<QuantParams> {
    fit_impl(w, bits, symmetric, group_size, false)
}

/// Grid fit with a clip search: every shrink factor in the candidate grid
/// is applied to the min/max range and the one with the smallest squared
/// reconstruction error wins, ties broken toward the larger factor. The
/// full-range candidate is in the grid, so this never does worse than
/// [`fit_params_minmax`].
pub fn fit_params_mse(
    w: &Matrix,
    bits: u32,
    symmetric: bool,
    group_size: Option<usize>,
) -> Result<QuantParams> {
    fit_impl(w, bits, symmetric, group_size, true)
}

/// Rounds a whole matrix onto the fitted grid. Returns the integer levels
/// and the dequantized values, both as matrices of the input shape.
pub fn quantize_rtn(w: &Matrix, p: &QuantParams) -> Result<(Matrix, Matrix)> {
    if w.rows() != p.rows || w.cols() != p.cols {
        return Err(Error::ShapeMismatch {
            op: "quantize_rtn",
            left: (w.rows(), w.cols()),
            right: (p.rows, p.cols),
        });
    }
    let mut q = Matrix::zeros(w.rows(), w.cols(), Dtype::F64);
    let mut deq = Matrix::zeros(w.rows(), w.cols(), w.dtype());
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let (qi, wh) = p.quant_deq(r, c, w.at(r, c));
            q.set(r, c, qi);
            deq.set(r, c, wh);
        }
    }
    Ok((q, deq))
}

/// Per-token simulated quantization of an activation matrix (channels ×
/// tokens). Each column's range is `clip_ratio × [min, max]`, fitted
/// asymmetric at `cfg.bits`; values beyond the clipped range clamp to the
/// grid edge. Disabled configs and bit-widths of 16 or more pass the
/// input through untouched.
pub fn quantize_activations(x: &Matrix, cfg: &ActQuantConfig) -> Result<Matrix> {
    cfg.validate()?;
    if !cfg.enabled || cfg.bits >= 16 {
        return Ok(x.clone());
    }
    let (lo, hi) = grid_bounds(cfg.bits, false);
    let mut out = x.clone();
    let (n, k) = (x.rows(), x.cols());
    for t in 0..k {
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        for r in 0..n {
            let v = x.at(r, t);
            mn = mn.min(v);
            mx = mx.max(v);
        }
        let clo = mn * cfg.clip_ratio;
        let chi = mx * cfg.clip_ratio;
        let (scale, zero) = if chi - clo < SCALE_FLOOR * hi {
            (SCALE_FLOOR, -clo / SCALE_FLOOR)
        } else {
            let s = (chi - clo) / hi;
            (s, -clo / s)
        };
        for r in 0..n {
            let (_, deq) = quant_deq_value(x.at(r, t), scale, zero, lo, hi);
            out.set(r, t, deq);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Seed;
    use proptest::prelude::*;

    fn row(vals: &[f64]) -> Matrix {
        Matrix::from_vec(1, vals.len(), Dtype::F64, vals.to_vec()).unwrap()
    }

    fn column(vals: Vec<f64>) -> Matrix {
        let n = vals.len();
        Matrix::from_vec(n, 1, Dtype::F64, vals).unwrap()
    }

    #[test]
    fn minmax_asymmetric_covers_endpoints_exactly() {
        let w = row(&[-1.0, -0.3, 0.2, 1.0]);
        let p = fit_params_minmax(&w, 4, false, None).unwrap();
        assert_eq!(p.scales().len(), 1);
        assert!((p.scales()[0] - 2.0 / 15.0).abs() < 1e-15);
        let (q, deq) = quantize_rtn(&w, &p).unwrap();
        assert_eq!(deq.at(0, 0), -1.0);
        assert_eq!(deq.at(0, 3), 1.0);
        assert_eq!(q.at(0, 0), 0.0);
        assert_eq!(q.at(0, 3), 15.0);
    }

    #[test]
    fn on_grid_channel_is_exact() {
        let scale = 0.25;
        let w = row(&[0.0, scale, 3.0 * scale, 15.0 * scale]);
        let p = fit_params_minmax(&w, 4, false, None).unwrap();
        let (_, deq) = quantize_rtn(&w, &p).unwrap();
        for c in 0..4 {
            assert_eq!(deq.at(0, c), w.at(0, c), "column {c}");
        }
    }

    #[test]
    fn half_step_error_bound_randomized() {
        let w = Seed(41).stream(0).normal_matrix(8, 64, Dtype::F64);
        for &(bits, sym) in &[(2u32, false), (3, true), (4, false), (8, true)] {
            let p = fit_params_minmax(&w, bits, sym, None).unwrap();
            let (_, deq) = quantize_rtn(&w, &p).unwrap();
            for r in 0..8 {
                for c in 0..64 {
                    let err = (w.at(r, c) - deq.at(r, c)).abs();
                    let s = p.scales()[r];
                    assert!(
                        err <= s / 2.0 + 1e-12,
                        "bits={bits} sym={sym} ({r},{c}): err {err} > {}",
                        s / 2.0
                    );
                }
            }
        }
    }

    #[test]
    fn mse_search_beats_minmax_on_outlier_channel() {
        // 64 grid-limited inliers and one far outlier: trimming the range
        // trades a quadratic clamp loss on the outlier for a linear
        // rounding gain across the inliers, so a shrink < 1 must win.
        let mut rng = Seed(23).stream(0);
        let mut vals: Vec<f64> = (0..64).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
        vals.push(10.0);
        let w = row(&vals);
        let pm = fit_params_minmax(&w, 4, false, None).unwrap();
        let ps = fit_params_mse(&w, 4, false, None).unwrap();
        assert!(ps.scales()[0] < pm.scales()[0]);
        let (_, dm) = quantize_rtn(&w, &pm).unwrap();
        let (_, ds) = quantize_rtn(&w, &ps).unwrap();
        let err = |d: &Matrix| -> f64 {
            (0..w.cols())
                .map(|c| (w.at(0, c) - d.at(0, c)).powi(2))
                .sum()
        };
        assert!(err(&ds) < err(&dm));
    }

    #[test]
    fn mse_search_keeps_full_range_when_already_exact() {
        let scale = 0.5;
        let vals: Vec<f64> = (0..16).map(|k| k as f64 * scale).collect();
        let w = row(&vals);
        let pm = fit_params_minmax(&w, 4, false, None).unwrap();
        let ps = fit_params_mse(&w, 4, false, None).unwrap();
        assert_eq!(ps.scales()[0], pm.scales()[0]);
        assert_eq!(ps.zeros().unwrap()[0], pm.zeros().unwrap()[0]);
    }

    #[test]
    fn all_equal_channel_symmetric_is_exact() {
        for v in [0.7, -1.3] {
            let w = row(&[v; 6]);
            let p = fit_params_minmax(&w, 4, true, None).unwrap();
            let (_, deq) = quantize_rtn(&w, &p).unwrap();
            for c in 0..6 {
                assert!((deq.at(0, c) - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rtn_rounds_half_away_and_clamps() {
        let p = QuantParams::from_parts(4, true, None, 1, 4, vec![1.0], None).unwrap();
        let w = row(&[3.4, 100.0, -2.5, -100.0]);
        let (q, deq) = quantize_rtn(&w, &p).unwrap();
        assert_eq!(q.at(0, 0), 3.0);
        assert_eq!(q.at(0, 1), 7.0);
        assert_eq!(q.at(0, 2), -3.0);
        assert_eq!(q.at(0, 3), -8.0);
        assert_eq!(deq.at(0, 1), 7.0);
    }

    #[test]
    fn quantization_is_idempotent() {
        let w = Seed(7).stream(1).normal_matrix(4, 32, Dtype::F64);
        let p = fit_params_mse(&w, 3, false, Some(8)).unwrap();
        let (q1, h1) = quantize_rtn(&w, &p).unwrap();
        let (q2, h2) = quantize_rtn(&h1, &p).unwrap();
        assert_eq!(q1.data(), q2.data());
        assert_eq!(h1.data(), h2.data());
    }

    #[test]
    fn constant_zero_channel_floors_scale() {
        let mut w = Seed(9).stream(0).normal_matrix(3, 8, Dtype::F64);
        w.row_mut(1).fill(0.0);
        let p = fit_params_minmax(&w, 4, false, None).unwrap();
        assert!(p.floored());
        assert_eq!(p.scales()[1], SCALE_FLOOR);
        let (_, deq) = quantize_rtn(&w, &p).unwrap();
        for c in 0..8 {
            assert_eq!(deq.at(1, c), 0.0);
        }
    }

    #[test]
    fn per_group_with_full_width_matches_per_channel() {
        let w = Seed(13).stream(2).normal_matrix(5, 24, Dtype::F64);
        let a = fit_params_mse(&w, 4, false, Some(24)).unwrap();
        let b = fit_params_mse(&w, 4, false, None).unwrap();
        assert_eq!(a.scales(), b.scales());
        assert_eq!(a.zeros(), b.zeros());
        let (_, ha) = quantize_rtn(&w, &a).unwrap();
        let (_, hb) = quantize_rtn(&w, &b).unwrap();
        assert_eq!(ha.data(), hb.data());
    }

    #[test]
    fn group_size_must_divide() {
        let w = Seed(1).stream(0).normal_matrix(2, 10, Dtype::F64);
        assert!(matches!(
            fit_params_minmax(&w, 4, false, Some(3)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn activations_on_grid_token_unchanged_at_full_clip() {
        let scale = 0.125;
        let vals: Vec<f64> = (0..16).map(|k| (k as f64 - 4.0) * scale).collect();
        let x = column(vals);
        let cfg = ActQuantConfig {
            bits: 4,
            clip_ratio: 1.0,
            enabled: true,
        };
        let y = quantize_activations(&x, &cfg).unwrap();
        for r in 0..16 {
            assert!((y.at(r, 0) - x.at(r, 0)).abs() < 1e-12, "row {r}");
        }
    }

    #[test]
    fn activations_zero_token_unchanged() {
        let mut x = Seed(5).stream(3).normal_matrix(6, 4, Dtype::F64);
        for r in 0..6 {
            x.set(r, 2, 0.0);
        }
        let cfg = ActQuantConfig {
            bits: 4,
            clip_ratio: 0.9,
            enabled: true,
        };
        let y = quantize_activations(&x, &cfg).unwrap();
        for r in 0..6 {
            assert_eq!(y.at(r, 2), 0.0);
        }
    }

    #[test]
    fn activations_clip_ratio_clamps_tails() {
        let vals: Vec<f64> = (0..21).map(|k| k as f64 - 10.0).collect();
        let x = column(vals);
        let cfg = ActQuantConfig {
            bits: 4,
            clip_ratio: 0.9,
            enabled: true,
        };
        let y = quantize_activations(&x, &cfg).unwrap();
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        for r in 0..21 {
            mn = mn.min(y.at(r, 0));
            mx = mx.max(y.at(r, 0));
        }
        assert!((mn + 9.0).abs() < 1e-12);
        assert!((mx - 9.0).abs() < 1e-12);
        assert_eq!(y.at(0, 0), -9.0);
        assert_eq!(y.at(20, 0), 9.0);
    }

    #[test]
    fn activations_disabled_or_wide_pass_through() {
        let x = Seed(2).stream(0).normal_matrix(4, 4, Dtype::F64);
        let off = ActQuantConfig {
            enabled: false,
            ..ActQuantConfig::default()
        };
        assert_eq!(quantize_activations(&x, &off).unwrap().data(), x.data());
        let wide = ActQuantConfig {
            bits: 16,
            clip_ratio: 0.9,
            enabled: true,
        };
        assert_eq!(quantize_activations(&x, &wide).unwrap().data(), x.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn grid_membership_and_mse_dominance(
            seed in 1u64..1_000_000,
            bits in prop::sample::select(vec![2u32, 3, 4, 8]),
            sym in any::<bool>(),
            gs in prop::sample::select(vec![None, Some(8usize), Some(16)]),
        ) {
            let w = Seed(seed).stream(4).normal_matrix(3, 16, Dtype::F64);
            let pm = fit_params_minmax(&w, bits, sym, gs).unwrap();
            let ps = fit_params_mse(&w, bits, sym, gs).unwrap();
            let (_, hm) = quantize_rtn(&w, &pm).unwrap();
            let (_, hs) = quantize_rtn(&w, &ps).unwrap();
            let gpr = pm.groups_per_row();
            let width = 16 / gpr;
            for r in 0..3 {
                for g in 0..gpr {
                    let idx = r * gpr + g;
                    let mut em = 0.0;
                    let mut es = 0.0;
                    for c in g * width..(g + 1) * width {
                        for (d, p) in [(&hm, &pm), (&hs, &ps)] {
                            let z = p.zeros().map_or(0.0, |z| z[idx]);
                            let lvl = d.at(r, c) / p.scales()[idx] + z;
                            prop_assert!(
                                (lvl - lvl.round()).abs() < 1e-9,
                                "off-grid at ({r},{c}): lvl {lvl}"
                            );
                        }
                        em += (w.at(r, c) - hm.at(r, c)).powi(2);
                        es += (w.at(r, c) - hs.at(r, c)).powi(2);
                    }
                    prop_assert!(es <= em + 1e-12, "group ({r},{g}): mse {es} > minmax {em}");
                }
            }
            if let Some(z) = ps.zeros() {
                let hi = ((1u64 << bits) - 1) as f64;
                prop_assert!(z.iter().all(|&v| (0.0..=hi).contains(&v)));
            }
        }
    }
}
