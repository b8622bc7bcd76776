//! Small dense linear-algebra and scalar helpers shared across the crate.
//!
//! Everything here operates on `nalgebra` dynamic matrices. The state and
//! observation dimensions in this crate are small (2–20), so the helpers
//! favour clarity and numerical robustness over blocking or allocation reuse.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Replaces `m` with its symmetric part `(m + mᵀ)/2`, guarding against the
/// slow drift that repeated updates of covariance-like matrices accumulate.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// Returns the symmetric part of `m`.
pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// `what` names the matrix in the error message so failures deep inside a
/// sweep still say which quantity went bad.
pub fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(symmetrized(m))
        .map(|c| c.unpack())
        .ok_or_else(|| Error::NotPositiveDefinite {
            what: what.to_string(),
        })
}

/// `log det(L Lᵀ)` from a Cholesky factor: twice the sum of log-diagonals.
pub fn chol_logdet(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Solves `L x = b` with `L` lower triangular.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= l[(i, j)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` with `L` lower triangular.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= l[(j, i)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `L Lᵀ x = b` given the lower Cholesky factor `L`.
pub fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Solves `L Lᵀ X = B` column by column given the lower Cholesky factor.
pub fn chol_solve_mat(l: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
    for j in 0..rhs.ncols() {
        let x = chol_solve(l, &rhs.column(j).into_owned());
        out.set_column(j, &x);
    }
    out
}

/// Inverse of `L Lᵀ` from its lower Cholesky factor.
pub fn chol_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for k in 0..n {
        let e = DVector::from_fn(n, |i, _| if i == k { 1.0 } else { 0.0 });
        inv.set_column(k, &chol_solve(l, &e));
    }
    symmetrize(&mut inv);
    inv
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(chol_inverse(&spd_cholesky(m, what)?))
}

/// Quadratic form `xᵀ M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for r in 0..n {
        let mut row = 0.0;
        for c in 0..n {
            row += m[(r, c)] * x[c];
        }
        acc += x[r] * row;
    }
    acc
}

/// Numerically stable `log Σ exp(xs)`. Returns `-inf` on an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = xs.iter().map(|&x| (x - mx).exp()).sum();
    mx + s.ln()
}

/// `ln(1 + eˣ)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`]: `ln(eʸ − 1)` for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y.exp_m1().ln()
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Number of entries in the lower triangle (diagonal included) of a `d × d`
/// matrix.
pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Builds a lower-triangular matrix from packed raw parameters, applying
/// softplus to the diagonal so the factor is always valid as a Cholesky
/// factor. Packing order is row-major over the lower triangle:
/// (0,0), (1,0), (1,1), (2,0), ...
pub fn unpack_tril(raw: &[f64], d: usize) -> DMatrix<f64> {
    debug_assert_eq!(raw.len(), tri_len(d));
    let mut l = DMatrix::zeros(d, d);
    let mut k = 0;
    for r in 0..d {
        for c in 0..=r {
            l[(r, c)] = if r == c { softplus(raw[k]) } else { raw[k] };
            k += 1;
        }
    }
    l
}

/// Inverse of [`unpack_tril`]: packs a lower-triangular factor with strictly
/// positive diagonal back into raw parameters.
pub fn pack_tril(l: &DMatrix<f64>) -> Vec<f64> {
    let d = l.nrows();
    let mut raw = Vec::with_capacity(tri_len(d));
    for r in 0..d {
        for c in 0..=r {
            raw.push(if r == c {
                inv_softplus(l[(r, c)])
            } else {
                l[(r, c)]
            });
        }
    }
    raw
}

/// Tangent of [`unpack_tril`] in the unit direction of packed entry `k`:
/// a matrix that is zero except for the corresponding triangle position,
/// carrying the softplus derivative on diagonal entries.
pub fn unpack_tril_tangent(raw: &[f64], d: usize, k: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(d, d);
    let mut idx = 0;
    for r in 0..d {
        for c in 0..=r {
            if idx == k {
                t[(r, c)] = if r == c { sigmoid(raw[k]) } else { 1.0 };
                return t;
            }
            idx += 1;
        }
    }
    panic!("triangle index {k} out of range for d={d}");
}

/// Accumulates `∂f/∂raw` from `∂f/∂L` for a factor produced by
/// [`unpack_tril`], scaling diagonal entries by the softplus derivative.
pub fn accumulate_tril_grad(raw: &[f64], d: usize, g_l: &DMatrix<f64>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), tri_len(d));
    let mut k = 0;
    for r in 0..d {
        for c in 0..=r {
            let g = g_l[(r, c)];
            out[k] += if r == c { g * sigmoid(raw[k]) } else { g };
            k += 1;
        }
    }
}

/// Gradient of `M = L Lᵀ` pulled back to `L`: given `∂f/∂M = g`, returns
/// `(g + gᵀ) L` restricted to the lower triangle.
pub fn gram_grad_to_factor(g: &DMatrix<f64>, l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut gl = (g + g.transpose()) * l;
    let d = l.nrows();
    for r in 0..d {
        for c in (r + 1)..d {
            gl[(r, c)] = 0.0;
        }
    }
    gl
}

/// Forward-mode tangent of the Cholesky factorization: given `S = L Lᵀ` and a
/// symmetric tangent `dS`, returns `dL` with `dS = dL Lᵀ + L dLᵀ`.
///
/// Uses the standard identity `dL = L Φ(L⁻¹ dS L⁻ᵀ)` where `Φ` keeps the
/// strict lower triangle and halves the diagonal.
pub fn cholesky_tangent(l: &DMatrix<f64>, ds: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // M = L⁻¹ dS L⁻ᵀ, computed column-wise via triangular solves.
    let mut m = DMatrix::zeros(n, n);
    for c in 0..n {
        let col = DVector::from_fn(n, |r, _| ds[(r, c)]);
        m.set_column(c, &solve_lower(l, &col));
    }
    let mut mt = DMatrix::zeros(n, n);
    for c in 0..n {
        let col = DVector::from_fn(n, |r, _| m[(c, r)]);
        mt.set_column(c, &solve_lower(l, &col));
    }
    // mt = L⁻¹ dS L⁻ᵀ (symmetric up to roundoff); apply Φ.
    let mut phi = mt;
    for r in 0..n {
        phi[(r, r)] *= 0.5;
        for c in (r + 1)..n {
            phi[(r, c)] = 0.0;
        }
    }
    l * phi
}

/// Natural logarithm of the gamma function (Lanczos approximation, g = 7).
/// Absolute error below 1e-12 over the positive reals.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula keeps the approximation in its accurate range.
        std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().abs().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = COEF[0];
        for (i, &c) in COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// Error function, Abramowitz–Stegun rational approximation (max error
/// ~1.5e-7), sufficient for the distributional checks in the test suite.
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let y = 1.0
        - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t
            + 0.254_829_592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}
