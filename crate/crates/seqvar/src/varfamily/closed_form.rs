//! Closed-form linear-Gaussian scheme.
//!
//! λ packs a complete LGSSM parameter set — initial mean/covariance,
//! transition pair (A, Q), emission pair (B, R) — with covariances stored as
//! packed Cholesky factors (softplus-positive diagonals). The marginals are
//! the exact Kalman filter of the λ-model and the potential is the conjugate
//! transition potential `η̃₁(x_t) = AᵀQ⁻¹ x_t`, `η̃₂ = −½AᵀQ⁻¹A`.
//!
//! Parameter gradients run forward-mode: one tangent per λ coordinate is
//! pushed through the filter recursions over the truncation window. The λ
//! dimension is a few dozen at the state sizes this scheme targets, so the
//! full Jacobian of the marginal naturals is cheap to materialize.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::{self, NaturalGaussian};
use crate::linalg;
use crate::models::LgssmParams;
use crate::rngstreams::{stream, Purpose, StreamKey};
use crate::varfamily::{
    GradMode, Layout, Potential, ReplayedMarginal, VariationalParams,
};

/// λ decoded into concrete model matrices plus cached derived quantities.
pub(crate) struct Decoded {
    pub d_x: usize,
    pub d_y: usize,
    pub mu0: DVector<f64>,
    pub q0: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    /// Potential coefficient `G = AᵀQ⁻¹`.
    pub pot_g: DMatrix<f64>,
    /// Potential quadratic block `−½AᵀQ⁻¹A`.
    pub pot_eta2: DMatrix<f64>,
}

/// Tangent of every decoded matrix along one λ coordinate. Inactive slots
/// hold zeros so the tangent recursions read as plain formula translations.
pub(crate) struct Direction {
    pub d_mu0: DVector<f64>,
    pub d_q0: DMatrix<f64>,
    pub d_a: DMatrix<f64>,
    pub d_q: DMatrix<f64>,
    pub d_b: DMatrix<f64>,
    pub d_r: DMatrix<f64>,
    /// Set when the direction moves A or Q (the potential's inputs).
    pub affects_potential: bool,
    /// `∂G` and `∂η̃₂` for potential-affecting directions.
    pub d_pot_g: DMatrix<f64>,
    pub d_pot_eta2: DMatrix<f64>,
}

/// Filtered (or predictive) Gaussian carrier.
#[derive(Clone)]
pub(crate) struct Carrier {
    pub m: DVector<f64>,
    pub p: DMatrix<f64>,
}

/// Tangent of a carrier.
#[derive(Clone)]
pub(crate) struct Tangent {
    pub dm: DVector<f64>,
    pub dp: DMatrix<f64>,
}

impl Tangent {
    pub fn zero(d: usize) -> Tangent {
        Tangent {
            dm: DVector::zeros(d),
            dp: DMatrix::zeros(d, d),
        }
    }
}

/// Value-pass intermediates one filter step, reused by the tangent pass.
pub(crate) struct StepCache {
    pub pred_m: DVector<f64>,
    pub pred_p: DMatrix<f64>,
    pub s_chol: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub innov: DVector<f64>,
    pub j: DMatrix<f64>,
}

pub(crate) fn layout(d_x: usize, d_y: usize) -> Layout {
    let mut b = Layout::builder();
    b.push("mu0", d_x);
    b.push("l_q0", linalg::tri_len(d_x));
    b.push("a", d_x * d_x);
    b.push("l_q", linalg::tri_len(d_x));
    b.push("b", d_y * d_x);
    b.push("l_r", linalg::tri_len(d_y));
    b.finish()
}

/// Fresh initialization: identity-ish covariances, a contractive transition,
/// and a small seeded jitter to break symmetry.
pub(crate) fn init(d_x: usize, d_y: usize, seed: u64) -> (DVector<f64>, Layout) {
    let layout = layout(d_x, d_y);
    let mut lambda = DVector::zeros(layout.total_len());
    let mut rng = stream(StreamKey::new(seed, Purpose::ParamInit, 0, 0));
    let mut jitter = |scale: f64| -> f64 {
        use rand_distr::StandardNormal;
        let z: f64 = rand::Rng::sample(&mut rng, StandardNormal);
        scale * z
    };

    let raw_unit = linalg::inv_softplus(1.0);
    for (name, r) in [("l_q0", d_x), ("l_q", d_x), ("l_r", d_y)] {
        let range = layout.block(name).unwrap();
        let mut k = 0;
        for i in 0..r {
            for j in 0..=i {
                lambda[range.start + k] = if i == j { raw_unit } else { 0.0 };
                k += 1;
            }
        }
    }
    let a_range = layout.block("a").unwrap();
    for i in 0..d_x {
        for j in 0..d_x {
            let v = if i == j { 0.5 } else { 0.0 };
            lambda[a_range.start + i * d_x + j] = v + jitter(0.05);
        }
    }
    let b_range = layout.block("b").unwrap();
    for i in 0..d_y {
        for j in 0..d_x {
            let v = if i == j { 1.0 } else { 0.0 };
            lambda[b_range.start + i * d_x + j] = v + jitter(0.05);
        }
    }
    (lambda, layout)
}

/// Writes a concrete LGSSM parameter set into λ (inverse of `decode`).
pub(crate) fn encode(
    model: &LgssmParams,
    layout: &Layout,
    lambda: &mut DVector<f64>,
) -> Result<()> {
    let d_x = model.mu0().len();
    let d_y = model.b().nrows();
    let need = layout.total_len();
    if lambda.len() != need {
        return Err(Error::Dimension {
            what: "λ for closed-form encode".into(),
            expected: need,
            got: lambda.len(),
        });
    }
    let put_mat = |lambda: &mut DVector<f64>, range: std::ops::Range<usize>, m: &DMatrix<f64>| {
        let cols = m.ncols();
        for i in 0..m.nrows() {
            for j in 0..cols {
                lambda[range.start + i * cols + j] = m[(i, j)];
            }
        }
    };
    let put_chol = |lambda: &mut DVector<f64>,
                    range: std::ops::Range<usize>,
                    cov: &DMatrix<f64>,
                    what: &str|
     -> Result<()> {
        let l = linalg::spd_cholesky(cov, what)?;
        let packed = linalg::pack_tril(&l);
        for (k, v) in packed.iter().enumerate() {
            lambda[range.start + k] = *v;
        }
        Ok(())
    };

    let mu0_range = layout.block("mu0").unwrap();
    for i in 0..d_x {
        lambda[mu0_range.start + i] = model.mu0()[i];
    }
    put_chol(lambda, layout.block("l_q0").unwrap(), model.q0(), "initial covariance")?;
    put_mat(lambda, layout.block("a").unwrap(), model.a());
    put_chol(lambda, layout.block("l_q").unwrap(), model.q(), "transition covariance")?;
    let _ = d_y;
    put_mat(lambda, layout.block("b").unwrap(), model.b());
    put_chol(lambda, layout.block("l_r").unwrap(), model.r(), "emission covariance")?;
    Ok(())
}

fn read_mat(lambda: &DVector<f64>, range: &std::ops::Range<usize>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| lambda[range.start + i * cols + j])
}

fn read_raw(lambda: &DVector<f64>, range: &std::ops::Range<usize>) -> Vec<f64> {
    lambda.as_slice()[range.clone()].to_vec()
}

pub(crate) fn decode(d_x: usize, d_y: usize, layout: &Layout, lambda: &DVector<f64>) -> Result<Decoded> {
    if lambda.len() != layout.total_len() {
        return Err(Error::Dimension {
            what: "λ for closed-form decode".into(),
            expected: layout.total_len(),
            got: lambda.len(),
        });
    }
    let get = |name: &str| -> Result<std::ops::Range<usize>> {
        layout
            .block(name)
            .ok_or_else(|| Error::Config(format!("closed-form layout is missing block {name}")))
    };
    let mu0_r = get("mu0")?;
    let mu0 = DVector::from_fn(d_x, |i, _| lambda[mu0_r.start + i]);
    let l_q0 = linalg::unpack_tril(&read_raw(lambda, &get("l_q0")?), d_x);
    let q0 = &l_q0 * l_q0.transpose();
    let a = read_mat(lambda, &get("a")?, d_x, d_x);
    let l_q = linalg::unpack_tril(&read_raw(lambda, &get("l_q")?), d_x);
    let q = &l_q * l_q.transpose();
    let b = read_mat(lambda, &get("b")?, d_y, d_x);
    let l_r = linalg::unpack_tril(&read_raw(lambda, &get("l_r")?), d_y);
    let r = &l_r * l_r.transpose();

    let q_chol = linalg::spd_cholesky(&q, "transition covariance")?;
    let q_inv = linalg::chol_inverse(&q_chol);
    let pot_g = a.transpose() * &q_inv;
    let mut pot_eta2 = -0.5 * (&pot_g * &a);
    linalg::symmetrize(&mut pot_eta2);
    Ok(Decoded {
        d_x,
        d_y,
        mu0,
        q0,
        a,
        q,
        b,
        r,
        q_inv,
        pot_g,
        pot_eta2,
    })
}

/// One tangent direction per λ coordinate, in layout order.
pub(crate) fn directions(dec: &Decoded, layout: &Layout, lambda: &DVector<f64>) -> Vec<Direction> {
    let (d_x, d_y) = (dec.d_x, dec.d_y);
    let mut dirs = Vec::with_capacity(layout.total_len());
    let zero_dir = || Direction {
        d_mu0: DVector::zeros(d_x),
        d_q0: DMatrix::zeros(d_x, d_x),
        d_a: DMatrix::zeros(d_x, d_x),
        d_q: DMatrix::zeros(d_x, d_x),
        d_b: DMatrix::zeros(d_y, d_x),
        d_r: DMatrix::zeros(d_y, d_y),
        affects_potential: false,
        d_pot_g: DMatrix::zeros(d_x, d_x),
        d_pot_eta2: DMatrix::zeros(d_x, d_x),
    };

    for block in &layout.blocks {
        let raw = read_raw(lambda, &(block.offset..block.offset + block.len));
        match block.name.as_str() {
            "mu0" => {
                for k in 0..block.len {
                    let mut d = zero_dir();
                    d.d_mu0[k] = 1.0;
                    dirs.push(d);
                }
            }
            "l_q0" | "l_q" | "l_r" => {
                let dim = if block.name == "l_r" { d_y } else { d_x };
                let l = linalg::unpack_tril(&raw, dim);
                for k in 0..block.len {
                    let dl = linalg::unpack_tril_tangent(&raw, dim, k);
                    let mut dcov = &dl * l.transpose();
                    dcov += dcov.transpose();
                    let mut d = zero_dir();
                    match block.name.as_str() {
                        "l_q0" => d.d_q0 = dcov,
                        "l_q" => d.d_q = dcov,
                        _ => d.d_r = dcov,
                    }
                    dirs.push(d);
                }
            }
            "a" => {
                for k in 0..block.len {
                    let mut d = zero_dir();
                    d.d_a[(k / d_x, k % d_x)] = 1.0;
                    dirs.push(d);
                }
            }
            "b" => {
                for k in 0..block.len {
                    let mut d = zero_dir();
                    d.d_b[(k / d_x, k % d_x)] = 1.0;
                    dirs.push(d);
                }
            }
            other => unreachable!("unknown closed-form block {other}"),
        }
    }

    // Potential tangents: G = AᵀQ⁻¹ and η̃₂ = −½GA move with A and Q.
    for d in &mut dirs {
        let moves_a = d.d_a.iter().any(|v| *v != 0.0);
        let moves_q = d.d_q.iter().any(|v| *v != 0.0);
        if !(moves_a || moves_q) {
            continue;
        }
        d.affects_potential = true;
        let mut d_g = d.d_a.transpose() * &dec.q_inv;
        if moves_q {
            d_g -= &dec.pot_g * &d.d_q * &dec.q_inv;
        }
        let mut d_eta2 = -0.5 * (&d_g * &dec.a + &dec.pot_g * &d.d_a);
        linalg::symmetrize(&mut d_eta2);
        d.d_pot_g = d_g;
        d.d_pot_eta2 = d_eta2;
    }
    dirs
}

/// One Kalman step under the λ-model: predict (or use the initial law at
/// t = 0) and update on `y`, Joseph form.
pub(crate) fn filter_step(
    dec: &Decoded,
    prev: Option<&Carrier>,
    y: &DVector<f64>,
) -> Result<(Carrier, StepCache)> {
    let (pred_m, pred_p) = match prev {
        None => (dec.mu0.clone(), dec.q0.clone()),
        Some(c) => {
            let m = &dec.a * &c.m;
            let mut p = &dec.a * &c.p * dec.a.transpose() + &dec.q;
            linalg::symmetrize(&mut p);
            (m, p)
        }
    };
    let mut s = &dec.b * &pred_p * dec.b.transpose() + &dec.r;
    linalg::symmetrize(&mut s);
    let s_chol = linalg::spd_cholesky(&s, "innovation covariance")?;
    // K = P⁻Bᵀ S⁻¹, via S⁻¹(B P⁻) transposed.
    let gain = linalg::chol_solve_mat(&s_chol, &(&dec.b * &pred_p)).transpose();
    let innov = y - &dec.b * &pred_m;
    let m = &pred_m + &gain * &innov;
    let j = DMatrix::identity(dec.d_x, dec.d_x) - &gain * &dec.b;
    let mut p = &j * &pred_p * j.transpose() + &gain * &dec.r * gain.transpose();
    linalg::symmetrize(&mut p);
    Ok((
        Carrier { m, p },
        StepCache {
            pred_m,
            pred_p,
            s_chol,
            gain,
            innov,
            j,
        },
    ))
}

/// Tangent of `filter_step` along one direction. `prev` carries the previous
/// filtered carrier and its tangent (zero tangent when the carrier is the
/// frozen window entry); `None` means the step is the initial one.
pub(crate) fn filter_step_tangent(
    dec: &Decoded,
    dir: &Direction,
    prev: Option<(&Carrier, &Tangent)>,
    cache: &StepCache,
) -> Tangent {
    let (dm_pred, dp_pred) = match prev {
        None => (dir.d_mu0.clone(), dir.d_q0.clone()),
        Some((c, t)) => {
            let dm = &dir.d_a * &c.m + &dec.a * &t.dm;
            let cross = &dir.d_a * &c.p * dec.a.transpose();
            let mut dp = &cross + cross.transpose() + &dec.a * &t.dp * dec.a.transpose() + &dir.d_q;
            linalg::symmetrize(&mut dp);
            (dm, dp)
        }
    };
    let b = &dec.b;
    let k = &cache.gain;
    let cross = &dir.d_b * &cache.pred_p * b.transpose();
    let mut ds = &cross + cross.transpose() + b * &dp_pred * b.transpose() + &dir.d_r;
    linalg::symmetrize(&mut ds);
    // dK = (dP⁻Bᵀ + P⁻dBᵀ − K dS) S⁻¹.
    let rhs = &dp_pred * b.transpose() + &cache.pred_p * dir.d_b.transpose() - k * &ds;
    let dk = linalg::chol_solve_mat(&cache.s_chol, &rhs.transpose()).transpose();
    let dv = -(&dir.d_b * &cache.pred_m) - b * &dm_pred;
    let dm = &dm_pred + &dk * &cache.innov + k * &dv;
    let dj = -(&dk * b) - k * &dir.d_b;
    let c1 = &dj * &cache.pred_p * cache.j.transpose();
    let c2 = &dk * &dec.r * k.transpose();
    let mut dp = &c1
        + c1.transpose()
        + &cache.j * &dp_pred * cache.j.transpose()
        + &c2
        + c2.transpose()
        + k * &dir.d_r * k.transpose();
    linalg::symmetrize(&mut dp);
    Tangent { dm, dp }
}

/// Affine backward-kernel coefficients `(F, f, S)` of the λ-model given the
/// filtered carrier at t−1, plus the intermediates the tangent pass reuses.
pub(crate) struct KernelCoeffs {
    pub f: DMatrix<f64>,
    pub f0: DVector<f64>,
    pub s: DMatrix<f64>,
}

pub(crate) struct KernelCache {
    /// `P⁻¹` of the filtered carrier.
    pub pi: DMatrix<f64>,
    /// `W = AᵀQ⁻¹` (alias of the potential coefficient).
    pub w: DMatrix<f64>,
    /// `S = (P⁻¹ + AᵀQ⁻¹A)⁻¹`.
    pub sb: DMatrix<f64>,
}

pub(crate) fn backward_kernel_coeffs(dec: &Decoded, prev: &Carrier) -> Result<(KernelCoeffs, KernelCache)> {
    let p_chol = linalg::spd_cholesky(&prev.p, "filtered covariance")?;
    let pi = linalg::chol_inverse(&p_chol);
    let w = dec.pot_g.clone();
    let mut prec = &pi + &w * &dec.a;
    linalg::symmetrize(&mut prec);
    let sb = linalg::spd_inverse(&prec, "backward-kernel precision")?;
    let f = &sb * &w;
    let f0 = &sb * (&pi * &prev.m);
    Ok((
        KernelCoeffs {
            f,
            f0,
            s: sb.clone(),
        },
        KernelCache { pi, w, sb },
    ))
}

/// Tangents of the backward-kernel coefficients along one direction.
pub(crate) fn backward_kernel_tangent(
    dec: &Decoded,
    dir: &Direction,
    prev: (&Carrier, &Tangent),
    cache: &KernelCache,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (c, t) = prev;
    let d_pi = -(&cache.pi * &t.dp * &cache.pi);
    let d_w = &dir.d_pot_g;
    let mut d_prec = &d_pi + d_w * &dec.a + &cache.w * &dir.d_a;
    linalg::symmetrize(&mut d_prec);
    let d_sb = -(&cache.sb * &d_prec * &cache.sb);
    let d_f = &d_sb * &cache.w + &cache.sb * d_w;
    let d_f0 = &d_sb * (&cache.pi * &c.m) + &cache.sb * (&d_pi * &c.m) + &cache.sb * (&cache.pi * &t.dm);
    (d_f, d_f0, d_sb)
}

/// Natural parameters of the filtered carrier, flattened `[η₁; vec(η₂)]`.
pub(crate) fn eta_flat(carrier: &Carrier) -> Result<(NaturalGaussian, DMatrix<f64>)> {
    let p_chol = linalg::spd_cholesky(&carrier.p, "filtered covariance")?;
    let pi = linalg::chol_inverse(&p_chol);
    let eta1 = &pi * &carrier.m;
    let eta2 = -0.5 * &pi;
    Ok((NaturalGaussian::new(eta1, eta2)?, pi))
}

/// Tangent of the flattened naturals given the carrier tangent and `P⁻¹`.
pub(crate) fn eta_tangent_flat(
    carrier: &Carrier,
    tan: &Tangent,
    pi: &DMatrix<f64>,
) -> DVector<f64> {
    let d = carrier.m.len();
    let d_pi = -(pi * &tan.dp * pi);
    let d_eta1 = &d_pi * &carrier.m + pi * &tan.dm;
    let d_eta2 = -0.5 * &d_pi;
    let mut out = DVector::zeros(expfam::eta_dim(d));
    out.rows_mut(0, d).copy_from(&d_eta1);
    for i in 0..d {
        for j in 0..d {
            out[d + i * d + j] = d_eta2[(i, j)];
        }
    }
    out
}

/// One entry of the truncation window: the frozen carrier entering the step
/// (`None` for the initial step) and the observation assimilated by it.
struct WindowStep {
    entry: Option<Carrier>,
    y: DVector<f64>,
}

pub(crate) struct State {
    d_x: usize,
    d_y: usize,
    window: VecDeque<WindowStep>,
    filt: Option<Carrier>,
    marg: Option<NaturalGaussian>,
    /// `∂η_t/∂λ`, `(d + d²) × dim λ`.
    jac: Option<DMatrix<f64>>,
    pot: Option<Potential>,
    /// `(λ index, ∂G, ∂η̃₂)` for the potential-affecting directions.
    pot_tan: Vec<(usize, DMatrix<f64>, DMatrix<f64>)>,
    prev_marg: Option<NaturalGaussian>,
    jac_prev: Option<DMatrix<f64>>,
}

impl State {
    pub(crate) fn new(d_x: usize, d_y: usize) -> State {
        State {
            d_x,
            d_y,
            window: VecDeque::new(),
            filt: None,
            marg: None,
            jac: None,
            pot: None,
            pot_tan: Vec::new(),
            prev_marg: None,
            jac_prev: None,
        }
    }

    pub(crate) fn reset(&mut self) {
        *self = State::new(self.d_x, self.d_y);
    }

    /// Replays the window under `dec`, carrying one tangent per direction.
    fn replay(
        &self,
        dec: &Decoded,
        dirs: &[Direction],
    ) -> Result<(Carrier, NaturalGaussian, DMatrix<f64>)> {
        let d_x = self.d_x;
        let mut cur: Option<(Carrier, Vec<Tangent>)> = None;
        for (idx, step) in self.window.iter().enumerate() {
            let frozen_tan = Tangent::zero(d_x);
            let (prev_c, prev_t): (Option<&Carrier>, Option<&Tangent>) = if idx == 0 {
                match &step.entry {
                    Some(c) => (Some(c), Some(&frozen_tan)),
                    None => (None, None),
                }
            } else {
                let (c, _) = cur.as_ref().unwrap();
                (Some(c), None)
            };
            // Borrow juggling: tangents of the running carrier live in `cur`.
            let (carrier, cache) = filter_step(dec, prev_c, &step.y)?;
            let mut tans = Vec::with_capacity(dirs.len());
            for (k, dir) in dirs.iter().enumerate() {
                let prev_pair = match (prev_c, prev_t) {
                    (Some(c), Some(zt)) => Some((c, zt)),
                    (Some(c), None) => {
                        let (_, ts) = cur.as_ref().unwrap();
                        Some((c, &ts[k]))
                    }
                    _ => None,
                };
                tans.push(filter_step_tangent(dec, dir, prev_pair, &cache));
            }
            cur = Some((carrier, tans));
        }
        let (carrier, tans) = cur.ok_or_else(|| Error::Config("empty replay window".into()))?;
        let (marg, pi) = eta_flat(&carrier)?;
        let mut jac = DMatrix::zeros(expfam::eta_dim(d_x), dirs.len());
        for (k, tan) in tans.iter().enumerate() {
            jac.set_column(k, &eta_tangent_flat(&carrier, tan, &pi));
        }
        Ok((carrier, marg, jac))
    }

    pub(crate) fn advance(
        &mut self,
        params: &VariationalParams,
        _mode: GradMode,
        t: usize,
        y: &DVector<f64>,
    ) -> Result<()> {
        if y.len() != self.d_y {
            return Err(Error::Dimension {
                what: "observation for closed-form advance".into(),
                expected: self.d_y,
                got: y.len(),
            });
        }
        let dec = decode(self.d_x, self.d_y, &params.layout, &params.lambda)?;
        let dirs = directions(&dec, &params.layout, &params.lambda);

        self.prev_marg = self.marg.take();
        self.jac_prev = self.jac.take();

        self.window.push_back(WindowStep {
            entry: self.filt.clone(),
            y: y.clone(),
        });
        while self.window.len() > params.delta {
            self.window.pop_front();
        }

        let (carrier, marg, jac) = self.replay(&dec, &dirs)?;
        self.filt = Some(carrier);
        self.marg = Some(marg);
        self.jac = Some(jac);

        if t >= 1 {
            self.pot = Some(Potential::LinearGaussian {
                g: dec.pot_g.clone(),
                eta2: dec.pot_eta2.clone(),
            });
            self.pot_tan = dirs
                .iter()
                .enumerate()
                .filter(|(_, d)| d.affects_potential)
                .map(|(k, d)| (k, d.d_pot_g.clone(), d.d_pot_eta2.clone()))
                .collect();
        } else {
            self.pot = None;
            self.pot_tan.clear();
        }
        Ok(())
    }

    pub(crate) fn marginal(&self) -> &NaturalGaussian {
        self.marg.as_ref().expect("marginal before first advance")
    }

    pub(crate) fn prev_marginal(&self) -> &NaturalGaussian {
        self.prev_marg
            .as_ref()
            .expect("previous marginal undefined at t = 0")
    }

    pub(crate) fn potential(&self) -> &Potential {
        self.pot.as_ref().expect("potential undefined at t = 0")
    }

    pub(crate) fn marginal_vjp(&self, s: &DVector<f64>, out: &mut DVector<f64>) {
        let jac = self.jac.as_ref().expect("Jacobian before first advance");
        out.gemv_tr(1.0, jac, s, 1.0);
    }

    pub(crate) fn prev_marginal_vjp(&self, s: &DVector<f64>, out: &mut DVector<f64>) {
        if let Some(jac) = &self.jac_prev {
            out.gemv_tr(1.0, jac, s, 1.0);
        }
    }

    /// `s` is packed `[s₁ (d); S₂ (d×d row-major)]` against `[η̃₁(x_t); η̃₂]`.
    pub(crate) fn potential_vjp(&self, x_t: &DVector<f64>, s: &DVector<f64>, out: &mut DVector<f64>) {
        let d = self.d_x;
        for (idx, d_g, d_eta2) in &self.pot_tan {
            let mut acc = 0.0;
            for i in 0..d {
                let mut gi = 0.0;
                for j in 0..d {
                    gi += d_g[(i, j)] * x_t[j];
                    acc += d_eta2[(i, j)] * s[d + i * d + j];
                }
                acc += gi * s[i];
            }
            out[*idx] += acc;
        }
    }

    pub(crate) fn replay_marginal(
        &self,
        params: &VariationalParams,
        lambda: &DVector<f64>,
    ) -> Result<ReplayedMarginal> {
        let dec = decode(self.d_x, self.d_y, &params.layout, lambda)?;
        let dirs = directions(&dec, &params.layout, lambda);
        let (_, marg, jac) = self.replay(&dec, &dirs)?;
        Ok(ReplayedMarginal::new(
            marg,
            Box::new(move |s, out| {
                out.gemv_tr(1.0, &jac, s, 1.0);
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{simulate, LgssmParams, SsmModel};
    use crate::oracle::{kalman_backward_kernel_coeffs, kalman_run};
    use crate::varfamily::{SchemeSpec, VarFamily};
    use approx::assert_relative_eq;

    fn test_model() -> LgssmParams {
        LgssmParams::random_stable(2, 2, 77)
    }

    fn family_at_model(model: &LgssmParams, delta: usize) -> VarFamily {
        let params = VariationalParams::from_lgssm(model, delta).unwrap();
        VarFamily::new(params, GradMode::Offline).unwrap()
    }

    #[test]
    fn encode_decode_roundtrip() {
        let model = test_model();
        let params = VariationalParams::from_lgssm(&model, 2).unwrap();
        let dec = decode(2, 2, &params.layout, &params.lambda).unwrap();
        assert_relative_eq!(dec.a, *model.a(), epsilon = 1e-12);
        assert_relative_eq!(dec.q, *model.q(), epsilon = 1e-12);
        assert_relative_eq!(dec.b, *model.b(), epsilon = 1e-12);
        assert_relative_eq!(dec.r, *model.r(), epsilon = 1e-12);
        assert_relative_eq!(dec.q0, *model.q0(), epsilon = 1e-12);
        assert_relative_eq!(dec.mu0, *model.mu0(), epsilon = 1e-12);
    }

    #[test]
    fn marginals_match_kalman_filter_when_lambda_is_model() {
        let model = test_model();
        let traj = simulate(&model, 20, 5);
        let run = kalman_run(&model, &traj.observations).unwrap();
        // Δ larger than the horizon: the replay covers the full recursion.
        let mut fam = family_at_model(&model, 64);
        for (t, y) in traj.observations.iter().enumerate() {
            fam.advance(y).unwrap();
            let marg = fam.marginal();
            assert_relative_eq!(*marg.mean(), run.filtered[t].mean, epsilon = 1e-8);
            assert_relative_eq!(*marg.cov(), run.filtered[t].cov, epsilon = 1e-8);
        }
        // Short windows freeze older carriers but never change the values.
        let mut fam2 = family_at_model(&model, 2);
        for (t, y) in traj.observations.iter().enumerate() {
            fam2.advance(y).unwrap();
            assert_relative_eq!(*fam2.marginal().mean(), run.filtered[t].mean, epsilon = 1e-8);
        }
    }

    #[test]
    fn backward_kernel_matches_kalman_kernel() {
        let model = test_model();
        let traj = simulate(&model, 6, 9);
        let run = kalman_run(&model, &traj.observations).unwrap();
        let mut fam = family_at_model(&model, 8);
        for (t, y) in traj.observations.iter().enumerate() {
            fam.advance(y).unwrap();
            if t == 0 {
                continue;
            }
            let (f, f0, s) = fam.linear_backward_kernel().unwrap().unwrap();
            let (fk, f0k, sk) = kalman_backward_kernel_coeffs(&model, &run.filtered[t - 1]).unwrap();
            assert_relative_eq!(f, fk, epsilon = 1e-8);
            assert_relative_eq!(f0, f0k, epsilon = 1e-8);
            assert_relative_eq!(s, sk, epsilon = 1e-8);
        }
    }

    /// Finite differences on the marginal naturals through the window.
    #[test]
    fn marginal_jacobian_matches_finite_differences() {
        let model = test_model();
        let traj = simulate(&model, 8, 11);
        let d_eta = expfam::eta_dim(2);
        let h = 1e-6;
        // Δ ≥ horizon makes truncation a no-op, so central differences on
        // the full recursion are an exact reference for the window Jacobian.
        let params_full = VariationalParams::from_lgssm(&model, 64).unwrap();
        let dim = params_full.dim_lambda();
        let mut fam_full = VarFamily::new(params_full.clone(), GradMode::Offline).unwrap();
        for y in &traj.observations {
            fam_full.advance(y).unwrap();
        }
        let mut jac_full = DMatrix::zeros(d_eta, dim);
        for r in 0..d_eta {
            let mut e = DVector::zeros(d_eta);
            e[r] = 1.0;
            let mut row = DVector::zeros(dim);
            fam_full.marginal_score_vjp(&e, &mut row);
            jac_full.row_mut(r).copy_from(&row.transpose());
        }
        for k in 0..dim {
            let mut lp = params_full.lambda.clone();
            let mut lm = params_full.lambda.clone();
            lp[k] += h;
            lm[k] -= h;
            let eta_of_full = |lambda: &DVector<f64>| -> DVector<f64> {
                let mut p = params_full.clone();
                p.lambda = lambda.clone();
                let mut f = VarFamily::new(p, GradMode::Offline).unwrap();
                for y in &traj.observations {
                    f.advance(y).unwrap();
                }
                let marg = f.marginal();
                let mut v = DVector::zeros(d_eta);
                v.rows_mut(0, 2).copy_from(marg.eta1());
                for i in 0..2 {
                    for j in 0..2 {
                        v[2 + i * 2 + j] = marg.eta2()[(i, j)];
                    }
                }
                v
            };
            let fd = (eta_of_full(&lp) - eta_of_full(&lm)) / (2.0 * h);
            let col = jac_full.column(k).into_owned();
            assert_relative_eq!(col, fd, epsilon = 1e-4, max_relative = 1e-4);
        }
    }

    /// Parameters whose influence enters only before the window must have
    /// exactly zero gradient through the truncated marginal.
    #[test]
    fn truncation_zeroes_out_of_window_parameters() {
        let model = test_model();
        let traj = simulate(&model, 10, 13);
        let params = VariationalParams::from_lgssm(&model, 2).unwrap();
        let mu0_range = params.block("mu0").unwrap();
        let q0_range = params.block("l_q0").unwrap();
        let mut fam = VarFamily::new(params, GradMode::Offline).unwrap();
        for y in &traj.observations {
            fam.advance(y).unwrap();
        }
        // At t = 9 with Δ = 2 the window covers steps 8..9; μ₀ and Q₀ only
        // enter at t = 0, so their columns are identically zero.
        let d_eta = expfam::eta_dim(2);
        for r in 0..d_eta {
            let mut e = DVector::zeros(d_eta);
            e[r] = 1.0;
            let mut g = DVector::zeros(fam.dim_lambda());
            fam.marginal_score_vjp(&e, &mut g);
            for k in mu0_range.clone() {
                assert_eq!(g[k], 0.0);
            }
            for k in q0_range.clone() {
                assert_eq!(g[k], 0.0);
            }
        }
    }

    /// The potential VJP against finite differences of `η̃(x_t)` in λ.
    #[test]
    fn potential_vjp_matches_finite_differences() {
        let model = test_model();
        let traj = simulate(&model, 3, 17);
        let params = VariationalParams::from_lgssm(&model, 2).unwrap();
        let dim = params.dim_lambda();
        let mut fam = VarFamily::new(params.clone(), GradMode::Offline).unwrap();
        for y in &traj.observations {
            fam.advance(y).unwrap();
        }
        let x_t = DVector::from_vec(vec![0.3, -0.7]);
        let d_eta = expfam::eta_dim(2);
        let mut s = DVector::zeros(d_eta);
        for (i, v) in [0.4, -1.1, 0.2, 0.9, -0.5, 0.7].iter().enumerate() {
            s[i] = *v;
        }
        let mut vjp = DVector::zeros(dim);
        fam.potential_score_vjp(&x_t, &s, &mut vjp);

        let pot_dot = |lambda: &DVector<f64>| -> f64 {
            let dec = decode(2, 2, &params.layout, lambda).unwrap();
            let eta1 = &dec.pot_g * &x_t;
            let mut acc = 0.0;
            for i in 0..2 {
                acc += eta1[i] * s[i];
                for j in 0..2 {
                    acc += dec.pot_eta2[(i, j)] * s[2 + i * 2 + j];
                }
            }
            acc
        };
        let h = 1e-6;
        for k in 0..dim {
            let mut lp = params.lambda.clone();
            let mut lm = params.lambda.clone();
            lp[k] += h;
            lm[k] -= h;
            let fd = (pot_dot(&lp) - pot_dot(&lm)) / (2.0 * h);
            assert_relative_eq!(vjp[k], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn replay_under_alternative_lambda_matches_fresh_family() {
        let model = test_model();
        let traj = simulate(&model, 6, 23);
        let params = VariationalParams::from_lgssm(&model, 8).unwrap();
        let mut fam = VarFamily::new(params.clone(), GradMode::Online).unwrap();
        // Drift λ between steps, as online training does.
        let mut lam = params.lambda.clone();
        for (t, y) in traj.observations.iter().enumerate() {
            fam.lambda_mut().copy_from(&lam);
            fam.advance(y).unwrap();
            if t == traj.observations.len() - 1 {
                break;
            }
            lam[4] += 0.01;
            lam[2] -= 0.005;
        }
        // The previous-λ replay runs the same window under the snapshot.
        let replayed = fam.replay_marginal_prev_lambda().unwrap();
        assert_eq!(replayed.marginal.dim(), 2);
        // With λ held constant, the replay equals the published marginal.
        let mut fam_static = VarFamily::new(params, GradMode::Online).unwrap();
        for y in &traj.observations {
            fam_static.advance(y).unwrap();
        }
        let again = fam_static.replay_marginal_prev_lambda().unwrap();
        assert_relative_eq!(
            again.marginal.eta1(),
            fam_static.marginal().eta1(),
            epsilon = 1e-10
        );
        assert_relative_eq!(
            again.marginal.eta2(),
            fam_static.marginal().eta2(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn fresh_init_decodes_and_runs() {
        let params = VariationalParams::init(
            SchemeSpec::LgssmClosedForm { d_x: 2, d_y: 2 },
            2,
            42,
        )
        .unwrap();
        assert_eq!(params.dim_lambda(), 2 + 3 + 4 + 3 + 4 + 3);
        let mut fam = VarFamily::new(params, GradMode::Offline).unwrap();
        let model = test_model();
        let traj = simulate(&model, 4, 3);
        for y in &traj.observations {
            fam.advance(y).unwrap();
        }
        assert!(fam.marginal().mean().iter().all(|v| v.is_finite()));
        assert_eq!(model.dim_x(), 2);
    }
}
