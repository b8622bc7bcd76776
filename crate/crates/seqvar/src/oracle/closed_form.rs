//! Exact ELBO and gradient for the closed-form linear-Gaussian family.
//!
//! With Gaussian backward kernels, the conditional expectation
//! `H_t(x_t) = E[Σ_{s≤t} h̃_s | x_t]` stays an exact quadratic form
//! `x_tᵀ U_t x_t + b_tᵀ x_t + c_t`: each step integrates the previous form
//! plus the log-ratio increment against the kernel `N(F_t x_t + f_t, S_t)`
//! and collects coefficients. The ELBO is the final form averaged under the
//! λ-filter marginal plus its entropy.
//!
//! The gradient is analytic: one tangent per λ coordinate is pushed through
//! the λ-filter, the kernel coefficients, and the coefficient recursion
//! (reparameterization — the model's densities are fixed, only the family
//! moves). Everything here trusts the model parameters as ground truth;
//! only λ is differentiated.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::LgssmParams;
use crate::varfamily::closed_form::{
    backward_kernel_coeffs, backward_kernel_tangent, decode, directions, filter_step,
    filter_step_tangent, Carrier, Tangent,
};
use crate::varfamily::{SchemeSpec, VariationalParams};

/// Model-side constants of the quadratic recursion.
struct ModelConsts {
    q_inv: DMatrix<f64>,
    at_qi: DMatrix<f64>,
    at_qi_a: DMatrix<f64>,
    bt_ri: DMatrix<f64>,
    bt_ri_b: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    q0_inv: DMatrix<f64>,
    mu0: DVector<f64>,
    logdet_2pi_q: f64,
    logdet_2pi_r: f64,
    logdet_2pi_q0: f64,
}

impl ModelConsts {
    fn new(model: &LgssmParams) -> Result<ModelConsts> {
        let d_x = model.mu0().len();
        let d_y = model.b().nrows();
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let q_chol = linalg::spd_cholesky(model.q(), "transition covariance")?;
        let r_chol = linalg::spd_cholesky(model.r(), "emission covariance")?;
        let q0_chol = linalg::spd_cholesky(model.q0(), "initial covariance")?;
        let q_inv = linalg::chol_inverse(&q_chol);
        let r_inv = linalg::chol_inverse(&r_chol);
        let q0_inv = linalg::chol_inverse(&q0_chol);
        let at_qi = model.a().transpose() * &q_inv;
        let bt_ri = model.b().transpose() * &r_inv;
        Ok(ModelConsts {
            at_qi_a: &at_qi * model.a(),
            bt_ri_b: &bt_ri * model.b(),
            at_qi,
            bt_ri,
            q_inv,
            r_inv,
            q0_inv,
            mu0: model.mu0().clone(),
            logdet_2pi_q: linalg::chol_logdet(&q_chol) + d_x as f64 * ln_2pi,
            logdet_2pi_r: linalg::chol_logdet(&r_chol) + d_y as f64 * ln_2pi,
            logdet_2pi_q0: linalg::chol_logdet(&q0_chol) + d_x as f64 * ln_2pi,
        })
    }
}

/// Quadratic form `xᵀUx + bᵀx + c` with one tangent per λ direction.
struct QuadForm {
    u: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    tangents: Vec<(DMatrix<f64>, DVector<f64>, f64)>,
}

/// Exact ELBO `L_T` and its λ-gradient for a closed-form family evaluated
/// offline on a full observation record.
pub fn closed_form_elbo_and_grad(
    model: &LgssmParams,
    varfam: &VariationalParams,
    ys: &[DVector<f64>],
) -> Result<(f64, DVector<f64>)> {
    let (d_x, d_y) = match varfam.scheme {
        SchemeSpec::LgssmClosedForm { d_x, d_y } => (d_x, d_y),
        _ => {
            return Err(Error::Config(
                "closed-form ELBO oracle requires the lgssm_closed_form scheme".into(),
            ))
        }
    };
    if ys.is_empty() {
        return Err(Error::Config("closed-form ELBO needs at least one observation".into()));
    }
    if model.mu0().len() != d_x || model.b().nrows() != d_y {
        return Err(Error::Dimension {
            what: "model dimensions for closed-form ELBO".into(),
            expected: d_x,
            got: model.mu0().len(),
        });
    }
    let mc = ModelConsts::new(model)?;
    let dec = decode(d_x, d_y, &varfam.layout, &varfam.lambda)?;
    let dirs = directions(&dec, &varfam.layout, &varfam.lambda);
    let n_dir = dirs.len();

    // λ-filter at t = 0, with tangents.
    let (mut carrier, cache) = filter_step(&dec, None, &ys[0])?;
    let mut car_tans: Vec<Tangent> = dirs
        .iter()
        .map(|dir| filter_step_tangent(&dec, dir, None, &cache))
        .collect();

    let mut form = h0_form(&mc, &ys[0], d_x, n_dir);

    for y in &ys[1..] {
        // Backward kernel from the filtered carrier at t−1.
        let (kern, kcache) = backward_kernel_coeffs(&dec, &carrier)?;
        let kern_tans: Vec<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> = dirs
            .iter()
            .zip(car_tans.iter())
            .map(|(dir, tan)| backward_kernel_tangent(&dec, dir, (&carrier, tan), &kcache))
            .collect();
        form = step_form(&mc, &form, &kern.f, &kern.f0, &kern.s, &kern_tans, y)?;

        // Advance the λ-filter.
        let (next, cache) = filter_step(&dec, Some(&carrier), y)?;
        let next_tans: Vec<Tangent> = dirs
            .iter()
            .zip(car_tans.iter())
            .map(|(dir, tan)| filter_step_tangent(&dec, dir, Some((&carrier, tan)), &cache))
            .collect();
        carrier = next;
        car_tans = next_tans;
    }

    finalize_form(&form, &carrier, &car_tans, n_dir)
}

fn h0_form(mc: &ModelConsts, y0: &DVector<f64>, d_x: usize, n_dir: usize) -> QuadForm {
    let mut u = -0.5 * &mc.q0_inv - 0.5 * &mc.bt_ri_b;
    linalg::symmetrize(&mut u);
    let b = &mc.q0_inv * &mc.mu0 + &mc.bt_ri * y0;
    let c = -0.5 * linalg::quad_form(&mc.q0_inv, &mc.mu0)
        - 0.5 * linalg::quad_form(&mc.r_inv, y0)
        - 0.5 * mc.logdet_2pi_q0
        - 0.5 * mc.logdet_2pi_r;
    // H₀ does not depend on λ.
    let tangents = (0..n_dir)
        .map(|_| (DMatrix::zeros(d_x, d_x), DVector::zeros(d_x), 0.0))
        .collect();
    QuadForm { u, b, c, tangents }
}

/// One recursion step: integrates `H_{t−1} + h̃_t` against the kernel
/// `N(F x_t + f, S)` and re-collects quadratic coefficients in `x_t`.
fn step_form(
    mc: &ModelConsts,
    prev: &QuadForm,
    f: &DMatrix<f64>,
    f0: &DVector<f64>,
    s: &DMatrix<f64>,
    kern_tans: &[(DMatrix<f64>, DVector<f64>, DMatrix<f64>)],
    y: &DVector<f64>,
) -> Result<QuadForm> {
    let s_chol = linalg::spd_cholesky(s, "backward-kernel covariance")?;
    let si = linalg::chol_inverse(&s_chol);
    let logdet_2pi_s =
        linalg::chol_logdet(&s_chol) + s.nrows() as f64 * (2.0 * std::f64::consts::PI).ln();

    // Coefficients of the integrand, quadratic in (u, v) = (x_{t−1}, x_t).
    let mut m_uu = &prev.u - 0.5 * &mc.at_qi_a + 0.5 * &si;
    linalg::symmetrize(&mut m_uu);
    let m_uv = &mc.at_qi - &si * f;
    let mut m_vv = -0.5 * &mc.q_inv - 0.5 * &mc.bt_ri_b + 0.5 * (f.transpose() * &si * f);
    linalg::symmetrize(&mut m_vv);
    let si_f0 = &si * f0;
    let p_u = &prev.b - &si_f0;
    let p_v = &mc.bt_ri * y + f.transpose() * &si_f0;
    let k = prev.c - 0.5 * linalg::quad_form(&mc.r_inv, y) - 0.5 * mc.logdet_2pi_q
        - 0.5 * mc.logdet_2pi_r
        + 0.5 * logdet_2pi_s
        + 0.5 * f0.dot(&si_f0);

    // Gaussian integration over u ~ N(Fv + f₀, S).
    let ft_muu = f.transpose() * &m_uu;
    let mut u_new = &ft_muu * f + 0.5 * (f.transpose() * &m_uv + m_uv.transpose() * f) + &m_vv;
    linalg::symmetrize(&mut u_new);
    let b_new = 2.0 * (&ft_muu * f0) + m_uv.transpose() * f0 + f.transpose() * &p_u + &p_v;
    let c_new = linalg::quad_form(&m_uu, f0) + (&m_uu * s).trace() + p_u.dot(f0) + k;

    // Tangents: product rule over everything λ-dependent (F, f₀, S and the
    // previous form's coefficients).
    let mut tangents = Vec::with_capacity(kern_tans.len());
    for (dir_idx, (d_f, d_f0, d_s)) in kern_tans.iter().enumerate() {
        let (d_u_prev, d_b_prev, d_c_prev) = &prev.tangents[dir_idx];
        let d_si = -(&si * d_s * &si);
        let d_logdet_s = (&si * d_s).trace();
        let d_si_f0 = &d_si * f0 + &si * d_f0;

        let mut d_m_uu = d_u_prev + 0.5 * &d_si;
        linalg::symmetrize(&mut d_m_uu);
        let d_m_uv = -(&d_si * f) - (&si * d_f);
        let dftsif = d_f.transpose() * &si * f;
        let mut d_m_vv = 0.5 * (&dftsif + dftsif.transpose() + f.transpose() * &d_si * f);
        linalg::symmetrize(&mut d_m_vv);
        let d_p_u = d_b_prev - &d_si_f0;
        let d_p_v = d_f.transpose() * &si_f0 + f.transpose() * &d_si_f0;
        let d_k = d_c_prev + 0.5 * d_logdet_s + 0.5 * (d_f0.dot(&si_f0) + f0.dot(&d_si_f0));

        let d_ft_muu = d_f.transpose() * &m_uu + f.transpose() * &d_m_uu;
        let cross = d_f.transpose() * &m_uv + f.transpose() * &d_m_uv;
        let mut d_u_new =
            &d_ft_muu * f + &ft_muu * d_f + 0.5 * (&cross + cross.transpose()) + &d_m_vv;
        linalg::symmetrize(&mut d_u_new);
        let d_b_new = 2.0 * (&d_ft_muu * f0 + &ft_muu * d_f0)
            + d_m_uv.transpose() * f0
            + m_uv.transpose() * d_f0
            + d_f.transpose() * &p_u
            + f.transpose() * &d_p_u
            + &d_p_v;
        let d_c_new = f0.dot(&(&d_m_uu * f0)) + 2.0 * f0.dot(&(&m_uu * d_f0))
            + (&d_m_uu * s).trace()
            + (&m_uu * d_s).trace()
            + d_p_u.dot(f0)
            + p_u.dot(d_f0)
            + d_k;
        tangents.push((d_u_new, d_b_new, d_c_new));
    }

    Ok(QuadForm {
        u: u_new,
        b: b_new,
        c: c_new,
        tangents,
    })
}

/// `L_T = E_{q_T}[H_T] + entropy(q_T)` with `q_T = N(m, P)` the λ-filter
/// marginal at the horizon.
fn finalize_form(
    form: &QuadForm,
    carrier: &Carrier,
    car_tans: &[Tangent],
    n_dir: usize,
) -> Result<(f64, DVector<f64>)> {
    let (m, p) = (&carrier.m, &carrier.p);
    let d = m.len() as f64;
    let p_chol = linalg::spd_cholesky(p, "λ-filter covariance")?;
    let p_inv = linalg::chol_inverse(&p_chol);
    let entropy = 0.5 * linalg::chol_logdet(&p_chol)
        + 0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln());
    let elbo = linalg::quad_form(&form.u, m) + (&form.u * p).trace() + form.b.dot(m) + form.c
        + entropy;

    let mut grad = DVector::zeros(n_dir);
    let um2 = 2.0 * (&form.u * m);
    for k in 0..n_dir {
        let (d_u, d_b, d_c) = &form.tangents[k];
        let tan = &car_tans[k];
        grad[k] = linalg::quad_form(d_u, m)
            + (um2.dot(&tan.dm) + form.b.dot(&tan.dm))
            + (d_u * p).trace()
            + (&form.u * &tan.dp).trace()
            + d_b.dot(m)
            + *d_c
            + 0.5 * (&p_inv * &tan.dp).trace();
    }
    Ok((elbo, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{simulate, LgssmParams};
    use crate::oracle::innovations_log_likelihood;
    use crate::rngstreams::{stream, Purpose, StreamKey};
    use approx::assert_relative_eq;

    fn setup(t_len: usize) -> (LgssmParams, Vec<DVector<f64>>, VariationalParams) {
        let model = LgssmParams::random_stable(2, 2, 101);
        let traj = simulate(&model, t_len, 7);
        let varfam = VariationalParams::from_lgssm(&model, 2).unwrap();
        (model, traj.observations, varfam)
    }

    /// At λ = true parameters the family is the exact posterior, so the
    /// bound is tight: L_T equals the innovations log-evidence.
    #[test]
    fn elbo_is_tight_at_the_true_posterior() {
        let (model, ys, varfam) = setup(15);
        let (elbo, _) = closed_form_elbo_and_grad(&model, &varfam, &ys).unwrap();
        let loglik = innovations_log_likelihood(&model, &ys).unwrap();
        assert_relative_eq!(elbo, loglik, epsilon = 1e-6, max_relative = 1e-9);
    }

    #[test]
    fn gradient_vanishes_at_the_true_posterior() {
        let (model, ys, varfam) = setup(12);
        let (elbo, grad) = closed_form_elbo_and_grad(&model, &varfam, &ys).unwrap();
        assert!(
            grad.norm() < 1e-4 * elbo.abs().max(1.0),
            "gradient norm {} at the optimum",
            grad.norm()
        );
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_the_optimum() {
        let (model, ys, mut varfam) = setup(8);
        // Perturb λ so the gradient is non-trivial.
        let mut rng = stream(StreamKey::new(3, Purpose::ParamInit, 1, 1));
        for k in 0..varfam.dim_lambda() {
            use rand_distr::StandardNormal;
            let z: f64 = rand::Rng::sample(&mut rng, StandardNormal);
            varfam.lambda[k] += 0.15 * z;
        }
        let (_, grad) = closed_form_elbo_and_grad(&model, &varfam, &ys).unwrap();
        let h = 1e-5;
        for k in 0..varfam.dim_lambda() {
            let mut vp = varfam.clone();
            let mut vm = varfam.clone();
            vp.lambda[k] += h;
            vm.lambda[k] -= h;
            let (ep, _) = closed_form_elbo_and_grad(&model, &vp, &ys).unwrap();
            let (em, _) = closed_form_elbo_and_grad(&model, &vm, &ys).unwrap();
            let fd = (ep - em) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    /// Jensen: the ELBO never exceeds the log-evidence, with equality only
    /// at the posterior.
    #[test]
    fn elbo_is_dominated_by_the_log_evidence() {
        let (model, ys, varfam) = setup(10);
        let loglik = innovations_log_likelihood(&model, &ys).unwrap();
        let mut rng = stream(StreamKey::new(9, Purpose::ParamInit, 2, 2));
        for rep in 0..50 {
            let mut v = varfam.clone();
            for k in 0..v.dim_lambda() {
                use rand_distr::StandardNormal;
                let z: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                v.lambda[k] += 0.3 * z;
            }
            let (elbo, _) = closed_form_elbo_and_grad(&model, &v, &ys).unwrap();
            assert!(
                elbo <= loglik + 1e-9,
                "rep {rep}: ELBO {elbo} exceeds log-evidence {loglik}"
            );
            assert!(elbo < loglik - 1e-6, "random λ should not be tight");
        }
    }
}
