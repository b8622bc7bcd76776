//! Kalman filtering, smoothing and exact backward kernels for the
//! linear-Gaussian model.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg;
use crate::models::LgssmParams;

/// A Gaussian belief over the state at one time point.
#[derive(Clone, Debug)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Everything one forward pass produces: predictive and filtering marginals
/// plus the innovations log-likelihood `log p(y_{0:T})`.
#[derive(Clone, Debug)]
pub struct KalmanRun {
    /// One-step predictive beliefs `p(x_t | y_{0:t−1})`; entry 0 is the prior.
    pub predicted: Vec<GaussianBelief>,
    /// Filtering beliefs `p(x_t | y_{0:t})`.
    pub filtered: Vec<GaussianBelief>,
    pub log_likelihood: f64,
}

/// Runs the filter over `ys`, returning predictive and filtering marginals
/// and the exact log-evidence. Covariance updates use the Joseph form, which
/// stays symmetric PSD under roundoff.
pub fn kalman_run(params: &LgssmParams, ys: &[DVector<f64>]) -> Result<KalmanRun> {
    let d_x = params.mu0().len();
    let a = params.a();
    let b = params.b();
    let mut predicted = Vec::with_capacity(ys.len());
    let mut filtered = Vec::with_capacity(ys.len());
    let mut log_likelihood = 0.0;

    let mut mean = params.mu0().clone();
    let mut cov = params.q0().clone();
    for (t, y) in ys.iter().enumerate() {
        if t > 0 {
            mean = a * &mean;
            cov = a * &cov * a.transpose() + params.q();
            linalg::symmetrize(&mut cov);
        }
        predicted.push(GaussianBelief {
            mean: mean.clone(),
            cov: cov.clone(),
        });

        let innov = y - b * &mean;
        let s = b * &cov * b.transpose() + params.r();
        let s_chol = linalg::spd_cholesky(&s, "innovation covariance")?;
        let d_y = y.len() as f64;
        let z = linalg::solve_lower(&s_chol, &innov);
        log_likelihood -= 0.5
            * (z.norm_squared()
                + linalg::chol_logdet(&s_chol)
                + d_y * (2.0 * std::f64::consts::PI).ln());

        // K = P⁻ Bᵀ S⁻¹, via solves against the innovation Cholesky factor.
        let pbt = &cov * b.transpose();
        let mut gain = DMatrix::zeros(d_x, y.len());
        for r in 0..d_x {
            let row = DVector::from_fn(y.len(), |c, _| pbt[(r, c)]);
            let solved = linalg::chol_solve(&s_chol, &row);
            for c in 0..y.len() {
                gain[(r, c)] = solved[c];
            }
        }

        mean += &gain * innov;
        let j = DMatrix::identity(d_x, d_x) - &gain * b;
        cov = &j * &cov * j.transpose() + &gain * params.r() * gain.transpose();
        linalg::symmetrize(&mut cov);
        filtered.push(GaussianBelief {
            mean: mean.clone(),
            cov: cov.clone(),
        });
    }
    Ok(KalmanRun {
        predicted,
        filtered,
        log_likelihood,
    })
}

/// Exact filtering marginals `p(x_t | y_{0:t})`.
pub fn kalman_filter(params: &LgssmParams, ys: &[DVector<f64>]) -> Result<Vec<GaussianBelief>> {
    Ok(kalman_run(params, ys)?.filtered)
}

/// Exact log-evidence `log p(y_{0:T})` from the innovations decomposition.
pub fn innovations_log_likelihood(params: &LgssmParams, ys: &[DVector<f64>]) -> Result<f64> {
    Ok(kalman_run(params, ys)?.log_likelihood)
}

/// Coefficients `(F, f, S)` of the exact backward kernel
/// `p(x_{t−1} | x_t, y_{0:t−1}) = N(F x_t + f, S)` given the filtering belief
/// at `t − 1`.
pub fn kalman_backward_kernel_coeffs(
    params: &LgssmParams,
    filt_prev: &GaussianBelief,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let p_chol = linalg::spd_cholesky(&filt_prev.cov, "filtering covariance")?;
    let p_inv = linalg::chol_inverse(&p_chol);
    let q_inv = linalg::spd_inverse(params.q(), "Q")?;
    let a = params.a();
    let prec = &p_inv + a.transpose() * &q_inv * a;
    let s = linalg::spd_inverse(&prec, "backward-kernel precision")?;
    let f_mat = &s * a.transpose() * &q_inv;
    let f_vec = &s * (&p_inv * &filt_prev.mean);
    Ok((f_mat, f_vec, s))
}

/// Exact backward kernel evaluated at a point: the law of `X_{t−1}` given
/// `X_t = x_t` and `y_{0:t−1}`.
pub fn kalman_backward_kernel(
    params: &LgssmParams,
    filt_prev: &GaussianBelief,
    x_t: &DVector<f64>,
) -> Result<GaussianBelief> {
    let (f_mat, f_vec, s) = kalman_backward_kernel_coeffs(params, filt_prev)?;
    Ok(GaussianBelief {
        mean: &f_mat * x_t + f_vec,
        cov: s,
    })
}

/// Exact smoothing marginals `p(x_t | y_{0:T})`, obtained by propagating the
/// last filtering belief backwards through the kernels.
pub fn kalman_smoother(params: &LgssmParams, ys: &[DVector<f64>]) -> Result<Vec<GaussianBelief>> {
    let filtered = kalman_filter(params, ys)?;
    let t_len = filtered.len();
    let mut smoothed = filtered.clone();
    for t in (1..t_len).rev() {
        let (f_mat, f_vec, s) = kalman_backward_kernel_coeffs(params, &filtered[t - 1])?;
        let mean = &f_mat * &smoothed[t].mean + f_vec;
        let mut cov = &f_mat * &smoothed[t].cov * f_mat.transpose() + s;
        linalg::symmetrize(&mut cov);
        smoothed[t - 1] = GaussianBelief { mean, cov };
    }
    Ok(smoothed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{simulate, SsmModel};
    use approx::assert_relative_eq;

    /// Test-side reference: the dense joint Gaussian over
    /// `(X_{0:T}, Y_{0:T})` built directly from the generative equations,
    /// conditioned by Schur complement. No Kalman recursions involved.
    struct JointGaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        d_x: usize,
        d_y: usize,
        t_len: usize, // number of time points
    }

    impl JointGaussian {
        fn build(params: &LgssmParams, t_len: usize) -> JointGaussian {
            let d_x = params.dim_x();
            let d_y = params.dim_y();
            let nx = d_x * t_len;
            let ny = d_y * t_len;
            // Noise vector u = (e0, ν_1..ν_{T}, ε_0..ε_T) with block covariance.
            let nu = d_x * t_len + d_y * t_len;
            let mut u_cov = DMatrix::zeros(nu, nu);
            u_cov.view_mut((0, 0), (d_x, d_x)).copy_from(params.q0());
            for k in 1..t_len {
                u_cov
                    .view_mut((k * d_x, k * d_x), (d_x, d_x))
                    .copy_from(params.q());
            }
            for k in 0..t_len {
                u_cov
                    .view_mut((nx + k * d_y, nx + k * d_y), (d_y, d_y))
                    .copy_from(params.r());
            }
            // Z = c + M u with Z = (X_{0:T}, Y_{0:T}).
            let mut m = DMatrix::zeros(nx + ny, nu);
            let mut c = DVector::zeros(nx + ny);
            // X_0 row block.
            c.rows_mut(0, d_x).copy_from(params.mu0());
            m.view_mut((0, 0), (d_x, d_x))
                .copy_from(&DMatrix::identity(d_x, d_x));
            // X_t = A X_{t-1} + ν_t: compose rows.
            for t in 1..t_len {
                let (prev, mut cur) = {
                    let prev = m.rows(( t - 1) * d_x, d_x).clone_owned();
                    (prev, m.rows_mut(t * d_x, d_x))
                };
                cur.copy_from(&(params.a() * prev));
                let c_prev = c.rows((t - 1) * d_x, d_x).clone_owned();
                c.rows_mut(t * d_x, d_x).copy_from(&(params.a() * c_prev));
                let mut block = m.view_mut((t * d_x, t * d_x), (d_x, d_x));
                block += DMatrix::identity(d_x, d_x);
            }
            // Y_t = B X_t + ε_t.
            for t in 0..t_len {
                let x_rows = m.rows(t * d_x, d_x).clone_owned();
                m.rows_mut(nx + t * d_y, d_y).copy_from(&(params.b() * x_rows));
                let c_x = c.rows(t * d_x, d_x).clone_owned();
                c.rows_mut(nx + t * d_y, d_y).copy_from(&(params.b() * c_x));
                let mut block = m.view_mut((nx + t * d_y, nx + t * d_y), (d_y, d_y));
                block += DMatrix::identity(d_y, d_y);
            }
            let cov = &m * u_cov * m.transpose();
            JointGaussian {
                mean: c,
                cov,
                d_x,
                d_y,
                t_len,
            }
        }

        /// Conditions target index set on observed index set at given values.
        fn condition(
            &self,
            target: &[usize],
            given: &[usize],
            values: &DVector<f64>,
        ) -> GaussianBelief {
            let s_tt = DMatrix::from_fn(target.len(), target.len(), |r, c| {
                self.cov[(target[r], target[c])]
            });
            let s_tg = DMatrix::from_fn(target.len(), given.len(), |r, c| {
                self.cov[(target[r], given[c])]
            });
            let s_gg = DMatrix::from_fn(given.len(), given.len(), |r, c| {
                self.cov[(given[r], given[c])]
            });
            let mu_t = DVector::from_fn(target.len(), |r, _| self.mean[target[r]]);
            let mu_g = DVector::from_fn(given.len(), |r, _| self.mean[given[r]]);
            let s_gg_inv = s_gg
                .clone()
                .try_inverse()
                .expect("conditioning covariance invertible");
            let mean = &mu_t + &s_tg * &s_gg_inv * (values - mu_g);
            let cov = s_tt - &s_tg * s_gg_inv * s_tg.transpose();
            GaussianBelief { mean, cov }
        }

        fn x_indices(&self, t: usize) -> Vec<usize> {
            (t * self.d_x..(t + 1) * self.d_x).collect()
        }

        fn y_indices_upto(&self, t_incl: usize) -> Vec<usize> {
            let base = self.d_x * self.t_len;
            (0..=t_incl)
                .flat_map(|t| base + t * self.d_y..base + (t + 1) * self.d_y)
                .collect()
        }

        fn log_evidence(&self, ys: &[DVector<f64>]) -> f64 {
            let idx = self.y_indices_upto(ys.len() - 1);
            let mu = DVector::from_fn(idx.len(), |r, _| self.mean[idx[r]]);
            let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| {
                self.cov[(idx[r], idx[c])]
            });
            let mut y_flat = DVector::zeros(idx.len());
            for (t, y) in ys.iter().enumerate() {
                y_flat.rows_mut(t * self.d_y, self.d_y).copy_from(y);
            }
            let chol = linalg::spd_cholesky(&cov, "joint Y covariance").unwrap();
            let z = linalg::solve_lower(&chol, &(y_flat - mu));
            -0.5 * (z.norm_squared()
                + linalg::chol_logdet(&chol)
                + idx.len() as f64 * (2.0 * std::f64::consts::PI).ln())
        }
    }

    fn flatten_obs(ys: &[DVector<f64>]) -> DVector<f64> {
        let d = ys[0].len();
        let mut out = DVector::zeros(d * ys.len());
        for (t, y) in ys.iter().enumerate() {
            out.rows_mut(t * d, d).copy_from(y);
        }
        out
    }

    #[test]
    fn scalar_conjugate_update() {
        let params = LgssmParams::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let ys = vec![DVector::from_element(1, 1.0)];
        let filt = kalman_filter(&params, &ys).unwrap();
        assert_relative_eq!(filt[0].mean[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(filt[0].cov[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_observation_matrix_gives_open_loop_moments() {
        let params = LgssmParams::new(
            DVector::from_row_slice(&[1.0, -1.0]),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.7]),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2) * 0.2,
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let ys = vec![DVector::zeros(2); 4];
        let filt = kalman_filter(&params, &ys).unwrap();
        let mut mean = params.mu0().clone();
        let mut cov = params.q0().clone();
        for t in 0..4 {
            if t > 0 {
                mean = params.a() * mean;
                cov = params.a() * cov * params.a().transpose() + params.q();
            }
            assert_relative_eq!(&filt[t].mean, &mean, epsilon = 1e-10);
            assert_relative_eq!(&filt[t].cov, &cov, epsilon = 1e-10);
        }
    }

    #[test]
    fn filter_matches_dense_joint_conditioning() {
        let params = LgssmParams::random_stable(2, 2, 31);
        let traj = simulate(&params, 3, 7);
        let ys = &traj.observations;
        let joint = JointGaussian::build(&params, 4);
        let filt = kalman_filter(&params, ys).unwrap();
        for t in 0..4 {
            let obs = flatten_obs(&ys[..=t]);
            let reference = joint.condition(&joint.x_indices(t), &joint.y_indices_upto(t), &obs);
            assert_relative_eq!(&filt[t].mean, &reference.mean, epsilon = 1e-8);
            assert_relative_eq!(&filt[t].cov, &reference.cov, epsilon = 1e-8);
        }
        // Innovations log-evidence against the dense Gaussian density.
        let ll = innovations_log_likelihood(&params, ys).unwrap();
        assert_relative_eq!(ll, joint.log_evidence(ys), epsilon = 1e-8);
    }

    #[test]
    fn backward_kernel_matches_dense_joint_conditioning() {
        let params = LgssmParams::random_stable(2, 2, 32);
        let traj = simulate(&params, 3, 8);
        let ys = &traj.observations;
        let joint = JointGaussian::build(&params, 4);
        let filt = kalman_filter(&params, ys).unwrap();
        let x_t = DVector::from_row_slice(&[0.4, -0.9]);
        for t in 1..4 {
            let kernel = kalman_backward_kernel(&params, &filt[t - 1], &x_t).unwrap();
            // Condition X_{t-1} on (X_t, Y_{0:t-1}) jointly.
            let mut given = joint.x_indices(t);
            given.extend(joint.y_indices_upto(t - 1));
            let mut values = DVector::zeros(given.len());
            values.rows_mut(0, 2).copy_from(&x_t);
            values
                .rows_mut(2, 2 * t)
                .copy_from(&flatten_obs(&ys[..=t - 1]));
            let reference = joint.condition(&joint.x_indices(t - 1), &given, &values);
            assert_relative_eq!(&kernel.mean, &reference.mean, epsilon = 1e-8);
            assert_relative_eq!(&kernel.cov, &reference.cov, epsilon = 1e-8);
        }
    }

    #[test]
    fn uninformative_transition_collapses_kernel_to_filter() {
        let params = LgssmParams::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.1, 0.8]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 1e6,
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let filt_prev = GaussianBelief {
            mean: DVector::from_row_slice(&[0.3, -0.2]),
            cov: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]),
        };
        let kernel =
            kalman_backward_kernel(&params, &filt_prev, &DVector::from_row_slice(&[5.0, -7.0]))
                .unwrap();
        assert_relative_eq!(&kernel.mean, &filt_prev.mean, epsilon = 1e-3);
        assert_relative_eq!(&kernel.cov, &filt_prev.cov, epsilon = 1e-3);
    }

    #[test]
    fn smoother_matches_dense_joint_conditioning() {
        let params = LgssmParams::random_stable(2, 2, 33);
        let traj = simulate(&params, 3, 9);
        let ys = &traj.observations;
        let joint = JointGaussian::build(&params, 4);
        let smoothed = kalman_smoother(&params, ys).unwrap();
        let all_y = flatten_obs(ys);
        for t in 0..4 {
            let reference = joint.condition(&joint.x_indices(t), &joint.y_indices_upto(3), &all_y);
            assert!(
                (&smoothed[t].mean - &reference.mean).norm() < 1e-8,
                "smoothed mean mismatch at t={t}"
            );
            assert!((&smoothed[t].cov - &reference.cov).norm() < 1e-8);
        }
        // Marginalizing the backward kernel against the filtered/smoothed
        // belief at t reproduces the smoothing marginal at t−1 (see the
        // smoother implementation; checked here against the dense reference
        // independently via the kernel op).
        let filt = kalman_filter(&params, ys).unwrap();
        let (f_mat, f_vec, s) = kalman_backward_kernel_coeffs(&params, &filt[2]).unwrap();
        let mean = &f_mat * &smoothed[3].mean + f_vec;
        let cov = &f_mat * &smoothed[3].cov * f_mat.transpose() + s;
        assert_relative_eq!(&mean, &smoothed[2].mean, epsilon = 1e-8);
        assert_relative_eq!(&cov, &smoothed[2].cov, epsilon = 1e-8);
    }
}
