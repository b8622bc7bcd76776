//! Multivariate Gaussians in natural (exponential-family) coordinates.
//!
//! The density is written `q(x) = exp(η₁ᵀx + xᵀη₂x − A(η))` with sufficient
//! statistics `T(x) = (x, x xᵀ)`. Natural coordinates make two operations
//! cheap that the estimator uses constantly: multiplying a marginal by a
//! conjugate potential is vector addition of parameters, and the score with
//! respect to the parameters is `T(x)` minus its expectation.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rngstreams::Stream;

/// Length of the flattened natural-parameter vector for dimension `d`:
/// `d` entries for η₁ followed by `d²` row-major entries for η₂.
pub fn eta_dim(d: usize) -> usize {
    d + d * d
}

/// Gaussian in moment coordinates.
#[derive(Clone, Debug)]
pub struct MeanGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MeanGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        MeanGaussian { mean, cov }
    }

    /// Converts to natural coordinates: `η₁ = Σ⁻¹μ`, `η₂ = −½Σ⁻¹`.
    pub fn to_natural(&self) -> Result<NaturalGaussian> {
        let prec = linalg::spd_inverse(&self.cov, "covariance")?;
        let eta1 = &prec * &self.mean;
        let eta2 = prec * (-0.5);
        NaturalGaussian::new(eta1, eta2)
    }
}

/// An additive update to natural parameters, e.g. the evaluation of a
/// conjugate potential. Unlike [`NaturalGaussian`] it carries no
/// positive-definiteness requirement of its own.
#[derive(Clone, Debug)]
pub struct NaturalIncrement {
    pub eta1: DVector<f64>,
    pub eta2: DMatrix<f64>,
}

impl NaturalIncrement {
    pub fn zero(d: usize) -> Self {
        NaturalIncrement {
            eta1: DVector::zeros(d),
            eta2: DMatrix::zeros(d, d),
        }
    }
}

/// Gaussian in natural coordinates with cached derived quantities.
///
/// Construction validates that `−2η₂` is positive definite; all derived
/// fields (mean, covariance, precision Cholesky factor, log-partition) are
/// computed once so that the per-particle operations in the estimator touch
/// only cached values.
#[derive(Clone, Debug)]
pub struct NaturalGaussian {
    eta1: DVector<f64>,
    eta2: DMatrix<f64>,
    /// Lower Cholesky factor of the precision `P = −2η₂`.
    prec_chol: DMatrix<f64>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Log-partition `A(η)` so that `log q(x) = ηᵀT(x) − A(η)`.
    log_norm: f64,
}

impl NaturalGaussian {
    pub fn new(eta1: DVector<f64>, eta2: DMatrix<f64>) -> Result<Self> {
        let d = eta1.len();
        if eta2.nrows() != d || eta2.ncols() != d {
            return Err(Error::Dimension {
                what: "natural parameter matrix".into(),
                expected: d,
                got: eta2.nrows(),
            });
        }
        let eta2 = linalg::symmetrized(&eta2);
        let prec = &eta2 * (-2.0);
        let prec_chol = linalg::spd_cholesky(&prec, "precision (−2η₂)")?;
        let mean = linalg::chol_solve(&prec_chol, &eta1);
        let cov = linalg::chol_inverse(&prec_chol);
        // A(η) = ½ η₁ᵀ μ + ½ log det(2π Σ) with log det Σ = −log det P.
        let dd = d as f64;
        let log_det_cov = -linalg::chol_logdet(&prec_chol);
        let log_norm = 0.5 * eta1.dot(&mean)
            + 0.5 * (log_det_cov + dd * (2.0 * std::f64::consts::PI).ln());
        if !log_norm.is_finite() {
            return Err(Error::NonFinite {
                what: "Gaussian log-partition".into(),
            });
        }
        Ok(NaturalGaussian {
            eta1,
            eta2,
            prec_chol,
            mean,
            cov,
            log_norm,
        })
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        NaturalGaussian::new(DVector::zeros(d), DMatrix::identity(d, d) * (-0.5))
            .expect("standard normal parameters are valid")
    }

    pub fn dim(&self) -> usize {
        self.eta1.len()
    }

    pub fn eta1(&self) -> &DVector<f64> {
        &self.eta1
    }

    pub fn eta2(&self) -> &DMatrix<f64> {
        &self.eta2
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of the precision matrix.
    pub fn prec_chol(&self) -> &DMatrix<f64> {
        &self.prec_chol
    }

    /// Log-partition `A(η)`.
    pub fn log_partition(&self) -> f64 {
        self.log_norm
    }

    pub fn to_mean(&self) -> MeanGaussian {
        MeanGaussian::new(self.mean.clone(), self.cov.clone())
    }

    /// Log-density at `x`.
    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        let diff = x - &self.mean;
        // ‖Lᵀ(x−μ)‖² = (x−μ)ᵀP(x−μ) with P = LLᵀ.
        let z = self.prec_chol.transpose() * diff;
        let half_log_det_prec = 0.5 * linalg::chol_logdet(&self.prec_chol);
        -0.5 * z.norm_squared() + half_log_det_prec - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
    }

    /// `ηᵀT(x)` without the log-partition; `log_pdf = natural_dot − A(η)`.
    pub fn natural_dot(&self, x: &DVector<f64>) -> f64 {
        self.eta1.dot(x) + linalg::quad_form(&self.eta2, x)
    }

    /// Draws one sample via `μ + L⁻ᵀ z`, `z ~ N(0, I)`, with `L` the
    /// precision Cholesky factor.
    pub fn sample(&self, rng: &mut Stream) -> DVector<f64> {
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        &self.mean + linalg::solve_lower_transpose(&self.prec_chol, &z)
    }

    /// Score with respect to the natural parameters at `x`:
    /// `∇_η log q(x) = T(x) − E[T(X)]`, flattened as
    /// `[x − μ ; vec(x xᵀ − (Σ + μμᵀ))]` (matrix part row-major).
    pub fn score_natural(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.dim();
        let mut s = DVector::zeros(eta_dim(d));
        for r in 0..d {
            s[r] = x[r] - self.mean[r];
        }
        for r in 0..d {
            for c in 0..d {
                s[d + r * d + c] =
                    x[r] * x[c] - (self.cov[(r, c)] + self.mean[r] * self.mean[c]);
            }
        }
        s
    }

    /// Writes `score_natural(x)` into a caller-provided buffer, avoiding
    /// allocation in per-pair loops.
    pub fn score_natural_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        let d = self.dim();
        debug_assert_eq!(out.len(), eta_dim(d));
        for r in 0..d {
            out[r] = x[r] - self.mean[r];
        }
        for r in 0..d {
            for c in 0..d {
                out[d + r * d + c] = x[r] * x[c] - (self.cov[(r, c)] + self.mean[r] * self.mean[c]);
            }
        }
    }

    /// Multiplies in a conjugate potential: adds the increment to the natural
    /// parameters and revalidates. A non-PD result means the potential has
    /// overwhelmed the marginal's precision and the caller must treat the
    /// kernel as degenerate.
    pub fn add_natural(&self, inc: &NaturalIncrement) -> Result<NaturalGaussian> {
        if inc.eta1.len() != self.dim() {
            return Err(Error::Dimension {
                what: "natural increment".into(),
                expected: self.dim(),
                got: inc.eta1.len(),
            });
        }
        NaturalGaussian::new(&self.eta1 + &inc.eta1, &self.eta2 + &inc.eta2).map_err(|e| {
            match e {
                Error::NotPositiveDefinite { .. } => Error::DegenerateKernel {
                    what: "natural-parameter sum has non-PD precision".into(),
                },
                other => other,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstreams::{stream, Purpose, StreamKey};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn standard_normal_coordinates() {
        let q = NaturalGaussian::standard(3);
        assert_relative_eq!(q.mean().norm(), 0.0);
        assert_relative_eq!(q.cov(), &DMatrix::identity(3, 3), epsilon = 1e-12);
        let m = q.to_mean();
        let back = m.to_natural().unwrap();
        assert_relative_eq!(back.eta1(), q.eta1(), epsilon = 1e-12);
        assert_relative_eq!(back.eta2(), q.eta2(), epsilon = 1e-12);
    }

    #[test]
    fn scalar_natural_parameters_have_known_moments() {
        // η₁ = 1, η₂ = −1  ⇒  precision 2, variance 0.5, mean 0.5.
        let q = NaturalGaussian::new(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, -1.0),
        )
        .unwrap();
        assert_relative_eq!(q.mean()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(q.cov()[(0, 0)], 0.5, epsilon = 1e-12);

        // Independent check: trapezoid quadrature of the unnormalized density.
        let f = |x: f64| (x - x * x).exp();
        let (lo, hi, n) = (-30.0f64, 30.0f64, 600_000usize);
        let h = (hi - lo) / n as f64;
        let mut z = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for k in 0..=n {
            let x = lo + k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            let v = w * f(x);
            z += v;
            m1 += v * x;
            m2 += v * x * x;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        assert_relative_eq!(q.mean()[0], mean, epsilon = 1e-8);
        assert_relative_eq!(q.cov()[(0, 0)], var, epsilon = 1e-8);
        // Quadrature also pins the log-partition: A = log ∫ exp(ηᵀT(x)) dx.
        assert_relative_eq!(q.log_partition(), (z * h).ln(), epsilon = 1e-8);
    }

    #[test]
    fn log_pdf_of_standard_normal_at_origin() {
        let q = NaturalGaussian::standard(1);
        assert_relative_eq!(
            q.log_pdf(&DVector::zeros(1)),
            -0.918_938_533_204_672_7,
            epsilon = 1e-12
        );
        // log_pdf must equal the natural-coordinate expression everywhere.
        let x = DVector::from_element(1, 1.7);
        assert_relative_eq!(
            q.log_pdf(&x),
            q.natural_dot(&x) - q.log_partition(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_pdf_integrates_to_one() {
        let q = NaturalGaussian::new(
            DVector::from_row_slice(&[0.4, -0.2]),
            DMatrix::from_row_slice(2, 2, &[-0.8, 0.2, 0.2, -0.6]),
        )
        .unwrap();
        let (lo, hi, n) = (-12.0f64, 12.0f64, 400usize);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for a in 0..=n {
            for b in 0..=n {
                let x = DVector::from_row_slice(&[lo + a as f64 * h, lo + b as f64 * h]);
                let w = |k: usize| if k == 0 || k == n { 0.5 } else { 1.0 };
                total += w(a) * w(b) * q.log_pdf(&x).exp();
            }
        }
        assert_relative_eq!(total * h * h, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn sampling_matches_moments() {
        let q = NaturalGaussian::new(
            DVector::from_row_slice(&[1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.3, -0.7]),
        )
        .unwrap();
        let n = 100_000;
        let mut rng = stream(StreamKey::new(5, Purpose::Particles, 0, 0));
        let mut mean = DVector::zeros(2);
        let mut sec = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = q.sample(&mut rng);
            mean += &x;
            sec += &x * x.transpose();
        }
        mean /= n as f64;
        sec /= n as f64;
        let cov = sec - &mean * mean.transpose();
        // 4 standard errors of the sample mean/covariance entries.
        let tol_mean = 4.0 * (q.cov()[(0, 0)].max(q.cov()[(1, 1)]) / n as f64).sqrt();
        assert!((mean - q.mean()).norm() < 2.0 * tol_mean);
        assert!((cov - q.cov()).norm() < 10.0 * tol_mean);
    }

    #[test]
    fn score_has_zero_expectation() {
        let q = NaturalGaussian::new(
            DVector::from_row_slice(&[0.3, 0.9]),
            DMatrix::from_row_slice(2, 2, &[-0.9, -0.1, -0.1, -1.2]),
        )
        .unwrap();
        let n = 200_000;
        let mut rng = stream(StreamKey::new(17, Purpose::Particles, 1, 0));
        let mut acc = DVector::zeros(eta_dim(2));
        for _ in 0..n {
            let x = q.sample(&mut rng);
            acc += q.score_natural(&x);
        }
        acc /= n as f64;
        // Var of score entries is O(1) for this parameterization; 5 standard
        // errors with a conservative variance bound of 10.
        let tol = 5.0 * (10.0f64 / n as f64).sqrt();
        for k in 0..acc.len() {
            assert!(acc[k].abs() < tol, "score component {k} biased: {}", acc[k]);
        }
    }

    #[test]
    fn score_matches_finite_difference_of_log_pdf() {
        let eta1 = DVector::from_row_slice(&[0.5, -0.3]);
        let eta2 = DMatrix::from_row_slice(2, 2, &[-1.1, 0.2, 0.2, -0.8]);
        let q = NaturalGaussian::new(eta1.clone(), eta2.clone()).unwrap();
        let x = DVector::from_row_slice(&[0.7, -1.4]);
        let s = q.score_natural(&x);
        let eps = 1e-6;
        for k in 0..2 {
            let mut e1 = eta1.clone();
            e1[k] += eps;
            let fd = (NaturalGaussian::new(e1, eta2.clone()).unwrap().log_pdf(&x)
                - q.log_pdf(&x))
                / eps;
            assert_relative_eq!(fd, s[k], epsilon = 1e-4);
        }
        for r in 0..2 {
            for c in 0..2 {
                let mut e2 = eta2.clone();
                e2[(r, c)] += eps;
                let fd = (NaturalGaussian::new(eta1.clone(), e2).unwrap().log_pdf(&x)
                    - q.log_pdf(&x))
                    / eps;
                assert_relative_eq!(fd, s[2 + r * 2 + c], epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn conjugate_addition_matches_pointwise_product() {
        let q = NaturalGaussian::new(
            DVector::from_element(1, 0.8),
            DMatrix::from_element(1, 1, -0.6),
        )
        .unwrap();
        let inc = NaturalIncrement {
            eta1: DVector::from_element(1, -0.3),
            eta2: DMatrix::from_element(1, 1, -0.9),
        };
        let prod = q.add_natural(&inc).unwrap();
        // log q_prod(x) must equal log q(x) + (increment terms) − logZ with a
        // constant logZ: check constancy across a grid.
        let log_z_at = |x: f64| {
            let xv = DVector::from_element(1, x);
            q.log_pdf(&xv) + inc.eta1[0] * x + inc.eta2[(0, 0)] * x * x - prod.log_pdf(&xv)
        };
        let z0 = log_z_at(-2.0);
        for &x in &[-1.0, 0.0, 0.7, 2.5] {
            assert_relative_eq!(log_z_at(x), z0, epsilon = 1e-10);
        }
        // The conjugacy identity pins logZ itself: A(η+η̃) − A(η).
        assert_relative_eq!(
            z0,
            prod.log_partition() - q.log_partition(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn indefinite_precision_is_rejected() {
        let res = NaturalGaussian::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.5]),
        );
        assert!(res.is_err());
        // And through add_natural the failure is flagged as a degenerate kernel.
        let q = NaturalGaussian::standard(1);
        let inc = NaturalIncrement {
            eta1: DVector::zeros(1),
            eta2: DMatrix::from_element(1, 1, 1.0),
        };
        match q.add_natural(&inc) {
            Err(Error::DegenerateKernel { .. }) => {}
            other => panic!("expected degenerate-kernel error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn natural_mean_roundtrip(
            e1 in proptest::collection::vec(-3.0f64..3.0, 2),
            l in proptest::collection::vec(-1.5f64..1.5, 3),
        ) {
            // Build η₂ = −½ L Lᵀ − 0.05 I from packed factors so it is
            // always negative definite.
            let lm = crate::linalg::unpack_tril(&l, 2);
            let eta2 = (&lm * lm.transpose()) * (-0.5) - DMatrix::identity(2, 2) * 0.05;
            let eta1 = DVector::from_row_slice(&e1);
            let q = NaturalGaussian::new(eta1.clone(), eta2.clone()).unwrap();
            let back = q.to_mean().to_natural().unwrap();
            prop_assert!((back.eta1() - &eta1).norm() < 1e-10 * (1.0 + eta1.norm()));
            prop_assert!((back.eta2() - &eta2).norm() < 1e-10 * (1.0 + eta2.norm()));
        }
    }
}
