//! Linear-Gaussian state-space model.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rngstreams::{stream, Purpose, Stream, StreamKey};

use super::SsmModel;

/// Centred Gaussian noise term with a cached Cholesky factor.
///
/// An exactly-zero covariance is accepted for simulation (the noise is then
/// deterministic zero), but evaluating a density against it is an error.
#[derive(Clone, Debug)]
pub(crate) struct GaussianNoise {
    cov: DMatrix<f64>,
    chol: Option<DMatrix<f64>>,
    /// −½ log det(2π Σ), precomputed.
    log_norm: f64,
}

impl GaussianNoise {
    pub(crate) fn new(cov: DMatrix<f64>, what: &str) -> Result<Self> {
        let cov = linalg::symmetrized(&cov);
        match linalg::spd_cholesky(&cov, what) {
            Ok(chol) => {
                let d = cov.nrows() as f64;
                let log_norm =
                    -0.5 * (linalg::chol_logdet(&chol) + d * (2.0 * std::f64::consts::PI).ln());
                Ok(GaussianNoise {
                    cov,
                    chol: Some(chol),
                    log_norm,
                })
            }
            Err(e) => {
                if cov.iter().all(|&v| v == 0.0) {
                    Ok(GaussianNoise {
                        cov,
                        chol: None,
                        log_norm: f64::NEG_INFINITY,
                    })
                } else {
                    Err(e)
                }
            }
        }
    }

    pub(crate) fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Draws one noise vector (zero for the degenerate case).
    pub(crate) fn perturb(&self, rng: &mut Stream) -> DVector<f64> {
        let d = self.cov.nrows();
        match &self.chol {
            Some(l) => {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
                l * z
            }
            None => DVector::zeros(d),
        }
    }

    /// Log-density of the noise at `diff`.
    pub(crate) fn log_pdf(&self, diff: &DVector<f64>) -> Result<f64> {
        match &self.chol {
            Some(l) => {
                let z = linalg::solve_lower(l, diff);
                Ok(self.log_norm - 0.5 * z.norm_squared())
            }
            None => Err(Error::NotPositiveDefinite {
                what: "degenerate (zero) noise covariance in density evaluation".into(),
            }),
        }
    }
}

/// Largest eigenvalue modulus of a square matrix.
pub(crate) fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z: &nalgebra::Complex<f64>| (z.re * z.re + z.im * z.im).sqrt())
        .fold(0.0f64, f64::max)
}

fn rescale_spectral_radius(m: DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let rho = spectral_radius(&m);
    m * (target / rho.max(1e-12))
}

/// Parameters of the linear-Gaussian model
/// `X₀ ~ N(μ₀, Q₀)`, `X_t = A X_{t−1} + ν_t`, `Y_t = B X_t + ε_t`.
#[derive(Clone, Debug)]
pub struct LgssmParams {
    mu0: DVector<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    init_noise: GaussianNoise,
    state_noise: GaussianNoise,
    obs_noise: GaussianNoise,
}

impl LgssmParams {
    pub fn new(
        mu0: DVector<f64>,
        q0: DMatrix<f64>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        let d_x = mu0.len();
        let d_y = b.nrows();
        for (name, rows, cols, expect) in [
            ("Q0", q0.nrows(), q0.ncols(), d_x),
            ("A", a.nrows(), a.ncols(), d_x),
            ("Q", q.nrows(), q.ncols(), d_x),
            ("R", r.nrows(), r.ncols(), d_y),
        ] {
            if rows != expect || cols != expect {
                return Err(Error::Dimension {
                    what: format!("LGSSM parameter {name}"),
                    expected: expect,
                    got: rows.max(cols),
                });
            }
        }
        if b.ncols() != d_x {
            return Err(Error::Dimension {
                what: "LGSSM parameter B".into(),
                expected: d_x,
                got: b.ncols(),
            });
        }
        Ok(LgssmParams {
            mu0,
            a,
            b,
            init_noise: GaussianNoise::new(q0, "Q0")?,
            state_noise: GaussianNoise::new(q, "Q")?,
            obs_noise: GaussianNoise::new(r, "R")?,
        })
    }

    /// Draws a random, stable instance: the transition matrix is rescaled to
    /// spectral radius 0.8 so simulated trajectories neither explode nor
    /// collapse, and the noise covariances are well-conditioned SPD matrices.
    pub fn random_stable(d_x: usize, d_y: usize, seed: u64) -> LgssmParams {
        let mut rng = stream(StreamKey::new(seed, Purpose::ParamInit, 0, 0));
        let mut randn =
            |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));

        let a_raw = randn(d_x, d_x);
        let a = rescale_spectral_radius(a_raw, 0.8);

        let scale = 1.0 / (d_x as f64).sqrt();
        let mut b = DMatrix::zeros(d_y, d_x);
        for i in 0..d_y.min(d_x) {
            b[(i, i)] = 1.0;
        }
        b += randn(d_y, d_x) * (0.3 * scale);

        let gq = randn(d_x, d_x);
        let q = DMatrix::identity(d_x, d_x) * 0.05 + (&gq * gq.transpose()) * (0.05 / d_x as f64);
        let gr = randn(d_y, d_y);
        let r = DMatrix::identity(d_y, d_y) * 0.1 + (&gr * gr.transpose()) * (0.05 / d_y as f64);
        let q0 = DMatrix::identity(d_x, d_x);
        let mu0 = DVector::from_fn(d_x, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z
        });
        LgssmParams::new(mu0, q0, a, b, q, r).expect("constructed SPD covariances")
    }

    pub fn mu0(&self) -> &DVector<f64> {
        &self.mu0
    }

    pub fn q0(&self) -> &DMatrix<f64> {
        self.init_noise.cov()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        self.state_noise.cov()
    }

    pub fn r(&self) -> &DMatrix<f64> {
        self.obs_noise.cov()
    }
}

impl SsmModel for LgssmParams {
    fn dim_x(&self) -> usize {
        self.mu0.len()
    }

    fn dim_y(&self) -> usize {
        self.b.nrows()
    }

    fn log_initial(&self, x: &DVector<f64>) -> Result<f64> {
        self.init_noise.log_pdf(&(x - &self.mu0))
    }

    fn log_transition(&self, _t: usize, x_prev: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.state_noise.log_pdf(&(x - &self.a * x_prev))
    }

    fn log_emission(&self, _t: usize, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.obs_noise.log_pdf(&(y - &self.b * x))
    }

    fn sample_initial(&self, rng: &mut Stream) -> DVector<f64> {
        &self.mu0 + self.init_noise.perturb(rng)
    }

    fn sample_transition(
        &self,
        _t: usize,
        x_prev: &DVector<f64>,
        rng: &mut Stream,
    ) -> DVector<f64> {
        &self.a * x_prev + self.state_noise.perturb(rng)
    }

    fn sample_emission(&self, _t: usize, x: &DVector<f64>, rng: &mut Stream) -> DVector<f64> {
        &self.b * x + self.obs_noise.perturb(rng)
    }
}
