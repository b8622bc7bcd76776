//! Chaotic recurrent-network state-space model with heavy-tailed
//! observations:
//!
//! `X₀ ~ N(0, Q)`,
//! `X_t = X_{t−1} + (Δ/τ)(γ W tanh(X_{t−1}) − X_{t−1}) + η_t`,
//! `Y_t = X_t + ε_t`,
//!
//! where `η_t ~ N(0, Q)` and each coordinate of `ε_t` is an independent
//! scaled Student-t.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal, StudentT};

use crate::error::{Error, Result};
use crate::linalg::ln_gamma;
use crate::rngstreams::{stream, Purpose, Stream, StreamKey};

use super::lgssm::GaussianNoise;
use super::SsmModel;

#[derive(Clone, Debug)]
pub struct ChaoticRnnParams {
    pub w: DMatrix<f64>,
    pub step: f64,
    pub tau: f64,
    pub gain: f64,
    pub student_dof: f64,
    pub student_scale: f64,
    state_noise: GaussianNoise,
    /// Log-normalizer of the scalar Student-t density, cached.
    t_log_norm: f64,
}

impl ChaoticRnnParams {
    pub fn new(
        w: DMatrix<f64>,
        step: f64,
        tau: f64,
        gain: f64,
        q: DMatrix<f64>,
        student_dof: f64,
        student_scale: f64,
    ) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::Dimension {
                what: "chaotic-RNN weight matrix".into(),
                expected: w.nrows(),
                got: w.ncols(),
            });
        }
        if !(step > 0.0 && tau > 0.0 && student_dof > 0.0 && student_scale > 0.0) {
            return Err(Error::Config(
                "chaotic-RNN scalar hyperparameters must be positive".into(),
            ));
        }
        let nu = student_dof;
        let t_log_norm = ln_gamma(0.5 * (nu + 1.0))
            - ln_gamma(0.5 * nu)
            - 0.5 * (nu * std::f64::consts::PI).ln()
            - student_scale.ln();
        Ok(ChaoticRnnParams {
            w,
            step,
            tau,
            gain,
            student_dof,
            student_scale,
            state_noise: GaussianNoise::new(q, "Q")?,
            t_log_norm,
        })
    }

    /// The reference configuration: `Δ = 0.001`, `τ = 0.025`, `γ = 2.5`,
    /// `Q = diag(0.01)`, Student-t(2) observation noise with scale 0.1, and
    /// connectivity `W` drawn i.i.d. `N(0, 1/d_x)` from the given seed.
    pub fn standard(d_x: usize, seed: u64) -> ChaoticRnnParams {
        let mut rng = stream(StreamKey::new(seed, Purpose::ParamInit, 0, 1));
        let scale = 1.0 / (d_x as f64).sqrt();
        let w = DMatrix::from_fn(d_x, d_x, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        ChaoticRnnParams::new(
            w,
            0.001,
            0.025,
            2.5,
            DMatrix::identity(d_x, d_x) * 0.01,
            2.0,
            0.1,
        )
        .expect("reference hyperparameters are valid")
    }

    pub fn q(&self) -> &DMatrix<f64> {
        self.state_noise.cov()
    }

    /// Deterministic part of the transition.
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let rate = self.step / self.tau;
        let tanh_x = x.map(f64::tanh);
        x * (1.0 - rate) + (&self.w * tanh_x) * (rate * self.gain)
    }

    /// Log-density of one scaled Student-t observation residual.
    fn log_student(&self, z: f64) -> f64 {
        let nu = self.student_dof;
        let u = z / self.student_scale;
        self.t_log_norm - 0.5 * (nu + 1.0) * (u * u / nu).ln_1p()
    }
}

impl SsmModel for ChaoticRnnParams {
    fn dim_x(&self) -> usize {
        self.w.nrows()
    }

    fn dim_y(&self) -> usize {
        self.w.nrows()
    }

    fn log_initial(&self, x: &DVector<f64>) -> Result<f64> {
        self.state_noise.log_pdf(x)
    }

    fn log_transition(&self, _t: usize, x_prev: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.state_noise.log_pdf(&(x - self.drift(x_prev)))
    }

    fn log_emission(&self, _t: usize, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        if y.len() != x.len() {
            return Err(Error::Dimension {
                what: "chaotic-RNN observation".into(),
                expected: x.len(),
                got: y.len(),
            });
        }
        Ok((0..x.len()).map(|k| self.log_student(y[k] - x[k])).sum())
    }

    fn sample_initial(&self, rng: &mut Stream) -> DVector<f64> {
        self.state_noise.perturb(rng)
    }

    fn sample_transition(
        &self,
        _t: usize,
        x_prev: &DVector<f64>,
        rng: &mut Stream,
    ) -> DVector<f64> {
        self.drift(x_prev) + self.state_noise.perturb(rng)
    }

    fn sample_emission(&self, _t: usize, x: &DVector<f64>, rng: &mut Stream) -> DVector<f64> {
        let t = StudentT::new(self.student_dof).expect("dof validated at construction");
        DVector::from_fn(x.len(), |k, _| {
            x[k] + self.student_scale * t.sample(rng)
        })
    }
}
