//! Generative state-space models.
//!
//! A model supplies the three log-density factors of the joint distribution —
//! initial law, transition and emission — plus samplers for each. The
//! estimator only ever touches models through [`log_ell`], the per-step joint
//! factor, and through simulated [`Trajectory`] data.

mod chaotic;
mod lgssm;

pub use chaotic::ChaoticRnnParams;
pub use lgssm::LgssmParams;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::rngstreams::{stream, Purpose, Stream, StreamKey};

/// Interface every generative model implements.
pub trait SsmModel: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    /// `log χ(x₀)`.
    fn log_initial(&self, x: &DVector<f64>) -> Result<f64>;
    /// `log h_t(x_{t−1}, x_t)`.
    fn log_transition(&self, t: usize, x_prev: &DVector<f64>, x: &DVector<f64>) -> Result<f64>;
    /// `log m_t(x_t, y_t)`.
    fn log_emission(&self, t: usize, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64>;

    fn sample_initial(&self, rng: &mut Stream) -> DVector<f64>;
    fn sample_transition(&self, t: usize, x_prev: &DVector<f64>, rng: &mut Stream)
        -> DVector<f64>;
    fn sample_emission(&self, t: usize, x: &DVector<f64>, rng: &mut Stream) -> DVector<f64>;
}

/// A simulated state/observation pair sequence, `t = 0..=T`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    /// Number of time steps `T` (the sequence holds `T + 1` entries).
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// Simulates a trajectory of horizon `T` (that is, `T + 1` time points).
///
/// Each noise draw comes from its own keyed stream, so trajectories are
/// bitwise reproducible from `(params, seed, T)` alone and insensitive to
/// any surrounding RNG usage.
pub fn simulate<M: SsmModel + ?Sized>(model: &M, t_len: usize, seed: u64) -> Trajectory {
    let mut states = Vec::with_capacity(t_len + 1);
    let mut observations = Vec::with_capacity(t_len + 1);
    for t in 0..=t_len {
        let x = if t == 0 {
            let mut rng = stream(StreamKey::new(seed, Purpose::SimState, 0, 0));
            model.sample_initial(&mut rng)
        } else {
            let mut rng = stream(StreamKey::new(seed, Purpose::SimState, t as u64, 0));
            model.sample_transition(t, states.last().unwrap(), &mut rng)
        };
        let mut rng = stream(StreamKey::new(seed, Purpose::SimObs, t as u64, 0));
        let y = model.sample_emission(t, &x, &mut rng);
        states.push(x);
        observations.push(y);
    }
    Trajectory {
        states,
        observations,
        seed,
    }
}

/// Log of the per-step joint factor `ℓ_t`:
/// `log χ(x₀) + log m₀(x₀, y₀)` at `t = 0`, and
/// `log h_t(x_{t−1}, x_t) + log m_t(x_t, y_t)` for `t ≥ 1`.
pub fn log_ell<M: SsmModel + ?Sized>(
    model: &M,
    t: usize,
    x_prev: Option<&DVector<f64>>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    if x.len() != model.dim_x() {
        return Err(Error::Dimension {
            what: "state".into(),
            expected: model.dim_x(),
            got: x.len(),
        });
    }
    if y.len() != model.dim_y() {
        return Err(Error::Dimension {
            what: "observation".into(),
            expected: model.dim_y(),
            got: y.len(),
        });
    }
    let trans = match (t, x_prev) {
        (0, _) => model.log_initial(x)?,
        (_, Some(xp)) => model.log_transition(t, xp, x)?,
        (_, None) => {
            return Err(Error::Config(
                "log_ell requires the previous state for t ≥ 1".into(),
            ))
        }
    };
    Ok(trans + model.log_emission(t, x, y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn lgssm_1d_unit() -> LgssmParams {
        LgssmParams::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_lgssm_is_identically_zero() {
        let params = LgssmParams::new(
            DVector::zeros(2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let traj = simulate(&params, 10, 123);
        for t in 0..=10 {
            assert_eq!(traj.states[t], DVector::zeros(2));
            assert_eq!(traj.observations[t], DVector::zeros(2));
        }
    }

    #[test]
    fn simulation_is_deterministic_in_seed() {
        let params = LgssmParams::random_stable(2, 2, 7);
        let a = simulate(&params, 20, 99);
        let b = simulate(&params, 20, 99);
        let c = simulate(&params, 20, 100);
        assert_eq!(a.states, b.states);
        assert_eq!(a.observations, b.observations);
        assert_ne!(a.states, c.states);
        // Prefix property: a longer run shares the prefix (streams are keyed
        // by t, not by draw order).
        let long = simulate(&params, 25, 99);
        assert_eq!(&long.states[..21], &a.states[..]);
    }

    #[test]
    fn chaotic_hyperparameters_accepted_and_finite() {
        let params = ChaoticRnnParams::standard(5, 42);
        assert_relative_eq!(params.step, 0.001);
        assert_relative_eq!(params.tau, 0.025);
        assert_relative_eq!(params.gain, 2.5);
        assert_relative_eq!(params.student_dof, 2.0);
        assert_relative_eq!(params.student_scale, 0.1);
        let traj = simulate(&params, 200, 3);
        for t in 0..=200 {
            assert!(traj.states[t].iter().all(|v| v.is_finite()));
            assert!(traj.observations[t].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn log_ell_at_time_zero_is_two_standard_normals() {
        let params = lgssm_1d_unit();
        let v = log_ell(&params, 0, None, &DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert_relative_eq!(v, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
        assert_relative_eq!(v, -1.837_877_066_409_345_5, epsilon = 1e-12);
    }

    #[test]
    fn log_ell_splits_into_transition_plus_emission() {
        let params = LgssmParams::random_stable(2, 2, 5);
        let xp = DVector::from_row_slice(&[0.2, -0.4]);
        let x = DVector::from_row_slice(&[0.5, 0.1]);
        let y = DVector::from_row_slice(&[-0.3, 0.8]);
        let whole = log_ell(&params, 1, Some(&xp), &x, &y).unwrap();
        let parts =
            params.log_transition(1, &xp, &x).unwrap() + params.log_emission(1, &x, &y).unwrap();
        assert_relative_eq!(whole, parts, epsilon = 1e-12);
        assert!(log_ell(&params, 1, None, &x, &y).is_err());
    }

    #[test]
    fn student_t_emission_matches_scalar_density() {
        let params = ChaoticRnnParams::standard(3, 1);
        let x = DVector::from_row_slice(&[0.1, -0.2, 0.3]);
        // y = x puts every coordinate residual at zero. The scalar value is
        // ln Γ(1.5) − ln Γ(1) − ½ln(2π) − ln(0.1) = 1.262864322…, derived
        // from the Student-t normalizer with ν = 2, σ = 0.1.
        let v = params.log_emission(0, &x, &x).unwrap();
        assert_relative_eq!(v, 3.0 * 1.262_864_322_154_128, epsilon = 1e-9);
    }

    #[test]
    fn transition_density_normalizes_in_one_dimension() {
        let params = lgssm_1d_unit();
        let xp = DVector::from_element(1, 0.7);
        let mut total = 0.0;
        let (lo, hi, n) = (-12.0f64, 13.0f64, 25_000usize);
        let h = (hi - lo) / n as f64;
        for k in 0..=n {
            let x = DVector::from_element(1, lo + k as f64 * h);
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            total += w * params.log_transition(1, &xp, &x).unwrap().exp();
        }
        assert_relative_eq!(total * h, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn student_t_density_normalizes_despite_heavy_tails() {
        let params = ChaoticRnnParams::standard(1, 1);
        let x = DVector::zeros(1);
        // ±120 scale units covers all but ~7e-5 of a t(2) distribution.
        let (lo, hi, n) = (-12.0f64, 12.0f64, 200_000usize);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for k in 0..=n {
            let y = DVector::from_element(1, lo + k as f64 * h);
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            total += w * params.log_emission(0, &x, &y).unwrap().exp();
        }
        assert_relative_eq!(total * h, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn simulated_variance_matches_analytic_lgssm_moments() {
        // Var(X₁) = A Q₀ Aᵀ + Q for the first transition.
        let params = LgssmParams::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.8),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.3),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for seed in 0..n {
            let traj = simulate(&params, 1, seed as u64);
            let v = traj.states[1][0];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let target = 0.8 * 0.5 * 0.8 + 0.3;
        // Var of the sample variance ≈ 2σ⁴/n for Gaussian data.
        let se = (2.0 * target * target / n as f64).sqrt();
        assert!(
            (var - target).abs() < 3.0 * se,
            "variance {var} vs {target} (se {se})"
        );
    }
}
