//! Error metrics comparing state estimates against the simulated truth.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::models::Trajectory;

/// Time-averaged root-mean-square state error
/// `mean_t √( (1/d_x) Σ_k (x*_{t,k} − x̂_{t,k})² )`.
///
/// `means` must align with `traj.states` one-to-one.
pub fn metric_smoothing_rmse(traj: &Trajectory, means: &[DVector<f64>]) -> Result<f64> {
    rmse_over(&traj.states, means, "smoothing means")
}

/// One-step smoothing and filtering errors `(κ¹, κ²)`.
///
/// `onestep_means[t−1]` estimates `E_{q_{t−1:t}}[X_{t−1}]` — the previous
/// state under the pair law at `t`, read off the backward-weighted cloud —
/// so it is scored against `x*_{t−1}` for `t = 1..=T`. `κ²` is the same
/// time-averaged RMSE applied to the filtering means.
pub fn metric_onestep(
    traj: &Trajectory,
    onestep_means: &[DVector<f64>],
    filt_means: &[DVector<f64>],
) -> Result<(f64, f64)> {
    if traj.states.len() < 2 {
        return Err(Error::Config(
            "one-step metrics need a trajectory with at least two time points".into(),
        ));
    }
    let kappa1 = rmse_over(
        &traj.states[..traj.states.len() - 1],
        onestep_means,
        "one-step smoothing means",
    )?;
    let kappa2 = rmse_over(&traj.states, filt_means, "filtering means")?;
    Ok((kappa1, kappa2))
}

fn rmse_over(states: &[DVector<f64>], means: &[DVector<f64>], what: &str) -> Result<f64> {
    if states.len() != means.len() {
        return Err(Error::Dimension {
            what: what.into(),
            expected: states.len(),
            got: means.len(),
        });
    }
    if states.is_empty() {
        return Err(Error::Config(format!("{what}: empty sequence")));
    }
    let mut acc = 0.0;
    for (x, m) in states.iter().zip(means) {
        if m.len() != x.len() {
            return Err(Error::Dimension {
                what: format!("{what} entry"),
                expected: x.len(),
                got: m.len(),
            });
        }
        acc += ((x - m).norm_squared() / x.len() as f64).sqrt();
    }
    Ok(acc / states.len() as f64)
}
