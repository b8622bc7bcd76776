//! Exact linear-Gaussian references.
//!
//! Everything in this module is independent of the particle estimator: the
//! Kalman filter/smoother and the closed-form ELBO recursion provide ground
//! truth that the Monte Carlo machinery is tested against, and the
//! backward-MC estimator is the classical reparameterized baseline.

mod backward_mc;
mod closed_form;
mod kalman;

pub use backward_mc::backward_mc_elbo_grad;
pub use closed_form::closed_form_elbo_and_grad;
pub use kalman::{
    innovations_log_likelihood, kalman_backward_kernel, kalman_backward_kernel_coeffs,
    kalman_filter, kalman_run, kalman_smoother, GaussianBelief, KalmanRun,
};
