//! Gradient-ascent drivers over the variational parameters.
//!
//! Three update styles share one mechanism. An offline epoch ascends the
//! full-sequence gradient; the recursive-epoch and online drivers ascend the
//! telescoping difference `∇̂L_t − ∇̂L_{t−1}` so that summing a full epoch of
//! increments at frozen λ recovers the batch gradient exactly. Drivers are
//! pure functions of (λ, schedule state, gradients): persisting the
//! [`Driver`] alongside λ and replaying from a checkpoint reproduces the
//! trajectory bitwise.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::elbo::GradientEstimate;
use crate::error::{Error, Result};

/// Learning-rate schedule, with whatever state the kind needs.
///
/// `constant` uses `base_rate` forever; `inverse_sqrt` decays as
/// `base_rate / √k` over update counts `k = 1, 2, …`; `adam` keeps
/// first/second-moment vectors and applies the usual bias-corrected step.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant {
        base_rate: f64,
        #[serde(default)]
        step: u64,
    },
    InverseSqrt {
        base_rate: f64,
        #[serde(default)]
        step: u64,
    },
    Adam {
        base_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        step: u64,
        #[serde(default)]
        m: Vec<f64>,
        #[serde(default)]
        v: Vec<f64>,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl StepSchedule {
    pub fn constant(base_rate: f64) -> StepSchedule {
        StepSchedule::Constant { base_rate, step: 0 }
    }

    pub fn inverse_sqrt(base_rate: f64) -> StepSchedule {
        StepSchedule::InverseSqrt { base_rate, step: 0 }
    }

    pub fn adam(base_rate: f64) -> StepSchedule {
        StepSchedule::Adam {
            base_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate = match self {
            StepSchedule::Constant { base_rate, .. }
            | StepSchedule::InverseSqrt { base_rate, .. }
            | StepSchedule::Adam { base_rate, .. } => *base_rate,
        };
        if !(rate > 0.0) {
            return Err(Error::Config(format!("step rate must be positive, got {rate}")));
        }
        if let StepSchedule::Adam {
            beta1, beta2, eps, ..
        } = self
        {
            if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || !(*eps > 0.0) {
                return Err(Error::Config(
                    "adam parameters need 0 ≤ β < 1 and ε > 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            StepSchedule::Constant { step, .. }
            | StepSchedule::InverseSqrt { step, .. }
            | StepSchedule::Adam { step, .. } => *step,
        }
    }

    /// Ascends `lambda` along `direction` and advances the schedule state.
    fn apply(&mut self, lambda: &mut DVector<f64>, direction: &DVector<f64>) {
        match self {
            StepSchedule::Constant { base_rate, step } => {
                *step += 1;
                lambda.axpy(*base_rate, direction, 1.0);
            }
            StepSchedule::InverseSqrt { base_rate, step } => {
                *step += 1;
                let rate = *base_rate / (*step as f64).sqrt();
                lambda.axpy(rate, direction, 1.0);
            }
            StepSchedule::Adam {
                base_rate,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                // Moment vectors grow with λ (per-step schemes append
                // parameter blocks over time).
                if m.len() < lambda.len() {
                    m.resize(lambda.len(), 0.0);
                    v.resize(lambda.len(), 0.0);
                }
                *step += 1;
                let k = *step as i32;
                let bc1 = 1.0 - beta1.powi(k);
                let bc2 = 1.0 - beta2.powi(k);
                for j in 0..lambda.len() {
                    let g = direction[j];
                    m[j] = *beta1 * m[j] + (1.0 - *beta1) * g;
                    v[j] = *beta2 * v[j] + (1.0 - *beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    lambda[j] += *base_rate * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
    }
}

/// Rescales `g` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping. Pure scaling — no coordinate ever changes sign.
pub fn clip_global_norm(g: &mut DVector<f64>, max_norm: f64) -> f64 {
    let norm = g.norm();
    if norm > max_norm && norm > 0.0 {
        g.scale_mut(max_norm / norm);
    }
    norm
}

/// Update driver: a schedule plus optional global-norm gradient clipping.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Driver {
    pub schedule: StepSchedule,
    /// Maximum gradient norm before uniform rescaling; `None` disables
    /// clipping (oracle-driven runs).
    pub clip: Option<f64>,
}

impl Driver {
    pub fn new(schedule: StepSchedule, clip: Option<f64>) -> Driver {
        Driver { schedule, clip }
    }

    /// One full-sequence ascent step: `λ ← λ + γ_{k+1} ∇̂L_T`.
    pub fn offline_epoch(
        &mut self,
        lambda: &mut DVector<f64>,
        grad: &GradientEstimate,
    ) -> Result<()> {
        let dir = grad.grad.clone();
        self.ascend(lambda, dir, grad.t)
    }

    /// One step of the within-epoch recursion:
    /// `λ ← λ + γ (∇̂L_t − ∇̂L_{t−1})`, the previous gradient defaulting to
    /// zero at the start of a sequence.
    pub fn recursive_epoch_step(
        &mut self,
        lambda: &mut DVector<f64>,
        grad_t: &GradientEstimate,
        grad_tm1: Option<&GradientEstimate>,
    ) -> Result<()> {
        let dir = difference(grad_t, grad_tm1);
        self.ascend(lambda, dir, grad_t.t)
    }

    /// The streaming update — the same telescoping difference, with the
    /// previous-step gradient cached under its own (stale) λ rather than
    /// recomputed.
    pub fn online_step(
        &mut self,
        lambda: &mut DVector<f64>,
        grad_t: &GradientEstimate,
        grad_tm1: Option<&GradientEstimate>,
    ) -> Result<()> {
        let dir = difference(grad_t, grad_tm1);
        self.ascend(lambda, dir, grad_t.t)
    }

    fn ascend(&mut self, lambda: &mut DVector<f64>, mut dir: DVector<f64>, t: usize) -> Result<()> {
        if dir.len() != lambda.len() {
            return Err(Error::Dimension {
                what: "gradient for ascent step".into(),
                expected: lambda.len(),
                got: dir.len(),
            });
        }
        if dir.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient at step t={t}"),
            });
        }
        if let Some(max_norm) = self.clip {
            clip_global_norm(&mut dir, max_norm);
        }
        self.schedule.apply(lambda, &dir);
        Ok(())
    }
}

fn difference(grad_t: &GradientEstimate, grad_tm1: Option<&GradientEstimate>) -> DVector<f64> {
    match grad_tm1 {
        None => grad_t.grad.clone(),
        Some(prev) => {
            // The previous gradient may be shorter when λ has grown a new
            // parameter block since (per-step schemes): missing entries
            // are zero.
            let mut dir = grad_t.grad.clone();
            for k in 0..prev.grad.len().min(dir.len()) {
                dir[k] -= prev.grad[k];
            }
            dir
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn est(grad: Vec<f64>, t: usize) -> GradientEstimate {
        GradientEstimate {
            grad: DVector::from_vec(grad),
            elbo: 0.0,
            t,
            n: 1,
            m: 1,
        }
    }

    #[test]
    fn zero_rate_leaves_lambda_unchanged() {
        let mut driver = Driver::new(StepSchedule::constant(0.0), None);
        let mut lambda = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let before = lambda.clone();
        driver
            .offline_epoch(&mut lambda, &est(vec![5.0, 5.0, 5.0], 10))
            .unwrap();
        assert_eq!(lambda, before);
        // A zero rate is still rejected by validation.
        assert!(StepSchedule::constant(0.0).validate().is_err());
        assert!(StepSchedule::constant(0.1).validate().is_ok());
    }

    #[test]
    fn two_identical_gradients_displace_twice() {
        let mut driver = Driver::new(StepSchedule::constant(0.05), None);
        let mut lambda = DVector::zeros(3);
        let g = est(vec![1.0, -2.0, 0.5], 4);
        driver.offline_epoch(&mut lambda, &g).unwrap();
        driver.offline_epoch(&mut lambda, &g).unwrap();
        assert_relative_eq!(
            lambda,
            DVector::from_vec(vec![0.1, -0.2, 0.05]),
            epsilon = 1e-14
        );
    }

    #[test]
    fn first_recursive_step_uses_the_gradient_alone() {
        let mut driver = Driver::new(StepSchedule::constant(1.0), None);
        let mut lambda = DVector::zeros(2);
        driver
            .recursive_epoch_step(&mut lambda, &est(vec![0.3, -0.1], 0), None)
            .unwrap();
        assert_relative_eq!(lambda, DVector::from_vec(vec![0.3, -0.1]), epsilon = 1e-14);
    }

    #[test]
    fn identical_consecutive_gradients_cancel() {
        let mut driver = Driver::new(StepSchedule::constant(1.0), None);
        let mut lambda = DVector::from_vec(vec![7.0, 8.0]);
        let before = lambda.clone();
        let g = est(vec![0.4, 0.9], 3);
        driver.online_step(&mut lambda, &g, Some(&g)).unwrap();
        assert_eq!(lambda, before);
    }

    /// At frozen λ the increments telescope: a whole epoch of recursive
    /// steps displaces λ by exactly one offline epoch.
    #[test]
    fn recursive_epoch_telescopes_to_the_batch_gradient() {
        let dim = 5;
        let t_len = 12;
        let grads: Vec<GradientEstimate> = (0..=t_len)
            .map(|t| {
                est(
                    (0..dim)
                        .map(|k| ((t * 31 + k * 17) % 13) as f64 / 13.0 - 0.5)
                        .collect(),
                    t,
                )
            })
            .collect();
        let mut recursive = Driver::new(StepSchedule::constant(0.2), None);
        let mut lam_rec = DVector::zeros(dim);
        for t in 0..=t_len {
            let prev = if t == 0 { None } else { Some(&grads[t - 1]) };
            recursive
                .recursive_epoch_step(&mut lam_rec, &grads[t], prev)
                .unwrap();
        }
        let mut offline = Driver::new(StepSchedule::constant(0.2), None);
        let mut lam_off = DVector::zeros(dim);
        offline.offline_epoch(&mut lam_off, &grads[t_len]).unwrap();
        assert_relative_eq!(lam_rec, lam_off, epsilon = 1e-12);
    }

    #[test]
    fn inverse_sqrt_rate_decays() {
        let mut driver = Driver::new(StepSchedule::inverse_sqrt(1.0), None);
        let mut lambda = DVector::zeros(1);
        let g = est(vec![1.0], 0);
        driver.offline_epoch(&mut lambda, &g).unwrap();
        let first = lambda[0];
        driver.offline_epoch(&mut lambda, &g).unwrap();
        let second = lambda[0] - first;
        assert_relative_eq!(first, 1.0, epsilon = 1e-14);
        assert_relative_eq!(second, 1.0 / 2f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn adam_moves_along_the_gradient_sign() {
        let mut driver = Driver::new(StepSchedule::adam(0.1), None);
        let mut lambda = DVector::zeros(3);
        let g = est(vec![1.0, -3.0, 0.2], 0);
        for _ in 0..5 {
            driver.offline_epoch(&mut lambda, &g).unwrap();
        }
        assert!(lambda[0] > 0.0 && lambda[1] < 0.0 && lambda[2] > 0.0);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut driver = Driver::new(StepSchedule::constant(0.1), None);
        let mut lambda = DVector::zeros(2);
        let err = driver
            .offline_epoch(&mut lambda, &est(vec![f64::NAN, 0.0], 7))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(lambda, DVector::zeros(2));
    }

    /// Serializing the driver mid-run and resuming reproduces the exact λ
    /// trajectory, Adam state included.
    #[test]
    fn checkpoint_replay_is_bitwise() {
        let grads: Vec<GradientEstimate> = (0..20)
            .map(|t| {
                est(
                    vec![
                        (t as f64 * 0.37).sin(),
                        (t as f64 * 0.11).cos() - 0.3,
                        0.05 * t as f64,
                    ],
                    t,
                )
            })
            .collect();
        for schedule in [
            StepSchedule::constant(0.07),
            StepSchedule::inverse_sqrt(0.2),
            StepSchedule::adam(0.05),
        ] {
            let mut full = Driver::new(schedule.clone(), Some(10.0));
            let mut lam_full = DVector::from_vec(vec![0.5, -0.5, 0.25]);
            for g in &grads {
                full.offline_epoch(&mut lam_full, g).unwrap();
            }

            let mut first = Driver::new(schedule, Some(10.0));
            let mut lam = DVector::from_vec(vec![0.5, -0.5, 0.25]);
            for g in &grads[..9] {
                first.offline_epoch(&mut lam, g).unwrap();
            }
            let saved = serde_json::to_string(&first).unwrap();
            let mut resumed: Driver = serde_json::from_str(&saved).unwrap();
            for g in &grads[9..] {
                resumed.offline_epoch(&mut lam, g).unwrap();
            }
            assert_eq!(lam, lam_full);
            assert_eq!(resumed, full);
        }
    }

    proptest! {
        /// Global-norm clipping scales uniformly: norms respect the cap and
        /// no coordinate ever changes sign.
        #[test]
        fn clipping_caps_the_norm_and_preserves_signs(
            coords in proptest::collection::vec(-1e3f64..1e3, 1..12),
            max_norm in 1e-3f64..1e2,
        ) {
            let g0 = DVector::from_vec(coords);
            let mut g = g0.clone();
            let before = clip_global_norm(&mut g, max_norm);
            prop_assert!((before - g0.norm()).abs() <= 1e-12 * before.max(1.0));
            prop_assert!(g.norm() <= max_norm * (1.0 + 1e-12));
            for k in 0..g.len() {
                prop_assert!(g[k] * g0[k] >= 0.0);
                prop_assert!(g[k].abs() <= g0[k].abs() + 1e-12);
            }
        }
    }
}
