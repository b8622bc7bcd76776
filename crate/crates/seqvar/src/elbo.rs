//! Recursive Monte Carlo estimation of the ELBO and its gradient.
//!
//! The estimator carries, per particle `ξ_t^i ∼ q_t`, two statistics:
//! `Ĥ_t^i` (the conditional expectation of the accumulated log-ratio given
//! `x_t = ξ_t^i`) and `Ĝ_t^i` (its λ-gradient companion). Each step updates
//! them by self-normalized importance sampling against the previous cloud,
//! with the backward kernel `q_{t−1|t}(· | ξ_t^i)` as the target. The ELBO
//! and gradient then come out of [`finalize`] as plain averages — no
//! differentiation ever runs through the estimator itself, which keeps the
//! gradient immune to the bias-amplification of differentiated SNIS.
//!
//! Two propagation strategies share the same statistics: [`propagate_full`]
//! evaluates every (i, j) pair at `O(N²)` cost, while
//! [`propagate_backward_sampled`] replaces each inner sum by `M` indices
//! drawn from the backward weights by rejection, at `O(NM)` expected cost.
//!
//! Per-particle work is dispatched through [`crate::par::map_particles`];
//! every random draw comes from a stream keyed by `(seed, purpose, t, i)`,
//! so results are bitwise identical whatever the worker count.

use std::time::Instant;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::expfam::eta_dim;
use crate::linalg;
use crate::models::{log_ell, SsmModel};
use crate::par::map_particles;
use crate::rngstreams::{stream, Purpose, StreamKey};
use crate::varfamily::{backward_kernel, VarFamily};

/// Weighted particle system at one time step.
///
/// `xi` holds i.i.d. draws from the current marginal `q_t`; `h[i]` and
/// `g[i]` are the running statistics `Ĥ_t^i` and `Ĝ_t^i`; `logq[i]` caches
/// `log q_t(ξ_t^i)` under the λ in force when the cloud was built (the
/// denominator of the next step's importance weights).
#[derive(Clone, Debug)]
pub struct ParticleCloud {
    pub t: usize,
    pub xi: Vec<DVector<f64>>,
    pub h: Vec<f64>,
    pub g: Vec<DVector<f64>>,
    pub logq: Vec<f64>,
    pub diag: StepDiag,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    /// Unweighted mean of the particle positions (the particles are i.i.d.
    /// marginal draws, so this estimates `E_{q_t}[X_t]`).
    pub fn mean(&self) -> DVector<f64> {
        let d = self.xi[0].len();
        let mut m = DVector::zeros(d);
        for x in &self.xi {
            m += x;
        }
        m / self.xi.len() as f64
    }
}

/// Per-step diagnostics gathered while building a cloud.
#[derive(Clone, Debug)]
pub struct StepDiag {
    pub t: usize,
    /// Minimum over i of the effective sample size of the backward weights
    /// (full propagation only).
    pub ess_min: Option<f64>,
    /// Overall acceptance rate of the rejection sampler (backward-sampled
    /// propagation only).
    pub acc_rate: Option<f64>,
    /// Mean particle position, an estimate of the marginal (filtering) mean.
    pub filt_mean: DVector<f64>,
    /// One-step smoothing mean `E_{q_{t−1:t}}[X_{t−1}]`, estimated by the
    /// backward-weighted previous cloud — available from t ≥ 1.
    pub onestep_prev_mean: Option<DVector<f64>>,
    pub wall_ms: f64,
}

/// Final output of a recursion: the ELBO value and its gradient at time `t`,
/// together with the particle budget that produced them.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub grad: DVector<f64>,
    pub elbo: f64,
    pub t: usize,
    pub n: usize,
    pub m: usize,
}

/// Which λ snapshot differentiates `log q_t` in [`finalize`].
///
/// Offline estimation uses the single current λ; the online recursion's
/// score is taken under the λ of the previous step, matching the staleness
/// convention of the G-statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WhichLambda {
    Current,
    Previous,
}

/// Knobs shared by both propagation strategies.
#[derive(Clone, Copy, Debug)]
pub struct PropagationOpts {
    /// When false, the G-statistic is skipped entirely (evaluation-only
    /// streaming); the resulting cloud cannot be finalized into a gradient.
    pub with_gradients: bool,
    /// Separate seed for the backward index draws; defaults to the main
    /// seed. Replication studies use this to resample the indices while
    /// holding the marginal draws fixed.
    pub index_seed: Option<u64>,
}

impl Default for PropagationOpts {
    fn default() -> Self {
        PropagationOpts {
            with_gradients: true,
            index_seed: None,
        }
    }
}

/// The per-step log-ratio increment `h̃_t`.
///
/// At `t = 0` this is `log ℓ_0(x, y)`; for `t ≥ 1` it is
/// `log ℓ_t(x_prev, x, y) − log q_{t−1|t}(x_prev | x)` with the backward
/// kernel of the family at its current step. The family must have been
/// advanced to exactly `t`.
pub fn h_increment(
    model: &dyn SsmModel,
    varfam: &VarFamily,
    t: usize,
    x_prev: Option<&DVector<f64>>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    check_step(varfam, t)?;
    if t == 0 {
        return log_ell(model, 0, None, x, y);
    }
    let xp = x_prev.ok_or_else(|| {
        Error::Config("h_increment requires the previous state for t ≥ 1".into())
    })?;
    let kernel = backward_kernel(varfam.prev_marginal(), varfam.potential(), x)?;
    Ok(log_ell(model, t, Some(xp), x, y)? - kernel.log_pdf(xp))
}

/// Initializes the particle system at `t = 0`: i.i.d. draws from `q_0`,
/// `Ĥ_0^i = log ℓ_0(ξ_0^i, y_0)` and `Ĝ_0^i = 0`.
pub fn init_cloud(
    varfam: &VarFamily,
    model: &dyn SsmModel,
    y0: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<ParticleCloud> {
    let start = Instant::now();
    check_step(varfam, 0)?;
    if n == 0 {
        return Err(Error::Config("particle count must be at least 1".into()));
    }
    let dim_lambda = varfam.dim_lambda();
    let marginal = varfam.marginal();
    let parts = map_particles(n, |i| -> Result<(DVector<f64>, f64, f64)> {
        let mut rng = stream(StreamKey::new(seed, Purpose::Particles, 0, i as u64));
        let xi = marginal.sample(&mut rng);
        let h = log_ell(model, 0, None, &xi, y0)?;
        let logq = marginal.log_pdf(&xi);
        Ok((xi, h, logq))
    });
    let mut cloud = ParticleCloud {
        t: 0,
        xi: Vec::with_capacity(n),
        h: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        logq: Vec::with_capacity(n),
        diag: StepDiag {
            t: 0,
            ess_min: None,
            acc_rate: None,
            filt_mean: DVector::zeros(marginal.dim()),
            onestep_prev_mean: None,
            wall_ms: 0.0,
        },
    };
    for part in parts {
        let (xi, h, logq) = part?;
        cloud.xi.push(xi);
        cloud.h.push(h);
        cloud.g.push(DVector::zeros(dim_lambda));
        cloud.logq.push(logq);
    }
    cloud.diag.filt_mean = cloud.mean();
    cloud.diag.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(cloud)
}

/// Normalized backward importance weights
/// `ω^j ∝ q_{t−1|t}(x_t, ξ_{t−1}^j) / q^{λ_{t−1}}_{t−1}(ξ_{t−1}^j)`.
///
/// The numerator is the backward-kernel density under the family's current
/// state; the denominator is the cached marginal density the previous cloud
/// was drawn from. Log-space with max-subtraction throughout.
pub fn snis_weights(
    cloud_prev: &ParticleCloud,
    varfam: &VarFamily,
    x_t: &DVector<f64>,
) -> Result<DVector<f64>> {
    let kernel = backward_kernel(varfam.prev_marginal(), varfam.potential(), x_t)?;
    let (weights, _, _) = weights_against(&kernel, cloud_prev)?;
    Ok(weights)
}

/// Weights, per-j kernel log-densities (reused by the h-increment), and the
/// effective sample size, for one target particle.
fn weights_against(
    kernel: &crate::expfam::NaturalGaussian,
    cloud_prev: &ParticleCloud,
) -> Result<(DVector<f64>, Vec<f64>, f64)> {
    let n = cloud_prev.len();
    let mut log_kern = vec![0.0; n];
    let mut logw = vec![0.0; n];
    for j in 0..n {
        log_kern[j] = kernel.log_pdf(&cloud_prev.xi[j]);
        logw[j] = log_kern[j] - cloud_prev.logq[j];
    }
    let lse = linalg::logsumexp(&logw);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights { t: cloud_prev.t + 1 });
    }
    let mut weights = DVector::zeros(n);
    let mut sum_sq = 0.0;
    for j in 0..n {
        let w = (logw[j] - lse).exp();
        weights[j] = w;
        sum_sq += w * w;
    }
    Ok((weights, log_kern, 1.0 / sum_sq))
}

/// One full-sum SNIS step: fresh draws `ξ_t^i ∼ q_t`, then for every i the
/// statistics are weighted sums over all N previous particles.
pub fn propagate_full(
    cloud_prev: &ParticleCloud,
    varfam: &VarFamily,
    model: &dyn SsmModel,
    y_t: &DVector<f64>,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<ParticleCloud> {
    propagate_full_opts(
        cloud_prev,
        varfam,
        model,
        y_t,
        t,
        n,
        seed,
        PropagationOpts::default(),
    )
}

struct Propagated {
    xi: DVector<f64>,
    h: f64,
    g: Option<DVector<f64>>,
    logq: f64,
    /// Backward-weighted mean of the previous cloud, `Σ_j ω^{i,j} ξ_{t−1}^j`.
    prev_weighted: DVector<f64>,
    ess: Option<f64>,
    accepted: u64,
    proposed: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn propagate_full_opts(
    cloud_prev: &ParticleCloud,
    varfam: &VarFamily,
    model: &dyn SsmModel,
    y_t: &DVector<f64>,
    t: usize,
    n: usize,
    seed: u64,
    opts: PropagationOpts,
) -> Result<ParticleCloud> {
    let start = Instant::now();
    check_propagate(cloud_prev, varfam, t, n)?;
    let marginal = varfam.marginal();
    let n_prev = cloud_prev.len();
    let d_eta = eta_dim(marginal.dim());

    let parts = map_particles(n, |i| -> Result<Propagated> {
        let mut rng = stream(StreamKey::new(seed, Purpose::Particles, t as u64, i as u64));
        let xi = marginal.sample(&mut rng);
        let kernel = backward_kernel(varfam.prev_marginal(), varfam.potential(), &xi)?;
        let (weights, log_kern, ess) = weights_against(&kernel, cloud_prev)?;

        // Ĥ_t^i = Σ_j ω^{i,j} (Ĥ_{t−1}^j + h̃_t(ξ_{t−1}^j, ξ_t^i)).
        let mut bracket = vec![0.0; n_prev];
        let mut h = 0.0;
        let mut prev_weighted = DVector::zeros(marginal.dim());
        for j in 0..n_prev {
            let h_inc = log_ell(model, t, Some(&cloud_prev.xi[j]), &xi, y_t)? - log_kern[j];
            bracket[j] = cloud_prev.h[j] + h_inc;
            h += weights[j] * bracket[j];
            prev_weighted.axpy(weights[j], &cloud_prev.xi[j], 1.0);
        }

        let g = if opts.with_gradients {
            let mut g = DVector::zeros(varfam.dim_lambda());
            if varfam.propagates_g() {
                for j in 0..n_prev {
                    g.axpy(weights[j], &cloud_prev.g[j], 1.0);
                }
            }
            // Kernel-score term with the control variate c^i = Ĥ_t^i:
            // v = Σ_j ω^{i,j} (bracket_j − Ĥ_t^i) ∇_η log q_{t−1|t}(ξ_j),
            // chained through the η-parameterization of marginal and
            // potential by their vector-Jacobian products.
            let mut v = DVector::zeros(d_eta);
            let mut score = DVector::zeros(d_eta);
            for j in 0..n_prev {
                kernel.score_natural_into(&cloud_prev.xi[j], &mut score);
                v.axpy(weights[j] * (bracket[j] - h), &score, 1.0);
            }
            varfam.prev_marginal_score_vjp(&v, &mut g);
            varfam.potential_score_vjp(&xi, &v, &mut g);
            Some(g)
        } else {
            None
        };

        let logq = marginal.log_pdf(&xi);
        Ok(Propagated {
            xi,
            h,
            g,
            logq,
            prev_weighted,
            ess: Some(ess),
            accepted: 0,
            proposed: 0,
        })
    });

    assemble_cloud(parts, varfam, t, start)
}

/// One backward-sampled step: each inner SNIS sum is replaced by an average
/// over `M` indices drawn from the backward weights via rejection.
///
/// Proposals are uniform over `{1..N}`; acceptance probability is
/// `ψ_t(ξ_{t−1}^j, ξ_t^i) / sup_x ψ_t(x, ξ_t^i)` with the supremum taken
/// analytically at the Gaussian-potential mode. A particle that exhausts
/// `1000·M` trials (or whose potential has singular curvature) falls back to
/// an exact multinomial draw from the normalized potential values.
#[allow(clippy::too_many_arguments)]
pub fn propagate_backward_sampled(
    cloud_prev: &ParticleCloud,
    varfam: &VarFamily,
    model: &dyn SsmModel,
    y_t: &DVector<f64>,
    t: usize,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<ParticleCloud> {
    propagate_backward_sampled_opts(
        cloud_prev,
        varfam,
        model,
        y_t,
        t,
        n,
        m,
        seed,
        PropagationOpts::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn propagate_backward_sampled_opts(
    cloud_prev: &ParticleCloud,
    varfam: &VarFamily,
    model: &dyn SsmModel,
    y_t: &DVector<f64>,
    t: usize,
    n: usize,
    m: usize,
    seed: u64,
    opts: PropagationOpts,
) -> Result<ParticleCloud> {
    let start = Instant::now();
    check_propagate(cloud_prev, varfam, t, n)?;
    if m == 0 {
        return Err(Error::Config("backward-sample count M must be at least 1".into()));
    }
    let marginal = varfam.marginal();
    let potential = varfam.potential();
    let n_prev = cloud_prev.len();
    let d_eta = eta_dim(marginal.dim());
    let inv_m = 1.0 / m as f64;
    let index_seed = opts.index_seed.unwrap_or(seed);

    let parts = map_particles(n, |i| -> Result<Propagated> {
        let mut rng = stream(StreamKey::new(seed, Purpose::Particles, t as u64, i as u64));
        let xi = marginal.sample(&mut rng);

        // Draw M indices from ω^{i,·} ∝_j ψ_t(ξ_{t−1}^j, ξ_t^i).
        let mut idx_rng = stream(StreamKey::new(index_seed, Purpose::Backward, t as u64, i as u64));
        let mut chosen = Vec::with_capacity(m);
        let mut accepted = 0u64;
        let mut proposed = 0u64;
        match potential.log_sup(&xi) {
            Ok(log_sup) => {
                let cap = 1000 * m as u64;
                while chosen.len() < m && proposed < cap {
                    let j = rand::Rng::random_range(&mut idx_rng, 0..n_prev);
                    proposed += 1;
                    let log_psi = potential.log_value(&cloud_prev.xi[j], &xi);
                    let u: f64 = rand::Rng::random(&mut idx_rng);
                    if u.ln() < log_psi - log_sup {
                        chosen.push(j);
                        accepted += 1;
                    }
                }
            }
            // Singular curvature: the analytic supremum does not exist, so
            // rejection is unavailable for this particle.
            Err(_) => {}
        }
        if chosen.len() < m {
            multinomial_fill(&mut chosen, m, potential, cloud_prev, &xi, &mut idx_rng);
        }

        let kernel = backward_kernel(varfam.prev_marginal(), varfam.potential(), &xi)?;
        let mut bracket = vec![0.0; m];
        let mut h = 0.0;
        let mut prev_weighted = DVector::zeros(marginal.dim());
        for (k, &j) in chosen.iter().enumerate() {
            let h_inc = log_ell(model, t, Some(&cloud_prev.xi[j]), &xi, y_t)?
                - kernel.log_pdf(&cloud_prev.xi[j]);
            bracket[k] = cloud_prev.h[j] + h_inc;
            h += inv_m * bracket[k];
            prev_weighted.axpy(inv_m, &cloud_prev.xi[j], 1.0);
        }

        let g = if opts.with_gradients {
            let mut g = DVector::zeros(varfam.dim_lambda());
            if varfam.propagates_g() {
                for &j in &chosen {
                    g.axpy(inv_m, &cloud_prev.g[j], 1.0);
                }
            }
            let mut v = DVector::zeros(d_eta);
            let mut score = DVector::zeros(d_eta);
            for (k, &j) in chosen.iter().enumerate() {
                kernel.score_natural_into(&cloud_prev.xi[j], &mut score);
                v.axpy(inv_m * (bracket[k] - h), &score, 1.0);
            }
            varfam.prev_marginal_score_vjp(&v, &mut g);
            varfam.potential_score_vjp(&xi, &v, &mut g);
            Some(g)
        } else {
            None
        };

        let logq = marginal.log_pdf(&xi);
        Ok(Propagated {
            xi,
            h,
            g,
            logq,
            prev_weighted,
            ess: None,
            accepted,
            proposed,
        })
    });

    assemble_cloud(parts, varfam, t, start)
}

/// Draws the missing indices exactly from the normalized potential values —
/// the same target the rejection sampler aims at.
fn multinomial_fill(
    chosen: &mut Vec<usize>,
    m: usize,
    potential: &crate::varfamily::Potential,
    cloud_prev: &ParticleCloud,
    xi: &DVector<f64>,
    rng: &mut crate::rngstreams::Stream,
) {
    let n_prev = cloud_prev.len();
    let mut logw: Vec<f64> = (0..n_prev)
        .map(|j| potential.log_value(&cloud_prev.xi[j], xi))
        .collect();
    let lse = linalg::logsumexp(&logw);
    if !lse.is_finite() {
        // Flat (or fully underflowed) potential: fall back to uniform.
        logw.iter_mut().for_each(|v| *v = -(n_prev as f64).ln());
    } else {
        logw.iter_mut().for_each(|v| *v -= lse);
    }
    while chosen.len() < m {
        let u: f64 = rand::Rng::random(rng);
        let mut acc = 0.0;
        let mut pick = n_prev - 1;
        for (j, lw) in logw.iter().enumerate() {
            acc += lw.exp();
            if u <= acc {
                pick = j;
                break;
            }
        }
        chosen.push(pick);
    }
}

fn assemble_cloud(
    parts: Vec<Result<Propagated>>,
    varfam: &VarFamily,
    t: usize,
    start: Instant,
) -> Result<ParticleCloud> {
    let n = parts.len();
    let mut cloud = ParticleCloud {
        t,
        xi: Vec::with_capacity(n),
        h: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        logq: Vec::with_capacity(n),
        diag: StepDiag {
            t,
            ess_min: None,
            acc_rate: None,
            filt_mean: DVector::zeros(varfam.marginal().dim()),
            onestep_prev_mean: None,
            wall_ms: 0.0,
        },
    };
    let mut ess_min = f64::INFINITY;
    let mut any_ess = false;
    let mut accepted = 0u64;
    let mut proposed = 0u64;
    let mut onestep: DVector<f64> = DVector::zeros(varfam.marginal().dim());
    for part in parts {
        let part = part?;
        if let Some(e) = part.ess {
            ess_min = ess_min.min(e);
            any_ess = true;
        }
        accepted += part.accepted;
        proposed += part.proposed;
        onestep += &part.prev_weighted;
        cloud.xi.push(part.xi);
        cloud.h.push(part.h);
        cloud.g.push(part.g.unwrap_or_else(|| DVector::zeros(0)));
        cloud.logq.push(part.logq);
    }
    cloud.diag.ess_min = any_ess.then_some(ess_min);
    cloud.diag.acc_rate = (proposed > 0).then(|| accepted as f64 / proposed as f64);
    cloud.diag.filt_mean = cloud.mean();
    cloud.diag.onestep_prev_mean = Some(onestep / n as f64);
    cloud.diag.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(cloud)
}

/// Assembles the estimates at the cloud's step:
/// `L̂ = N⁻¹ Σ_i (Ĥ^i − log q_t(ξ^i))` and
/// `∇̂L = N⁻¹ Σ_i {Ĝ^i + ∇_λ log q_t(ξ^i) (Ĥ^i − H̄)}`, the mean `H̄` acting
/// as a control variate on the zero-mean score.
pub fn finalize(
    cloud: &ParticleCloud,
    varfam: &VarFamily,
    which_lambda: WhichLambda,
) -> Result<GradientEstimate> {
    finalize_impl(cloud, varfam, which_lambda, true)
}

/// [`finalize`] without the `H̄` control variate — same expectation, higher
/// variance. Exists as a measurement baseline, not for production use.
pub fn finalize_uncontrolled(
    cloud: &ParticleCloud,
    varfam: &VarFamily,
    which_lambda: WhichLambda,
) -> Result<GradientEstimate> {
    finalize_impl(cloud, varfam, which_lambda, false)
}

fn finalize_impl(
    cloud: &ParticleCloud,
    varfam: &VarFamily,
    which_lambda: WhichLambda,
    control_variate: bool,
) -> Result<GradientEstimate> {
    check_step(varfam, cloud.t)?;
    let n = cloud.len();
    if n == 0 {
        return Err(Error::Config("cannot finalize an empty cloud".into()));
    }
    let dim_lambda = varfam.dim_lambda();
    if cloud.g.iter().any(|g| g.len() != dim_lambda) {
        return Err(Error::Config(
            "cloud was propagated without gradients; finalize needs the G-statistic".into(),
        ));
    }
    let inv_n = 1.0 / n as f64;
    let h_bar = cloud.h.iter().sum::<f64>() * inv_n;
    let elbo = cloud
        .h
        .iter()
        .zip(cloud.logq.iter())
        .map(|(h, lq)| h - lq)
        .sum::<f64>()
        * inv_n;

    let mut grad = DVector::zeros(dim_lambda);
    for g in &cloud.g {
        grad.axpy(inv_n, g, 1.0);
    }

    // Score term: the VJP is linear in its seed, so the weighted score sum
    // is accumulated first and chained once.
    let d_eta = eta_dim(cloud.xi[0].len());
    let mut seed_vec = DVector::zeros(d_eta);
    let mut score = DVector::zeros(d_eta);
    let center = if control_variate { h_bar } else { 0.0 };
    match which_lambda {
        WhichLambda::Current => {
            let q = varfam.marginal();
            for i in 0..n {
                q.score_natural_into(&cloud.xi[i], &mut score);
                seed_vec.axpy(inv_n * (cloud.h[i] - center), &score, 1.0);
            }
            varfam.marginal_score_vjp(&seed_vec, &mut grad);
        }
        WhichLambda::Previous => {
            let replayed = varfam.replay_marginal_prev_lambda()?;
            for i in 0..n {
                replayed.marginal.score_natural_into(&cloud.xi[i], &mut score);
                seed_vec.axpy(inv_n * (cloud.h[i] - center), &score, 1.0);
            }
            replayed.vjp(&seed_vec, &mut grad);
        }
    }

    if !elbo.is_finite() {
        return Err(Error::NonFinite {
            what: "ELBO estimate".into(),
        });
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient estimate".into(),
        });
    }
    Ok(GradientEstimate {
        grad,
        elbo,
        t: cloud.t,
        n,
        m: n,
    })
}

fn check_step(varfam: &VarFamily, t: usize) -> Result<()> {
    match varfam.t() {
        Some(ft) if ft == t => Ok(()),
        other => Err(Error::Config(format!(
            "variational family is at step {other:?}, estimator at step {t}"
        ))),
    }
}

fn check_propagate(cloud_prev: &ParticleCloud, varfam: &VarFamily, t: usize, n: usize) -> Result<()> {
    if t == 0 || cloud_prev.t + 1 != t {
        return Err(Error::Config(format!(
            "propagation to step {t} requires a cloud at step {}",
            t.saturating_sub(1)
        )));
    }
    if n == 0 {
        return Err(Error::Config("particle count must be at least 1".into()));
    }
    if cloud_prev.is_empty() {
        return Err(Error::Config("previous cloud is empty".into()));
    }
    check_step(varfam, t)
}
