//! Training loops for the three update styles, plus the frozen-λ inference
//! pass that produces the state estimates the metrics are scored on.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::elbo::{
    finalize, init_cloud, propagate_backward_sampled_opts, propagate_full_opts, GradientEstimate,
    ParticleCloud, PropagationOpts, StepDiag, WhichLambda,
};
use crate::error::{Error, Result};
use crate::harness::config::Propagation;
use crate::harness::io::MetricsRow;
use crate::models::SsmModel;
use crate::optim::Driver;
use crate::rngstreams::{stream, Purpose, StreamKey};
use crate::varfamily::{GradMode, VarFamily, VariationalParams};

/// Monte Carlo knobs shared by every pass.
#[derive(Clone, Copy, Debug)]
pub struct McSettings {
    pub n: usize,
    pub m: usize,
    pub propagation: Propagation,
    /// Master seed of the particle and ancestor-index streams.
    pub seed: u64,
}

/// Where training ended up; the per-step/per-epoch history goes through the
/// row sink instead.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Optimizer steps taken in this call.
    pub steps: u64,
    pub final_elbo: f64,
    pub final_grad_norm: f64,
    /// Diagnostics of the last pass: worst ESS and mean acceptance rate.
    pub ess_min: Option<f64>,
    pub acc_rate: Option<f64>,
}

pub type RowSink<'a> = &'a mut dyn FnMut(MetricsRow) -> Result<()>;

/// Distinct particle randomness for every epoch of a multi-epoch run. The
/// stream keys hash their fields, so a reversible mix is enough here.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn propagate_step(
    cloud: &ParticleCloud,
    varfam: &VarFamily,
    model: &dyn SsmModel,
    y: &DVector<f64>,
    t: usize,
    mc: &McSettings,
    pass_seed: u64,
    with_gradients: bool,
) -> Result<ParticleCloud> {
    let opts = PropagationOpts {
        with_gradients,
        index_seed: None,
    };
    match mc.propagation {
        Propagation::Full => {
            propagate_full_opts(cloud, varfam, model, y, t, mc.n, pass_seed, opts)
        }
        Propagation::BackwardSampled => propagate_backward_sampled_opts(
            cloud, varfam, model, y, t, mc.n, mc.m, pass_seed, opts,
        ),
    }
}

/// Running aggregate of per-step diagnostics within one pass.
#[derive(Default)]
struct DiagAgg {
    ess_min: Option<f64>,
    acc_sum: f64,
    acc_count: usize,
}

impl DiagAgg {
    fn absorb(&mut self, diag: &StepDiag) {
        if let Some(e) = diag.ess_min {
            self.ess_min = Some(self.ess_min.map_or(e, |cur: f64| cur.min(e)));
        }
        if let Some(a) = diag.acc_rate {
            self.acc_sum += a;
            self.acc_count += 1;
        }
    }

    fn acc_rate(&self) -> Option<f64> {
        (self.acc_count > 0).then(|| self.acc_sum / self.acc_count as f64)
    }
}

fn require_mode(varfam: &VarFamily, expected: GradMode, caller: &str) -> Result<()> {
    if varfam.mode() != expected {
        return Err(Error::Config(format!(
            "{caller} requires the {expected:?} gradient mode"
        )));
    }
    Ok(())
}

fn check_horizon(ys: &[DVector<f64>]) -> Result<()> {
    if ys.len() < 2 {
        return Err(Error::Config(
            "training needs at least two observations (T ≥ 1)".into(),
        ));
    }
    Ok(())
}

/// One full-sequence pass at the current λ: builds the particle recursion
/// from scratch and finalizes the estimate at `T`.
fn full_pass(
    varfam: &mut VarFamily,
    model: &dyn SsmModel,
    ys: &[DVector<f64>],
    mc: &McSettings,
    pass_seed: u64,
) -> Result<(GradientEstimate, DiagAgg)> {
    varfam.reset();
    varfam.advance(&ys[0])?;
    let mut cloud = init_cloud(varfam, model, &ys[0], mc.n, pass_seed)?;
    let mut diag = DiagAgg::default();
    for (t, y) in ys.iter().enumerate().skip(1) {
        varfam.advance(y)?;
        cloud = propagate_step(&cloud, varfam, model, y, t, mc, pass_seed, true)?;
        diag.absorb(&cloud.diag);
    }
    let grad = finalize(&cloud, varfam, WhichLambda::Current)?;
    Ok((grad, diag))
}

/// Epoch-wise ascent on the full-sequence gradient. Emits one row per epoch
/// (`t` counts epochs).
pub fn offline_train(
    varfam: &mut VarFamily,
    driver: &mut Driver,
    model: &dyn SsmModel,
    ys: &[DVector<f64>],
    mc: &McSettings,
    epochs: usize,
    sink: RowSink,
) -> Result<TrainOutcome> {
    require_mode(varfam, GradMode::Offline, "offline training")?;
    check_horizon(ys)?;
    let mut last: Option<(GradientEstimate, DiagAgg)> = None;
    for epoch in 0..epochs {
        let started = Instant::now();
        let (grad, diag) = full_pass(varfam, model, ys, mc, epoch_seed(mc.seed, epoch))?;
        driver.offline_epoch(varfam.lambda_mut(), &grad)?;
        sink(MetricsRow {
            t: epoch as u64,
            elbo: grad.elbo,
            grad_norm: grad.grad.norm(),
            ess_min: diag.ess_min,
            acc_rate: diag.acc_rate(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })?;
        last = Some((grad, diag));
    }
    let (grad, diag) = last.expect("epochs ≥ 1 is validated");
    Ok(TrainOutcome {
        steps: epochs as u64,
        final_elbo: grad.elbo,
        final_grad_norm: grad.grad.norm(),
        ess_min: diag.ess_min,
        acc_rate: diag.acc_rate(),
    })
}

/// Epoch-wise training with a parameter update at every time step, driven by
/// the telescoping gradient difference. λ carries across epoch boundaries;
/// the cached previous gradient resets, so each epoch's first update uses
/// the lone gradient. Emits one row per epoch.
pub fn recursive_epoch_train(
    varfam: &mut VarFamily,
    driver: &mut Driver,
    model: &dyn SsmModel,
    ys: &[DVector<f64>],
    mc: &McSettings,
    epochs: usize,
    sink: RowSink,
) -> Result<TrainOutcome> {
    require_mode(varfam, GradMode::Online, "recursive-epoch training")?;
    check_horizon(ys)?;
    let mut steps = 0u64;
    let mut outcome = None;
    for epoch in 0..epochs {
        let started = Instant::now();
        let pass_seed = epoch_seed(mc.seed, epoch);
        varfam.reset();
        varfam.advance(&ys[0])?;
        let mut cloud = init_cloud(varfam, model, &ys[0], mc.n, pass_seed)?;
        let mut fin = finalize(&cloud, varfam, WhichLambda::Current)?;
        driver.recursive_epoch_step(varfam.lambda_mut(), &fin, None)?;
        steps += 1;
        let mut diag = DiagAgg::default();
        for (t, y) in ys.iter().enumerate().skip(1) {
            varfam.advance(y)?;
            cloud = propagate_step(&cloud, varfam, model, y, t, mc, pass_seed, true)?;
            diag.absorb(&cloud.diag);
            let next = finalize(&cloud, varfam, WhichLambda::Current)?;
            driver.recursive_epoch_step(varfam.lambda_mut(), &next, Some(&fin))?;
            steps += 1;
            fin = next;
        }
        sink(MetricsRow {
            t: epoch as u64,
            elbo: fin.elbo,
            grad_norm: fin.grad.norm(),
            ess_min: diag.ess_min,
            acc_rate: diag.acc_rate(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })?;
        outcome = Some(TrainOutcome {
            steps,
            final_elbo: fin.elbo,
            final_grad_norm: fin.grad.norm(),
            ess_min: diag.ess_min,
            acc_rate: diag.acc_rate(),
        });
    }
    Ok(outcome.expect("epochs ≥ 1 is validated"))
}

/// Called every `ckpt_every` steps of a streaming run with the current
/// parameters, optimizer and last processed step.
pub type CkptHook<'a> = &'a mut dyn FnMut(&VariationalParams, &Driver, u64) -> Result<()>;

/// Single-pass streaming training; one row per step.
///
/// `start_t > 0` resumes after a checkpoint: the observation prefix is
/// replayed through the family to rebuild the amortization state under the
/// restored λ, and the backward statistics restart from a fresh anchor (they
/// are not part of the checkpoint), so the first update after the anchor
/// uses the lone-gradient convention and subsequent ELBO rows measure the
/// increments accumulated since the anchor.
#[allow(clippy::too_many_arguments)]
pub fn online_train(
    varfam: &mut VarFamily,
    driver: &mut Driver,
    model: &dyn SsmModel,
    ys: &[DVector<f64>],
    mc: &McSettings,
    start_t: usize,
    ckpt_every: Option<u64>,
    ckpt_hook: Option<CkptHook>,
    sink: RowSink,
) -> Result<TrainOutcome> {
    require_mode(varfam, GradMode::Online, "online training")?;
    check_horizon(ys)?;
    if start_t + 1 >= ys.len() {
        return Err(Error::Config(format!(
            "resume step {start_t} leaves no observations to process"
        )));
    }
    let mut hook = ckpt_hook;
    let every = ckpt_every.unwrap_or(0);

    varfam.reset();
    varfam.advance(&ys[0])?;
    let mut steps = 0u64;
    let mut diag = DiagAgg::default();
    let (mut cloud, mut prev) = if start_t == 0 {
        let started = Instant::now();
        let cloud = init_cloud(varfam, model, &ys[0], mc.n, mc.seed)?;
        let fin = finalize(&cloud, varfam, WhichLambda::Current)?;
        driver.online_step(varfam.lambda_mut(), &fin, None)?;
        steps += 1;
        sink(MetricsRow {
            t: 0,
            elbo: fin.elbo,
            grad_norm: fin.grad.norm(),
            ess_min: None,
            acc_rate: None,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })?;
        (cloud, Some(fin))
    } else {
        for y in &ys[1..=start_t] {
            varfam.advance(y)?;
        }
        (reanchor_cloud(varfam, mc.n, mc.seed)?, None)
    };

    let mut last: Option<GradientEstimate> = prev.clone();
    for (t, y) in ys.iter().enumerate().skip(start_t + 1) {
        let started = Instant::now();
        varfam.advance(y)?;
        cloud = propagate_step(&cloud, varfam, model, y, t, mc, mc.seed, true)?;
        diag.absorb(&cloud.diag);
        let fin = finalize(&cloud, varfam, WhichLambda::Current)?;
        driver.online_step(varfam.lambda_mut(), &fin, prev.as_ref())?;
        steps += 1;
        sink(MetricsRow {
            t: t as u64,
            elbo: fin.elbo,
            grad_norm: fin.grad.norm(),
            ess_min: cloud.diag.ess_min,
            acc_rate: cloud.diag.acc_rate,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })?;
        if every > 0 && (t as u64) % every == 0 {
            if let Some(h) = hook.as_mut() {
                h(varfam.params(), driver, t as u64)?;
            }
        }
        prev = Some(fin.clone());
        last = Some(fin);
    }
    let fin = last.expect("at least one step was processed");
    Ok(TrainOutcome {
        steps,
        final_elbo: fin.elbo,
        final_grad_norm: fin.grad.norm(),
        ess_min: diag.ess_min,
        acc_rate: diag.acc_rate(),
    })
}

/// Fresh statistics lineage at the family's current step: marginal draws
/// with `Ĥ = 0` and `Ĝ = 0`, mirroring the all-zero G at a sequence start.
fn reanchor_cloud(varfam: &VarFamily, n: usize, seed: u64) -> Result<ParticleCloud> {
    let t = varfam
        .t()
        .ok_or_else(|| Error::Config("cannot anchor a cloud before any observation".into()))?;
    let marginal = varfam.marginal();
    let dim_lambda = varfam.dim_lambda();
    let mut cloud = ParticleCloud {
        t,
        xi: Vec::with_capacity(n),
        h: vec![0.0; n],
        g: vec![DVector::zeros(dim_lambda); n],
        logq: Vec::with_capacity(n),
        diag: StepDiag {
            t,
            ess_min: None,
            acc_rate: None,
            filt_mean: DVector::zeros(marginal.dim()),
            onestep_prev_mean: None,
            wall_ms: 0.0,
        },
    };
    for i in 0..n {
        let mut rng = stream(StreamKey::new(seed, Purpose::Particles, t as u64, i as u64));
        let xi = marginal.sample(&mut rng);
        cloud.logq.push(marginal.log_pdf(&xi));
        cloud.xi.push(xi);
    }
    cloud.diag.filt_mean = cloud.mean();
    Ok(cloud)
}

/// What a frozen-λ pass produces for metric computation.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// `L̂_T` from the final cloud.
    pub elbo: f64,
    /// Exact marginal means of `q_t`, `t = 0..=T`.
    pub filt_means: Vec<DVector<f64>>,
    /// Backward-weighted cloud estimates of `E_{q_{t−1:t}}[X_{t−1}]`,
    /// entry `t−1` for `t = 1..=T`.
    pub onestep_means: Vec<DVector<f64>>,
    /// Means of the full smoothing law, by the exact linear backward sweep;
    /// `None` when the scheme's potential is nonlinear in `x_t`.
    pub smooth_means: Option<Vec<DVector<f64>>>,
    pub ess_min: Option<f64>,
    pub acc_rate: Option<f64>,
}

/// Runs the particle recursion at frozen λ (no gradients) and assembles the
/// estimates the metrics consume.
pub fn inference_pass(
    varfam: &mut VarFamily,
    model: &dyn SsmModel,
    ys: &[DVector<f64>],
    mc: &McSettings,
) -> Result<InferenceOutput> {
    check_horizon(ys)?;
    varfam.reset();
    varfam.advance(&ys[0])?;
    let mut cloud = init_cloud(varfam, model, &ys[0], mc.n, mc.seed)?;
    let mut filt_means = vec![varfam.marginal().mean().clone()];
    let mut onestep_means = Vec::with_capacity(ys.len() - 1);
    let mut kernels: Option<Vec<(DMatrix<f64>, DVector<f64>)>> = Some(Vec::new());
    let mut diag = DiagAgg::default();

    for (t, y) in ys.iter().enumerate().skip(1) {
        varfam.advance(y)?;
        if let Some(ks) = kernels.as_mut() {
            match varfam.linear_backward_kernel()? {
                Some((f_mat, f_vec, _)) => ks.push((f_mat, f_vec)),
                None => kernels = None,
            }
        }
        cloud = propagate_step(&cloud, varfam, model, y, t, mc, mc.seed, false)?;
        diag.absorb(&cloud.diag);
        filt_means.push(varfam.marginal().mean().clone());
        onestep_means.push(
            cloud
                .diag
                .onestep_prev_mean
                .clone()
                .expect("propagation always fills the one-step mean"),
        );
    }

    // Means of q_{0:T}: anchor at the final marginal and pull back through
    // the (linear) backward kernels, E[X_{t−1}] = F_t E[X_t] + f_t.
    let smooth_means = kernels.map(|ks| {
        let mut means = vec![DVector::zeros(0); ys.len()];
        means[ys.len() - 1] = filt_means[ys.len() - 1].clone();
        for t in (1..ys.len()).rev() {
            let (f_mat, f_vec) = &ks[t - 1];
            means[t - 1] = f_mat * &means[t] + f_vec;
        }
        means
    });

    let elbo = cloud
        .h
        .iter()
        .zip(&cloud.logq)
        .map(|(h, lq)| h - lq)
        .sum::<f64>()
        / cloud.len() as f64;

    Ok(InferenceOutput {
        elbo,
        filt_means,
        onestep_means,
        smooth_means,
        ess_min: diag.ess_min,
        acc_rate: diag.acc_rate(),
    })
}

/// Exact marginal and smoothing means of the family along `ys` — no
/// particles involved. Requires linear backward kernels.
pub fn exact_sweep(
    varfam: &mut VarFamily,
    ys: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    check_horizon(ys)?;
    varfam.reset();
    varfam.advance(&ys[0])?;
    let mut filt = vec![varfam.marginal().mean().clone()];
    let mut kernels = Vec::with_capacity(ys.len() - 1);
    for y in &ys[1..] {
        varfam.advance(y)?;
        let (f_mat, f_vec, _) = varfam.linear_backward_kernel()?.ok_or_else(|| {
            Error::Config("exact smoothing sweep needs linear backward kernels".into())
        })?;
        kernels.push((f_mat, f_vec));
        filt.push(varfam.marginal().mean().clone());
    }
    let mut smooth = vec![DVector::zeros(0); ys.len()];
    smooth[ys.len() - 1] = filt[ys.len() - 1].clone();
    for t in (1..ys.len()).rev() {
        let (f_mat, f_vec) = &kernels[t - 1];
        smooth[t - 1] = f_mat * &smooth[t] + f_vec;
    }
    Ok((filt, smooth))
}
