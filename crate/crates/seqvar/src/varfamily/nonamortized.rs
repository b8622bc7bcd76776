//! Non-amortized scheme: one independent parameter slot per time step.
//!
//! Slot t holds the marginal's natural parameters directly — `η₁` free,
//! `η₂ = −½(LLᵀ + εI)` from a packed factor — and, for t ≥ 1, a potential
//! MLP plus its quadratic factor. λ grows as the family advances: slots are
//! allocated lazily, warm-started from the previous slot so consecutive
//! steps begin near each other.
//!
//! Because slot parameters only influence their own step, cross-step
//! gradient propagation is pointless here: the family reports
//! `propagates_g = false` and every VJP lands inside the active slot.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::NaturalGaussian;
use crate::linalg;
use crate::nn::Mlp;
use crate::rngstreams::{stream, Purpose, StreamKey};
use crate::varfamily::{
    GradMode, Potential, ReplayedMarginal, SchemeSpec, VariationalParams,
};

const EPS_PD: f64 = 1e-6;

fn pot_dims(d_x: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![d_x];
    dims.extend_from_slice(hidden);
    dims.push(d_x);
    dims
}

fn scheme_dims(params: &VariationalParams) -> Result<(usize, Vec<usize>)> {
    match &params.scheme {
        SchemeSpec::NonAmortized { d_x, pot_hidden } => Ok((*d_x, pot_hidden.clone())),
        _ => Err(Error::Config("non-amortized op on a different scheme".into())),
    }
}

/// Appends slot `t`'s blocks to λ if not yet present. Values warm-start from
/// slot t−1 where shapes line up; the first potential slot draws a seeded
/// MLP initialization.
pub(crate) fn ensure_slot(params: &mut VariationalParams, t: usize) -> Result<()> {
    let (d_x, pot_hidden) = scheme_dims(params)?;
    let eta1_name = format!("slot{t}.eta1");
    if params.layout.block(&eta1_name).is_some() {
        return Ok(());
    }
    if t > 0 && params.layout.block(&format!("slot{}.eta1", t - 1)).is_none() {
        return Err(Error::Config(format!(
            "slot {t} requested before slot {} exists",
            t - 1
        )));
    }

    let tri = linalg::tri_len(d_x);
    let pot = Mlp::new(pot_dims(d_x, &pot_hidden));
    let mut new_vals: Vec<f64> = Vec::new();
    // Each new block starts where the layout currently ends; values are
    // collected in order and λ is extended once at the end.
    let push_block = |params: &mut VariationalParams, name: String, vals: &[f64], acc: &mut Vec<f64>| {
        let offset = params.layout.total_len();
        params.layout.blocks.push(super::LayoutBlock {
            name,
            offset,
            len: vals.len(),
        });
        acc.extend_from_slice(vals);
    };
    let prev = |params: &VariationalParams, name: String| -> Option<Vec<f64>> {
        params
            .layout
            .block(&name)
            .map(|r| params.lambda.as_slice()[r].to_vec())
    };

    let eta1_vals = prev(params, format!("slot{}.eta1", t.wrapping_sub(1)))
        .filter(|_| t > 0)
        .unwrap_or_else(|| vec![0.0; d_x]);
    push_block(params, eta1_name, &eta1_vals, &mut new_vals);

    let l_marg_vals = prev(params, format!("slot{}.l_marg", t.wrapping_sub(1)))
        .filter(|_| t > 0)
        .unwrap_or_else(|| {
            let raw_unit = linalg::inv_softplus(1.0);
            let mut v = vec![0.0; tri];
            let mut k = 0;
            for i in 0..d_x {
                for j in 0..=i {
                    if i == j {
                        v[k] = raw_unit;
                    }
                    k += 1;
                }
            }
            v
        });
    push_block(params, format!("slot{t}.l_marg"), &l_marg_vals, &mut new_vals);

    if t >= 1 {
        let pot_vals = prev(params, format!("slot{}.pot_mlp", t - 1)).unwrap_or_else(|| {
            let mut rng = stream(StreamKey::new(params.init_seed, Purpose::ParamInit, t as u64, 0));
            pot.init_params(&mut rng)
        });
        push_block(params, format!("slot{t}.pot_mlp"), &pot_vals, &mut new_vals);
        let l_pot_vals = prev(params, format!("slot{}.l_pot", t - 1)).unwrap_or_else(|| {
            let raw_unit = linalg::inv_softplus(1.0);
            let mut v = vec![0.0; tri];
            let mut k = 0;
            for i in 0..d_x {
                for j in 0..=i {
                    if i == j {
                        v[k] = raw_unit;
                    }
                    k += 1;
                }
            }
            v
        });
        push_block(params, format!("slot{t}.l_pot"), &l_pot_vals, &mut new_vals);
    }

    let old_len = params.lambda.len();
    let mut lambda = DVector::zeros(old_len + new_vals.len());
    lambda.rows_mut(0, old_len).copy_from(&params.lambda);
    for (k, v) in new_vals.iter().enumerate() {
        lambda[old_len + k] = *v;
    }
    params.lambda = lambda;
    params.layout.check_partitions(params.lambda.len())
}

fn marginal_from(
    lambda: &DVector<f64>,
    eta1_range: &std::ops::Range<usize>,
    raw_l: &[f64],
    d_x: usize,
) -> Result<NaturalGaussian> {
    let eta1 = DVector::from_fn(d_x, |i, _| lambda[eta1_range.start + i]);
    let l = linalg::unpack_tril(raw_l, d_x);
    let mut eta2 = -0.5 * (&l * l.transpose());
    for i in 0..d_x {
        eta2[(i, i)] -= 0.5 * EPS_PD;
    }
    NaturalGaussian::new(eta1, eta2)
}

/// The `(η_t, ψ_t)` pair stored in slot `t`. Errors if the slot has not been
/// allocated yet.
pub(crate) fn slot(params: &VariationalParams, t: usize) -> Result<(NaturalGaussian, Potential)> {
    let (d_x, pot_hidden) = scheme_dims(params)?;
    let eta1_range = params
        .layout
        .block(&format!("slot{t}.eta1"))
        .ok_or_else(|| Error::Config(format!("slot {t} has not been allocated")))?;
    let l_marg_range = params.layout.block(&format!("slot{t}.l_marg")).unwrap();
    let raw_l = params.lambda.as_slice()[l_marg_range].to_vec();
    let marg = marginal_from(&params.lambda, &eta1_range, &raw_l, d_x)?;
    let pot = if t >= 1 {
        let pot_range = params.layout.block(&format!("slot{t}.pot_mlp")).unwrap();
        let l_pot_range = params.layout.block(&format!("slot{t}.l_pot")).unwrap();
        let raw_l_pot = params.lambda.as_slice()[l_pot_range].to_vec();
        let l_pot = linalg::unpack_tril(&raw_l_pot, d_x);
        let mut eta2 = -(&l_pot * l_pot.transpose());
        for i in 0..d_x {
            eta2[(i, i)] -= EPS_PD;
        }
        Potential::MlpHead {
            mlp: Mlp::new(pot_dims(d_x, &pot_hidden)),
            params: params.lambda.as_slice()[pot_range].to_vec(),
            eta2,
        }
    } else {
        Potential::zero(d_x)
    };
    Ok((marg, pot))
}

/// Per-slot ranges and caches for the VJPs of the current step.
struct SlotCtx {
    d_x: usize,
    r_eta1: std::ops::Range<usize>,
    r_l_marg: std::ops::Range<usize>,
    raw_l_marg: Vec<f64>,
    l_marg: DMatrix<f64>,
    pot: Option<PotCtx>,
}

struct PotCtx {
    r_pot: std::ops::Range<usize>,
    r_l_pot: std::ops::Range<usize>,
    raw_l_pot: Vec<f64>,
    l_pot: DMatrix<f64>,
    mlp: Mlp,
    mlp_params: Vec<f64>,
}

fn slot_ctx(params: &VariationalParams, t: usize) -> Result<SlotCtx> {
    let (d_x, pot_hidden) = scheme_dims(params)?;
    let r_eta1 = params
        .layout
        .block(&format!("slot{t}.eta1"))
        .ok_or_else(|| Error::Config(format!("slot {t} has not been allocated")))?;
    let r_l_marg = params.layout.block(&format!("slot{t}.l_marg")).unwrap();
    let raw_l_marg = params.lambda.as_slice()[r_l_marg.clone()].to_vec();
    let l_marg = linalg::unpack_tril(&raw_l_marg, d_x);
    let pot = if t >= 1 {
        let r_pot = params.layout.block(&format!("slot{t}.pot_mlp")).unwrap();
        let r_l_pot = params.layout.block(&format!("slot{t}.l_pot")).unwrap();
        let raw_l_pot = params.lambda.as_slice()[r_l_pot.clone()].to_vec();
        let l_pot = linalg::unpack_tril(&raw_l_pot, d_x);
        Some(PotCtx {
            mlp: Mlp::new(pot_dims(d_x, &pot_hidden)),
            mlp_params: params.lambda.as_slice()[r_pot.clone()].to_vec(),
            r_pot,
            r_l_pot,
            raw_l_pot,
            l_pot,
        })
    } else {
        None
    };
    Ok(SlotCtx {
        d_x,
        r_eta1,
        r_l_marg,
        raw_l_marg,
        l_marg,
        pot,
    })
}

/// `Jᵀ s` for a slot marginal: `η₁` is identity in λ, `η₂` chains through
/// the packed factor.
fn marginal_vjp_into(ctx: &SlotCtx, s: &DVector<f64>, out: &mut DVector<f64>) {
    let d = ctx.d_x;
    for i in 0..d {
        out[ctx.r_eta1.start + i] += s[i];
    }
    let mut s2 = DMatrix::from_fn(d, d, |i, j| s[d + i * d + j]);
    linalg::symmetrize(&mut s2);
    let g_l = linalg::gram_grad_to_factor(&(-0.5 * &s2), &ctx.l_marg);
    linalg::accumulate_tril_grad(
        &ctx.raw_l_marg,
        d,
        &g_l,
        &mut out.as_mut_slice()[ctx.r_l_marg.clone()],
    );
}

pub(crate) struct State {
    t: Option<usize>,
    marg: Option<NaturalGaussian>,
    prev_marg: Option<NaturalGaussian>,
    pot: Option<Potential>,
    ctx: Option<SlotCtx>,
    ctx_prev: Option<SlotCtx>,
}

impl State {
    pub(crate) fn new() -> State {
        State {
            t: None,
            marg: None,
            prev_marg: None,
            pot: None,
            ctx: None,
            ctx_prev: None,
        }
    }

    pub(crate) fn reset(&mut self) {
        *self = State::new();
    }

    pub(crate) fn advance(
        &mut self,
        params: &VariationalParams,
        _mode: GradMode,
        t: usize,
        _y: &DVector<f64>,
    ) -> Result<()> {
        let (marg, pot) = slot(params, t)?;
        self.prev_marg = self.marg.take();
        self.ctx_prev = self.ctx.take();
        self.marg = Some(marg);
        self.pot = if t >= 1 { Some(pot) } else { None };
        self.ctx = Some(slot_ctx(params, t)?);
        self.t = Some(t);
        Ok(())
    }

    pub(crate) fn marginal(&self) -> &NaturalGaussian {
        self.marg.as_ref().expect("marginal before first advance")
    }

    pub(crate) fn prev_marginal(&self) -> &NaturalGaussian {
        self.prev_marg
            .as_ref()
            .expect("previous marginal undefined at t = 0")
    }

    pub(crate) fn potential(&self) -> &Potential {
        self.pot.as_ref().expect("potential undefined at t = 0")
    }

    pub(crate) fn marginal_vjp(&self, s: &DVector<f64>, out: &mut DVector<f64>) {
        let ctx = self.ctx.as_ref().expect("VJP before first advance");
        marginal_vjp_into(ctx, s, out);
    }

    pub(crate) fn prev_marginal_vjp(&self, s: &DVector<f64>, out: &mut DVector<f64>) {
        if let Some(ctx) = &self.ctx_prev {
            marginal_vjp_into(ctx, s, out);
        }
    }

    pub(crate) fn potential_vjp(&self, x_t: &DVector<f64>, s: &DVector<f64>, out: &mut DVector<f64>) {
        let ctx = self.ctx.as_ref().expect("VJP before first advance");
        let Some(pot) = &ctx.pot else { return };
        let d = ctx.d_x;
        let s1 = DVector::from_fn(d, |i, _| s[i]);
        pot.mlp.backward_into(
            &pot.mlp_params,
            x_t,
            &s1,
            &mut out.as_mut_slice()[pot.r_pot.clone()],
            1.0,
        );
        let mut s2 = DMatrix::from_fn(d, d, |i, j| s[d + i * d + j]);
        linalg::symmetrize(&mut s2);
        let g_l = linalg::gram_grad_to_factor(&(-&s2), &pot.l_pot);
        linalg::accumulate_tril_grad(
            &pot.raw_l_pot,
            d,
            &g_l,
            &mut out.as_mut_slice()[pot.r_l_pot.clone()],
        );
    }

    /// λ range of the current slot (contiguous by construction).
    pub(crate) fn active_range(&self) -> std::ops::Range<usize> {
        let ctx = self.ctx.as_ref().expect("active range before first advance");
        let start = ctx.r_eta1.start;
        let end = ctx
            .pot
            .as_ref()
            .map(|p| p.r_l_pot.end)
            .unwrap_or(ctx.r_l_marg.end);
        start..end
    }

    pub(crate) fn replay_marginal(
        &self,
        params: &VariationalParams,
        lambda: &DVector<f64>,
    ) -> Result<ReplayedMarginal> {
        let t = self.t.ok_or_else(|| Error::Config("replay before first advance".into()))?;
        let mut alt = params.clone();
        alt.lambda = lambda.clone();
        let (marg, _) = slot(&alt, t)?;
        let ctx = slot_ctx(&alt, t)?;
        Ok(ReplayedMarginal::new(
            marg,
            Box::new(move |s, out| {
                marginal_vjp_into(&ctx, s, out);
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::eta_dim;
    use crate::varfamily::VarFamily;
    use approx::assert_relative_eq;

    fn scheme() -> SchemeSpec {
        SchemeSpec::NonAmortized {
            d_x: 2,
            pot_hidden: vec![4],
        }
    }

    #[test]
    fn slots_grow_lazily_and_warm_start() {
        let params = VariationalParams::init(scheme(), 1, 5).unwrap();
        assert_eq!(params.dim_lambda(), 0);
        let mut fam = VarFamily::new(params, GradMode::Online).unwrap();
        let y = DVector::from_vec(vec![0.1, -0.2]);
        fam.advance(&y).unwrap();
        let len0 = fam.dim_lambda();
        assert_eq!(len0, 2 + 3);
        fam.advance(&y).unwrap();
        let len1 = fam.dim_lambda();
        assert!(len1 > len0);
        // Slot 1's marginal blocks warm-start from slot 0's current values.
        let r0 = fam.params().block("slot0.eta1").unwrap();
        let r1 = fam.params().block("slot1.eta1").unwrap();
        for (a, b) in r0.zip(r1) {
            assert_eq!(fam.lambda()[a], fam.lambda()[b]);
        }
        fam.advance(&y).unwrap();
        assert!(fam.params().block("slot2.l_pot").is_some());
        // Re-running a sweep after reset keeps λ (slots are persistent).
        let len_before = fam.dim_lambda();
        fam.reset();
        fam.advance(&y).unwrap();
        assert_eq!(fam.dim_lambda(), len_before);
    }

    #[test]
    fn marginal_vjp_matches_finite_differences() {
        let params = VariationalParams::init(scheme(), 1, 5).unwrap();
        let mut fam = VarFamily::new(params, GradMode::Online).unwrap();
        let y = DVector::from_vec(vec![0.0, 0.0]);
        fam.advance(&y).unwrap();
        fam.advance(&y).unwrap();
        // Nudge slot 1's parameters off the warm start.
        let r = fam.params().block("slot1.eta1").unwrap();
        fam.lambda_mut()[r.start] = 0.6;
        fam.lambda_mut()[r.start + 1] = -0.4;
        let snapshot = fam.params().clone();
        let mut fam = VarFamily::new(snapshot.clone(), GradMode::Online).unwrap();
        fam.advance(&y).unwrap();
        fam.advance(&y).unwrap();

        let d_eta = eta_dim(2);
        let s = DVector::from_fn(d_eta, |i, _| 0.9 - 0.3 * i as f64);
        let mut vjp = DVector::zeros(fam.dim_lambda());
        fam.marginal_score_vjp(&s, &mut vjp);

        let eta_at = |p: &VariationalParams| -> DVector<f64> {
            let (m, _) = slot(p, 1).unwrap();
            let mut v = DVector::zeros(d_eta);
            v.rows_mut(0, 2).copy_from(m.eta1());
            for i in 0..2 {
                for j in 0..2 {
                    v[2 + i * 2 + j] = m.eta2()[(i, j)];
                }
            }
            v
        };
        let h = 1e-6;
        let active = fam.active_block().unwrap();
        for k in 0..snapshot.dim_lambda() {
            let mut lp = snapshot.clone();
            let mut lm = snapshot.clone();
            lp.lambda[k] += h;
            lm.lambda[k] -= h;
            let fd = (eta_at(&lp) - eta_at(&lm)).dot(&s) / (2.0 * h);
            assert_relative_eq!(vjp[k], fd, epsilon = 1e-6, max_relative = 1e-5);
            if !active.contains(&k) {
                // Gradients confined to the active slot (η of slot 1 only
                // touches slot-1 marginal blocks).
                let in_slot1_marg = fam.params().block("slot1.eta1").unwrap().contains(&k)
                    || fam.params().block("slot1.l_marg").unwrap().contains(&k);
                if !in_slot1_marg {
                    assert_eq!(vjp[k], 0.0);
                }
            }
        }
    }

    #[test]
    fn potential_vjp_matches_finite_differences() {
        let params = VariationalParams::init(scheme(), 1, 5).unwrap();
        let mut fam = VarFamily::new(params, GradMode::Online).unwrap();
        let y = DVector::from_vec(vec![0.3, 0.1]);
        fam.advance(&y).unwrap();
        fam.advance(&y).unwrap();
        let snapshot = fam.params().clone();
        let x_t = DVector::from_vec(vec![0.2, -0.5]);
        let d_eta = eta_dim(2);
        let s = DVector::from_fn(d_eta, |i, _| 0.25 + 0.1 * i as f64);
        let mut vjp = DVector::zeros(fam.dim_lambda());
        fam.potential_score_vjp(&x_t, &s, &mut vjp);

        let pot_dot = |p: &VariationalParams| -> f64 {
            let (_, pot) = slot(p, 1).unwrap();
            let eta1 = pot.eta1_at(&x_t);
            let mut acc = 0.0;
            for i in 0..2 {
                acc += eta1[i] * s[i];
                for j in 0..2 {
                    acc += pot.eta2()[(i, j)] * s[2 + i * 2 + j];
                }
            }
            acc
        };
        let h = 1e-6;
        for k in 0..snapshot.dim_lambda() {
            let mut lp = snapshot.clone();
            let mut lm = snapshot.clone();
            lp.lambda[k] += h;
            lm.lambda[k] -= h;
            let fd = (pot_dot(&lp) - pot_dot(&lm)) / (2.0 * h);
            assert_relative_eq!(vjp[k], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn slot_zero_has_uniform_potential() {
        let params = VariationalParams::init(scheme(), 1, 5).unwrap();
        let mut fam = VarFamily::new(params, GradMode::Online).unwrap();
        fam.advance(&DVector::from_vec(vec![0.0, 0.0])).unwrap();
        let (_, pot) = slot(fam.params(), 0).unwrap();
        assert!(matches!(pot, Potential::Zero { .. }));
        assert_eq!(pot.log_sup(&DVector::from_vec(vec![1.0, 2.0])).unwrap(), 0.0);
    }
}
