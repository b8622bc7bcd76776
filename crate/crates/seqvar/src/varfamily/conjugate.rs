//! Conjugate amortized scheme.
//!
//! λ holds a linear-Gaussian kernel `(Aᵠ, Qᵠ)` that serves double duty — it
//! both propagates the running marginal (moment prediction) and defines the
//! forward potential `η̃₁(x_t) = AᵠᵀQᵠ⁻¹x_t`, `η̃₂ = −½AᵠᵀQᵠ⁻¹Aᵠ` — plus an
//! observation increment: an MLP mapping `y_t` to the first natural
//! parameter and a constant negative-definite quadratic block `η̄₂ = −L̄L̄ᵀ`.
//! Assimilation is the conjugate update
//!
//! `η_t = natural(N(Aᵠ m_{t−1}, Aᵠ P_{t−1} Aᵠᵀ + Qᵠ)) + η̄(y_t)`.
//!
//! The carrier is the moment pair `(m_t, P_t)` of the marginal. Parameter
//! gradients run reverse-mode over the truncation window: forward replay
//! caches per-step intermediates once per `advance`, and each VJP call
//! sweeps backwards through them. λ is typically MLP-sized here, which is
//! why this scheme avoids the per-coordinate forward tangents the
//! closed-form family uses.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::NaturalGaussian;
use crate::linalg;
use crate::nn::Mlp;
use crate::rngstreams::{stream, Purpose, StreamKey};
use crate::varfamily::{
    GradMode, Layout, Potential, ReplayedMarginal, SchemeSpec, VariationalParams,
};

/// Decoded λ plus everything the reverse sweeps need.
pub(crate) struct Dec {
    d_x: usize,
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    q_inv: DMatrix<f64>,
    pot_g: DMatrix<f64>,
    pot_eta2: DMatrix<f64>,
    l_q: DMatrix<f64>,
    raw_l_q: Vec<f64>,
    obs_mlp: Mlp,
    obs_params: Vec<f64>,
    obs_eta2: DMatrix<f64>,
    l_obs: DMatrix<f64>,
    raw_l_obs: Vec<f64>,
    init_mean: DVector<f64>,
    init_cov: DMatrix<f64>,
    l_init: DMatrix<f64>,
    raw_l_init: Vec<f64>,
    r_a: std::ops::Range<usize>,
    r_l_q: std::ops::Range<usize>,
    r_obs: std::ops::Range<usize>,
    r_l_obs: std::ops::Range<usize>,
    r_init_mean: std::ops::Range<usize>,
    r_l_init: std::ops::Range<usize>,
}

fn obs_mlp_dims(d_x: usize, d_y: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(d_y);
    dims.extend_from_slice(hidden);
    dims.push(d_x);
    dims
}

pub(crate) fn layout(d_x: usize, d_y: usize, obs_hidden: &[usize]) -> Layout {
    let mlp = Mlp::new(obs_mlp_dims(d_x, d_y, obs_hidden));
    let mut b = Layout::builder();
    b.push("a_mat", d_x * d_x);
    b.push("l_q", linalg::tri_len(d_x));
    b.push("obs_mlp", mlp.param_count());
    b.push("l_obs", linalg::tri_len(d_x));
    b.push("init_mean", d_x);
    b.push("l_init", linalg::tri_len(d_x));
    b.finish()
}

pub(crate) fn init(d_x: usize, d_y: usize, obs_hidden: &[usize], seed: u64) -> (DVector<f64>, Layout) {
    let layout = layout(d_x, d_y, obs_hidden);
    let mut lambda = DVector::zeros(layout.total_len());

    // Near-identity kernel with moderate innovation noise: a sensible prior
    // for slowly-mixing state sequences, and far from any singularity.
    let a_range = layout.block("a_mat").unwrap();
    for i in 0..d_x {
        lambda[a_range.start + i * d_x + i] = 0.9;
    }
    let diag = |layout: &Layout, lambda: &mut DVector<f64>, name: &str, d: usize, v: f64| {
        let range = layout.block(name).unwrap();
        let raw = linalg::inv_softplus(v);
        let mut k = 0;
        for i in 0..d {
            for j in 0..=i {
                if i == j {
                    lambda[range.start + k] = raw;
                }
                k += 1;
            }
        }
    };
    diag(&layout, &mut lambda, "l_q", d_x, 0.5);
    diag(&layout, &mut lambda, "l_obs", d_x, 1.0);
    diag(&layout, &mut lambda, "l_init", d_x, 1.0);

    let mlp = Mlp::new(obs_mlp_dims(d_x, d_y, obs_hidden));
    let mut rng = stream(StreamKey::new(seed, Purpose::ParamInit, 0, 2));
    let obs_range = layout.block("obs_mlp").unwrap();
    for (k, v) in mlp.init_params(&mut rng).into_iter().enumerate() {
        lambda[obs_range.start + k] = v;
    }
    (lambda, layout)
}

pub(crate) fn decode(params: &VariationalParams) -> Result<Arc<Dec>> {
    let (d_x, d_y, obs_hidden) = match &params.scheme {
        SchemeSpec::AmortizedConjugate {
            d_x,
            d_y,
            obs_hidden,
        } => (*d_x, *d_y, obs_hidden.as_slice()),
        _ => return Err(Error::Config("conjugate decode on a different scheme".into())),
    };
    let lambda = &params.lambda;
    let get = |name: &str| -> Result<std::ops::Range<usize>> {
        params
            .layout
            .block(name)
            .ok_or_else(|| Error::Config(format!("conjugate layout is missing block {name}")))
    };
    let r_a = get("a_mat")?;
    let r_l_q = get("l_q")?;
    let r_obs = get("obs_mlp")?;
    let r_l_obs = get("l_obs")?;
    let r_init_mean = get("init_mean")?;
    let r_l_init = get("l_init")?;

    let a = DMatrix::from_fn(d_x, d_x, |i, j| lambda[r_a.start + i * d_x + j]);
    let raw_l_q = lambda.as_slice()[r_l_q.clone()].to_vec();
    let l_q = linalg::unpack_tril(&raw_l_q, d_x);
    let q = &l_q * l_q.transpose();
    let q_chol = linalg::spd_cholesky(&q, "conjugate kernel covariance")?;
    let q_inv = linalg::chol_inverse(&q_chol);
    let pot_g = a.transpose() * &q_inv;
    let mut pot_eta2 = -0.5 * (&pot_g * &a);
    linalg::symmetrize(&mut pot_eta2);

    let obs_mlp = Mlp::new(obs_mlp_dims(d_x, d_y, obs_hidden));
    let obs_params = lambda.as_slice()[r_obs.clone()].to_vec();
    let raw_l_obs = lambda.as_slice()[r_l_obs.clone()].to_vec();
    let l_obs = linalg::unpack_tril(&raw_l_obs, d_x);
    let obs_eta2 = -(&l_obs * l_obs.transpose());

    let init_mean = DVector::from_fn(d_x, |i, _| lambda[r_init_mean.start + i]);
    let raw_l_init = lambda.as_slice()[r_l_init.clone()].to_vec();
    let l_init = linalg::unpack_tril(&raw_l_init, d_x);
    let init_cov = &l_init * l_init.transpose();

    Ok(Arc::new(Dec {
        d_x,
        a,
        q,
        q_inv,
        pot_g,
        pot_eta2,
        l_q,
        raw_l_q,
        obs_mlp,
        obs_params,
        obs_eta2,
        l_obs,
        raw_l_obs,
        init_mean,
        init_cov,
        l_init,
        raw_l_init,
        r_a,
        r_l_q,
        r_obs,
        r_l_obs,
        r_init_mean,
        r_l_init,
    }))
}

/// Where a step's predictive moments came from, for the reverse sweep.
enum StepSource {
    /// The initial law `N(init_mean, init_cov)` — chain into the init blocks.
    Initial,
    /// Prediction from a carrier. `frozen` marks the window entry whose
    /// carrier is a constant (gradients stop there).
    Carried {
        m_in: DVector<f64>,
        p_in: DMatrix<f64>,
        frozen: bool,
    },
}

/// Cached intermediates of one forward assimilation step.
struct StepRecord {
    y: DVector<f64>,
    source: StepSource,
    pp_inv: DMatrix<f64>,
    /// `η₁` of the predictive part, `Pp⁻¹ m_p`.
    eta1p: DVector<f64>,
    sigma_out: DMatrix<f64>,
    m_out: DVector<f64>,
}

/// One conjugate update from predictive moments `(mp, pp)`.
fn update(dec: &Dec, mp: DVector<f64>, mut pp: DMatrix<f64>, y: &DVector<f64>) -> Result<(NaturalGaussian, DMatrix<f64>, DVector<f64>)> {
    linalg::symmetrize(&mut pp);
    let pp_chol = linalg::spd_cholesky(&pp, "conjugate predictive covariance")?;
    let pp_inv = linalg::chol_inverse(&pp_chol);
    let eta1p = linalg::chol_solve(&pp_chol, &mp);
    let obs_eta1 = dec.obs_mlp.forward(&dec.obs_params, y);
    let eta1 = &eta1p + obs_eta1;
    let eta2 = -0.5 * &pp_inv + &dec.obs_eta2;
    let ng = NaturalGaussian::new(eta1, eta2)?;
    Ok((ng, pp_inv, eta1p))
}

fn forward_step(
    dec: &Dec,
    prev: Option<(&DVector<f64>, &DMatrix<f64>)>,
    frozen: bool,
    y: &DVector<f64>,
) -> Result<(NaturalGaussian, StepRecord)> {
    let (mp, pp, source) = match prev {
        None => (
            dec.init_mean.clone(),
            dec.init_cov.clone(),
            StepSource::Initial,
        ),
        Some((m, p)) => {
            let mp = &dec.a * m;
            let pp = &dec.a * p * dec.a.transpose() + &dec.q;
            (
                mp,
                pp,
                StepSource::Carried {
                    m_in: m.clone(),
                    p_in: p.clone(),
                    frozen,
                },
            )
        }
    };
    let (ng, pp_inv, eta1p) = update(dec, mp, pp, y)?;
    let record = StepRecord {
        y: y.clone(),
        source,
        pp_inv,
        eta1p,
        sigma_out: ng.cov().clone(),
        m_out: ng.mean().clone(),
    };
    Ok((ng, record))
}

/// Reverse sweep: accumulates `Jᵀ s` into `out` where `J = ∂η_t/∂λ` of the
/// replayed window. `s` is packed `[s₁; vec(S₂) row-major]`.
fn reverse_sweep(dec: &Dec, records: &[StepRecord], s: &DVector<f64>, out: &mut DVector<f64>) {
    let d = dec.d_x;
    if records.is_empty() {
        return;
    }
    let mut g_eta1 = DVector::from_fn(d, |i, _| s[i]);
    let mut g_eta2 = DMatrix::from_fn(d, d, |i, j| s[d + i * d + j]);
    for (idx, rec) in records.iter().enumerate().rev() {
        linalg::symmetrize(&mut g_eta2);
        // Observation increment: η̄₁ = MLP(y), η̄₂ = −L̄L̄ᵀ.
        dec.obs_mlp.backward_into(
            &dec.obs_params,
            &rec.y,
            &g_eta1,
            &mut out.as_mut_slice()[dec.r_obs.clone()],
            1.0,
        );
        let g_l_obs = linalg::gram_grad_to_factor(&(-&g_eta2), &dec.l_obs);
        linalg::accumulate_tril_grad(
            &dec.raw_l_obs,
            d,
            &g_l_obs,
            &mut out.as_mut_slice()[dec.r_l_obs.clone()],
        );
        // Predictive part: η₁ᵖ = Pp⁻¹ m_p, η₂ᵖ = −½Pp⁻¹.
        let g_mp = &rec.pp_inv * &g_eta1;
        let mut g_pp = -(&g_mp * rec.eta1p.transpose()) + 0.5 * (&rec.pp_inv * &g_eta2 * &rec.pp_inv);
        linalg::symmetrize(&mut g_pp);
        match &rec.source {
            StepSource::Initial => {
                for i in 0..d {
                    out[dec.r_init_mean.start + i] += g_mp[i];
                }
                let g_l = linalg::gram_grad_to_factor(&g_pp, &dec.l_init);
                linalg::accumulate_tril_grad(
                    &dec.raw_l_init,
                    d,
                    &g_l,
                    &mut out.as_mut_slice()[dec.r_l_init.clone()],
                );
            }
            StepSource::Carried { m_in, p_in, frozen } => {
                // m_p = A m, Pp = A P Aᵀ + Q.
                let g_a = &g_mp * m_in.transpose() + 2.0 * (&g_pp * &dec.a * p_in);
                for i in 0..d {
                    for j in 0..d {
                        out[dec.r_a.start + i * d + j] += g_a[(i, j)];
                    }
                }
                let g_l_q = linalg::gram_grad_to_factor(&g_pp, &dec.l_q);
                linalg::accumulate_tril_grad(
                    &dec.raw_l_q,
                    d,
                    &g_l_q,
                    &mut out.as_mut_slice()[dec.r_l_q.clone()],
                );
                if !frozen {
                    // Convert moment-space gradients into the previous step's
                    // natural coordinates: m = Ση₁, P = Σ.
                    let g_m = dec.a.transpose() * &g_mp;
                    let mut g_p = dec.a.transpose() * &g_pp * &dec.a;
                    linalg::symmetrize(&mut g_p);
                    let prev = &records[idx - 1];
                    let sg = &prev.sigma_out * &g_m;
                    g_eta1 = sg.clone();
                    g_eta2 = 2.0 * (&sg * prev.m_out.transpose())
                        + 2.0 * (&prev.sigma_out * &g_p * &prev.sigma_out);
                }
            }
        }
    }
}

/// Public conjugate assimilation op on explicit inputs.
pub(crate) fn assimilate_conjugate(
    params: &VariationalParams,
    q_prev: &NaturalGaussian,
    y: &DVector<f64>,
) -> Result<NaturalGaussian> {
    let dec = decode(params)?;
    let (ng, _) = forward_step(&dec, Some((q_prev.mean(), q_prev.cov())), true, y)?;
    Ok(ng)
}

struct WindowStep {
    /// Frozen carrier entering the step; `None` marks the initial step.
    entry: Option<(DVector<f64>, DMatrix<f64>)>,
    y: DVector<f64>,
}

pub(crate) struct State {
    d_x: usize,
    d_y: usize,
    window: VecDeque<WindowStep>,
    carrier: Option<(DVector<f64>, DMatrix<f64>)>,
    marg: Option<NaturalGaussian>,
    prev_marg: Option<NaturalGaussian>,
    records: Vec<StepRecord>,
    records_prev: Vec<StepRecord>,
    dec: Option<Arc<Dec>>,
    dec_prev: Option<Arc<Dec>>,
    pot: Option<Potential>,
}

impl State {
    pub(crate) fn new(d_x: usize, d_y: usize) -> State {
        State {
            d_x,
            d_y,
            window: VecDeque::new(),
            carrier: None,
            marg: None,
            prev_marg: None,
            records: Vec::new(),
            records_prev: Vec::new(),
            dec: None,
            dec_prev: None,
            pot: None,
        }
    }

    pub(crate) fn reset(&mut self) {
        *self = State::new(self.d_x, self.d_y);
    }

    fn replay(
        &self,
        dec: &Dec,
    ) -> Result<(NaturalGaussian, Vec<StepRecord>)> {
        let mut records = Vec::with_capacity(self.window.len());
        let mut cur: Option<NaturalGaussian> = None;
        for (idx, step) in self.window.iter().enumerate() {
            let (ng, rec) = if idx == 0 {
                match &step.entry {
                    Some((m, p)) => forward_step(dec, Some((m, p)), true, &step.y)?,
                    None => forward_step(dec, None, false, &step.y)?,
                }
            } else {
                let prev = cur.as_ref().unwrap();
                forward_step(dec, Some((prev.mean(), prev.cov())), false, &step.y)?
            };
            records.push(rec);
            cur = Some(ng);
        }
        let marg = cur.ok_or_else(|| Error::Config("empty replay window".into()))?;
        Ok((marg, records))
    }

    pub(crate) fn advance(
        &mut self,
        params: &VariationalParams,
        _mode: GradMode,
        t: usize,
        y: &DVector<f64>,
    ) -> Result<()> {
        if y.len() != self.d_y {
            return Err(Error::Dimension {
                what: "observation for conjugate advance".into(),
                expected: self.d_y,
                got: y.len(),
            });
        }
        let dec = decode(params)?;

        self.prev_marg = self.marg.take();
        self.records_prev = std::mem::take(&mut self.records);
        self.dec_prev = self.dec.take();

        self.window.push_back(WindowStep {
            entry: self.carrier.clone(),
            y: y.clone(),
        });
        while self.window.len() > params.delta {
            self.window.pop_front();
        }

        let (marg, records) = self.replay(&dec)?;
        self.carrier = Some((marg.mean().clone(), marg.cov().clone()));
        self.marg = Some(marg);
        self.records = records;

        self.pot = if t >= 1 {
            Some(Potential::LinearGaussian {
                g: dec.pot_g.clone(),
                eta2: dec.pot_eta2.clone(),
            })
        } else {
            None
        };
        self.dec = Some(dec);
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
        let dec = self.dec.as_ref().expect("VJP before first advance");
        reverse_sweep(dec, &self.records, s, out);
    }

    pub(crate) fn prev_marginal_vjp(&self, s: &DVector<f64>, out: &mut DVector<f64>) {
        if let Some(dec) = &self.dec_prev {
            reverse_sweep(dec, &self.records_prev, s, out);
        }
    }

    /// Reverse-mode potential VJP: `η̃₁ = G x_t`, `η̃₂ = −½GA`, `G = AᵀQ⁻¹`.
    pub(crate) fn potential_vjp(&self, x_t: &DVector<f64>, s: &DVector<f64>, out: &mut DVector<f64>) {
        let dec = self.dec.as_ref().expect("VJP before first advance");
        let d = self.d_x;
        let s1 = DVector::from_fn(d, |i, _| s[i]);
        let mut s2 = DMatrix::from_fn(d, d, |i, j| s[d + i * d + j]);
        linalg::symmetrize(&mut s2);
        // G-cotangent from both heads, then chain G = AᵀQ⁻¹.
        let g_g = &s1 * x_t.transpose() - 0.5 * (&s2 * dec.a.transpose());
        let g_a_pot = -0.5 * (dec.pot_g.transpose() * &s2);
        let g_a = &dec.q_inv * g_g.transpose() + g_a_pot;
        for i in 0..d {
            for j in 0..d {
                out[dec.r_a.start + i * d + j] += g_a[(i, j)];
            }
        }
        let mut g_q = -(dec.pot_g.transpose() * &g_g * &dec.q_inv);
        linalg::symmetrize(&mut g_q);
        let g_l_q = linalg::gram_grad_to_factor(&g_q, &dec.l_q);
        linalg::accumulate_tril_grad(
            &dec.raw_l_q,
            d,
            &g_l_q,
            &mut out.as_mut_slice()[dec.r_l_q.clone()],
        );
    }

    pub(crate) fn replay_marginal(
        &self,
        params: &VariationalParams,
        lambda: &DVector<f64>,
    ) -> Result<ReplayedMarginal> {
        let mut alt = params.clone();
        alt.lambda = lambda.clone();
        let dec = decode(&alt)?;
        let (marg, records) = self.replay(&dec)?;
        Ok(ReplayedMarginal::new(
            marg,
            Box::new(move |s, out| {
                reverse_sweep(&dec, &records, s, out);
            }),
        ))
    }
}
