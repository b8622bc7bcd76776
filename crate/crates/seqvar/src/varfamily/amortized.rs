//! Fully amortized scheme.
//!
//! A deterministic carrier `a_t` summarizes the observation history:
//! `a_t = MLP_assim([a_{t−1}; y_t])` with a learnt initial carrier `a_{−1}`.
//! A head MLP maps the carrier to the marginal's natural parameters —
//! `z = MLP_head(a_t)`, `η₁ = z[..d]`, and the quadratic block is built from
//! a packed Cholesky factor in the tail of `z`, `η₂ = −½(L(z)L(z)ᵀ + εI)` —
//! so the marginal is valid Gaussian for every carrier. The potential is an
//! MLP in `x_t` for `η̃₁` with a free parameterized factor for
//! `η̃₂ = −(L̃L̃ᵀ + εI)`.
//!
//! Gradients are reverse-mode over the truncation window, like the
//! conjugate scheme but with the carrier chain running through the
//! assimilation MLP instead of moment prediction.

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

/// Floor added to both precision factors so they stay invertible.
const EPS_PD: f64 = 1e-6;

/// Carrier state of the amortized recursion.
#[derive(Clone, Debug)]
pub struct AmortizedState {
    pub a: DVector<f64>,
}

impl AmortizedState {
    pub fn new(a: DVector<f64>) -> AmortizedState {
        AmortizedState { a }
    }
}

fn assim_dims(d_y: usize, d_a: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![d_a + d_y];
    dims.extend_from_slice(hidden);
    dims.push(d_a);
    dims
}

fn head_dims(d_x: usize, d_a: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![d_a];
    dims.extend_from_slice(hidden);
    dims.push(d_x + linalg::tri_len(d_x));
    dims
}

fn pot_dims(d_x: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![d_x];
    dims.extend_from_slice(hidden);
    dims.push(d_x);
    dims
}

pub(crate) struct Dec {
    d_x: usize,
    d_a: usize,
    a_init: DVector<f64>,
    assim: Mlp,
    assim_params: Vec<f64>,
    head: Mlp,
    head_params: Vec<f64>,
    pot: Mlp,
    pot_params: Vec<f64>,
    pot_eta2: DMatrix<f64>,
    l_pot: DMatrix<f64>,
    raw_l_pot: Vec<f64>,
    r_a_init: std::ops::Range<usize>,
    r_assim: std::ops::Range<usize>,
    r_head: std::ops::Range<usize>,
    r_pot: std::ops::Range<usize>,
    r_l_pot: std::ops::Range<usize>,
}

pub(crate) fn layout(
    d_x: usize,
    d_y: usize,
    d_a: usize,
    assim_hidden: &[usize],
    head_hidden: &[usize],
    pot_hidden: &[usize],
) -> Layout {
    let assim = Mlp::new(assim_dims(d_y, d_a, assim_hidden));
    let head = Mlp::new(head_dims(d_x, d_a, head_hidden));
    let pot = Mlp::new(pot_dims(d_x, pot_hidden));
    let mut b = Layout::builder();
    b.push("a_init", d_a);
    b.push("assim_mlp", assim.param_count());
    b.push("head_mlp", head.param_count());
    b.push("pot_mlp", pot.param_count());
    b.push("l_pot", linalg::tri_len(d_x));
    b.finish()
}

pub(crate) fn init(
    d_x: usize,
    d_y: usize,
    d_a: usize,
    assim_hidden: &[usize],
    head_hidden: &[usize],
    pot_hidden: &[usize],
    seed: u64,
) -> (DVector<f64>, Layout) {
    let layout = layout(d_x, d_y, d_a, assim_hidden, head_hidden, pot_hidden);
    let mut lambda = DVector::zeros(layout.total_len());
    let fill = |lambda: &mut DVector<f64>, range: std::ops::Range<usize>, vals: Vec<f64>| {
        for (k, v) in vals.into_iter().enumerate() {
            lambda[range.start + k] = v;
        }
    };
    let assim = Mlp::new(assim_dims(d_y, d_a, assim_hidden));
    let head = Mlp::new(head_dims(d_x, d_a, head_hidden));
    let pot = Mlp::new(pot_dims(d_x, pot_hidden));
    let mut rng = stream(StreamKey::new(seed, Purpose::ParamInit, 0, 3));
    fill(&mut lambda, layout.block("assim_mlp").unwrap(), assim.init_params(&mut rng));
    fill(&mut lambda, layout.block("head_mlp").unwrap(), head.init_params(&mut rng));
    fill(&mut lambda, layout.block("pot_mlp").unwrap(), pot.init_params(&mut rng));
    let l_pot_range = layout.block("l_pot").unwrap();
    let raw_unit = linalg::inv_softplus(1.0);
    let mut k = 0;
    for i in 0..d_x {
        for j in 0..=i {
            if i == j {
                lambda[l_pot_range.start + k] = raw_unit;
            }
            k += 1;
        }
    }
    (lambda, layout)
}

pub(crate) fn decode(params: &VariationalParams) -> Result<Arc<Dec>> {
    let (d_x, d_y, d_a, assim_hidden, head_hidden, pot_hidden) = match &params.scheme {
        SchemeSpec::Amortized {
            d_x,
            d_y,
            d_a,
            assim_hidden,
            head_hidden,
            pot_hidden,
        } => (
            *d_x,
            *d_y,
            *d_a,
            assim_hidden.as_slice(),
            head_hidden.as_slice(),
            pot_hidden.as_slice(),
        ),
        _ => return Err(Error::Config("amortized decode on a different scheme".into())),
    };
    let lambda = &params.lambda;
    let get = |name: &str| -> Result<std::ops::Range<usize>> {
        params
            .layout
            .block(name)
            .ok_or_else(|| Error::Config(format!("amortized layout is missing block {name}")))
    };
    let r_a_init = get("a_init")?;
    let r_assim = get("assim_mlp")?;
    let r_head = get("head_mlp")?;
    let r_pot = get("pot_mlp")?;
    let r_l_pot = get("l_pot")?;

    let a_init = DVector::from_fn(d_a, |i, _| lambda[r_a_init.start + i]);
    let raw_l_pot = lambda.as_slice()[r_l_pot.clone()].to_vec();
    let l_pot = linalg::unpack_tril(&raw_l_pot, d_x);
    let mut pot_eta2 = -(&l_pot * l_pot.transpose());
    for i in 0..d_x {
        pot_eta2[(i, i)] -= EPS_PD;
    }
    Ok(Arc::new(Dec {
        d_x,
        d_a,
        a_init,
        assim: Mlp::new(assim_dims(d_y, d_a, assim_hidden)),
        assim_params: lambda.as_slice()[r_assim.clone()].to_vec(),
        head: Mlp::new(head_dims(d_x, d_a, head_hidden)),
        head_params: lambda.as_slice()[r_head.clone()].to_vec(),
        pot: Mlp::new(pot_dims(d_x, pot_hidden)),
        pot_params: lambda.as_slice()[r_pot.clone()].to_vec(),
        pot_eta2,
        l_pot,
        raw_l_pot,
        r_a_init,
        r_assim,
        r_head,
        r_pot,
        r_l_pot,
    }))
}

/// Carrier update plus head readout. Returns the new carrier, the marginal,
/// and the head's raw packed factor (cached for the reverse pass).
fn forward_step(
    dec: &Dec,
    a_prev: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, NaturalGaussian, Vec<f64>)> {
    let d = dec.d_x;
    let mut input = DVector::zeros(dec.d_a + y.len());
    input.rows_mut(0, dec.d_a).copy_from(a_prev);
    input.rows_mut(dec.d_a, y.len()).copy_from(y);
    let a = dec.assim.forward(&dec.assim_params, &input);
    let z = dec.head.forward(&dec.head_params, &a);
    let eta1 = DVector::from_fn(d, |i, _| z[i]);
    let raw: Vec<f64> = (0..linalg::tri_len(d)).map(|k| z[d + k]).collect();
    let l = linalg::unpack_tril(&raw, d);
    let mut eta2 = -0.5 * (&l * l.transpose());
    for i in 0..d {
        eta2[(i, i)] -= 0.5 * EPS_PD;
    }
    let ng = NaturalGaussian::new(eta1, eta2)?;
    Ok((a, ng, raw))
}

/// Public amortized assimilation op on explicit inputs.
pub(crate) fn assimilate(
    params: &VariationalParams,
    state: &AmortizedState,
    y: &DVector<f64>,
) -> Result<(AmortizedState, NaturalGaussian)> {
    let dec = decode(params)?;
    if state.a.len() != dec.d_a {
        return Err(Error::Dimension {
            what: "amortized carrier".into(),
            expected: dec.d_a,
            got: state.a.len(),
        });
    }
    let (a, ng, _) = forward_step(&dec, &state.a, y)?;
    Ok((AmortizedState::new(a), ng))
}

struct StepRecord {
    /// Carrier entering the step. Chains into `a_init` when `initial`,
    /// stops when `frozen`.
    a_in: DVector<f64>,
    y: DVector<f64>,
    a_out: DVector<f64>,
    raw: Vec<f64>,
    initial: bool,
    frozen: bool,
}

/// Accumulates `Jᵀ s` into `out` by sweeping the cached window backwards.
fn reverse_sweep(dec: &Dec, records: &[StepRecord], s: &DVector<f64>, out: &mut DVector<f64>) {
    let d = dec.d_x;
    if records.is_empty() {
        return;
    }
    // Head upstream at the last step: η₁ = z[..d] takes s₁ directly;
    // η₂ = −½(LLᵀ + εI) chains through the packed factor.
    let mut g_a: Option<DVector<f64>> = None;
    for (idx, rec) in records.iter().enumerate().rev() {
        let ga_next = if idx == records.len() - 1 {
            let s1 = DVector::from_fn(d, |i, _| s[i]);
            let mut s2 = DMatrix::from_fn(d, d, |i, j| s[d + i * d + j]);
            linalg::symmetrize(&mut s2);
            let l = linalg::unpack_tril(&rec.raw, d);
            let g_l = linalg::gram_grad_to_factor(&(-0.5 * &s2), &l);
            let mut g_raw = vec![0.0; linalg::tri_len(d)];
            linalg::accumulate_tril_grad(&rec.raw, d, &g_l, &mut g_raw);
            let mut gz = DVector::zeros(d + linalg::tri_len(d));
            gz.rows_mut(0, d).copy_from(&s1);
            for (k, v) in g_raw.iter().enumerate() {
                gz[d + k] = *v;
            }
            dec.head.backward_into(
                &dec.head_params,
                &rec.a_out,
                &gz,
                &mut out.as_mut_slice()[dec.r_head.clone()],
                1.0,
            )
        } else {
            g_a.take().unwrap()
        };
        let mut input = DVector::zeros(dec.d_a + rec.y.len());
        input.rows_mut(0, dec.d_a).copy_from(&rec.a_in);
        input.rows_mut(dec.d_a, rec.y.len()).copy_from(&rec.y);
        let g_input = dec.assim.backward_into(
            &dec.assim_params,
            &input,
            &ga_next,
            &mut out.as_mut_slice()[dec.r_assim.clone()],
            1.0,
        );
        let g_a_in = g_input.rows(0, dec.d_a).into_owned();
        if rec.initial {
            for i in 0..dec.d_a {
                out[dec.r_a_init.start + i] += g_a_in[i];
            }
        } else if !rec.frozen {
            g_a = Some(g_a_in);
        }
    }
}

struct WindowStep {
    entry: Option<DVector<f64>>,
    y: DVector<f64>,
}

pub(crate) struct State {
    window: VecDeque<WindowStep>,
    carrier: Option<DVector<f64>>,
    marg: Option<NaturalGaussian>,
    prev_marg: Option<NaturalGaussian>,
    records: Vec<StepRecord>,
    records_prev: Vec<StepRecord>,
    dec: Option<Arc<Dec>>,
    dec_prev: Option<Arc<Dec>>,
    pot: Option<Potential>,
}

impl State {
    pub(crate) fn new() -> State {
        State {
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
        *self = State::new();
    }

    fn replay(&self, dec: &Dec) -> Result<(NaturalGaussian, Vec<StepRecord>)> {
        let mut records = Vec::with_capacity(self.window.len());
        let mut cur: Option<(DVector<f64>, NaturalGaussian)> = None;
        for (idx, step) in self.window.iter().enumerate() {
            let (a_in, initial, frozen) = if idx == 0 {
                match &step.entry {
                    Some(a) => (a.clone(), false, true),
                    None => (dec.a_init.clone(), true, false),
                }
            } else {
                (cur.as_ref().unwrap().0.clone(), false, false)
            };
            let (a, ng, raw) = forward_step(dec, &a_in, &step.y)?;
            records.push(StepRecord {
                a_in,
                y: step.y.clone(),
                a_out: a.clone(),
                raw,
                initial,
                frozen,
            });
            cur = Some((a, ng));
        }
        let (_, marg) = cur.ok_or_else(|| Error::Config("empty replay window".into()))?;
        Ok((marg, records))
    }

    pub(crate) fn advance(
        &mut self,
        params: &VariationalParams,
        _mode: GradMode,
        t: usize,
        y: &DVector<f64>,
    ) -> Result<()> {
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
        self.carrier = Some(records.last().unwrap().a_out.clone());
        self.marg = Some(marg);
        self.records = records;

        self.pot = if t >= 1 {
            Some(Potential::MlpHead {
                mlp: dec.pot.clone(),
                params: dec.pot_params.clone(),
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

    pub(crate) fn potential_vjp(&self, x_t: &DVector<f64>, s: &DVector<f64>, out: &mut DVector<f64>) {
        let dec = self.dec.as_ref().expect("VJP before first advance");
        let d = dec.d_x;
        let s1 = DVector::from_fn(d, |i, _| s[i]);
        dec.pot.backward_into(
            &dec.pot_params,
            x_t,
            &s1,
            &mut out.as_mut_slice()[dec.r_pot.clone()],
            1.0,
        );
        let mut s2 = DMatrix::from_fn(d, d, |i, j| s[d + i * d + j]);
        linalg::symmetrize(&mut s2);
        let g_l = linalg::gram_grad_to_factor(&(-&s2), &dec.l_pot);
        linalg::accumulate_tril_grad(
            &dec.raw_l_pot,
            d,
            &g_l,
            &mut out.as_mut_slice()[dec.r_l_pot.clone()],
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
