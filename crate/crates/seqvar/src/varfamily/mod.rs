//! The variational family: marginals `q_t^λ`, forward potentials `ψ_t^λ`,
//! the backward kernels they induce, and the parameter schemes that realize
//! them.
//!
//! A scheme turns the flat parameter vector λ into a sequence of Gaussian
//! marginals (one per assimilated observation) and potentials linking
//! consecutive times. All schemes share the same runtime interface
//! ([`VarFamily`]): advance one observation, expose the current and previous
//! marginals and the connecting potential, and answer vector-Jacobian
//! products against λ for the three places the gradient estimator needs
//! them — the current marginal, the previous marginal, and the potential.
//!
//! Gradients through the recursive state are truncated to a window of Δ
//! steps: each `advance` replays the last Δ assimilation steps from a frozen
//! carrier, so parameters only influence the marginal through that window.
//! This makes values and Jacobians mutually consistent also when λ drifts
//! between steps, as it does during online training.

mod amortized;
pub(crate) mod closed_form;
mod conjugate;
mod nonamortized;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{NaturalGaussian, NaturalIncrement};
use crate::linalg;
use crate::models::LgssmParams;
use crate::nn::Mlp;

pub use amortized::AmortizedState;

/// Which Jacobians the family maintains while advancing.
///
/// `Offline` differentiates the previous marginal inside the truncation
/// window (λ is constant over the sweep). `Online` treats everything carried
/// from step t−1 as a constant computed under the then-current λ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Offline,
    Online,
}

/// Structural description of a variational scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeSpec {
    /// Exact linear-Gaussian family: λ holds a full LGSSM parameter set and
    /// the marginals are its Kalman filter.
    LgssmClosedForm { d_x: usize, d_y: usize },
    /// Conjugate amortized scheme: a linear-Gaussian kernel `(Aᵠ, Qᵠ)` shared
    /// between prediction and potential, plus an observation-increment MLP.
    AmortizedConjugate {
        d_x: usize,
        d_y: usize,
        obs_hidden: Vec<usize>,
    },
    /// Fully amortized scheme: carrier recursion `a_t = MLP(a_{t−1}, y_t)`,
    /// marginal head `η_t = MLP(a_t)`, and a potential MLP in `x_t`.
    Amortized {
        d_x: usize,
        d_y: usize,
        d_a: usize,
        assim_hidden: Vec<usize>,
        head_hidden: Vec<usize>,
        pot_hidden: Vec<usize>,
    },
    /// Non-amortized scheme: independent `(η_t, ψ_t)` parameter slots per
    /// time step, allocated lazily as t grows.
    NonAmortized { d_x: usize, pot_hidden: Vec<usize> },
}

impl SchemeSpec {
    pub fn d_x(&self) -> usize {
        match self {
            SchemeSpec::LgssmClosedForm { d_x, .. }
            | SchemeSpec::AmortizedConjugate { d_x, .. }
            | SchemeSpec::Amortized { d_x, .. }
            | SchemeSpec::NonAmortized { d_x, .. } => *d_x,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchemeSpec::LgssmClosedForm { .. } => "lgssm_closed_form",
            SchemeSpec::AmortizedConjugate { .. } => "amortized_conjugate",
            SchemeSpec::Amortized { .. } => "amortized",
            SchemeSpec::NonAmortized { .. } => "non_amortized",
        }
    }
}

/// One named block of the flat λ vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Named partition of λ. Blocks are contiguous, ordered and exactly cover
/// the vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<LayoutBlock>,
}

impl Layout {
    pub(crate) fn builder() -> LayoutBuilder {
        LayoutBuilder {
            blocks: Vec::new(),
            cursor: 0,
        }
    }

    pub fn total_len(&self) -> usize {
        self.blocks.last().map(|b| b.offset + b.len).unwrap_or(0)
    }

    pub fn block(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.offset..b.offset + b.len)
    }

    /// Validates that the blocks tile `0..len` exactly.
    pub fn check_partitions(&self, len: usize) -> Result<()> {
        let mut cursor = 0;
        for b in &self.blocks {
            if b.offset != cursor {
                return Err(Error::Config(format!(
                    "layout block {} at offset {} leaves a gap (expected {})",
                    b.name, b.offset, cursor
                )));
            }
            cursor += b.len;
        }
        if cursor != len {
            return Err(Error::Config(format!(
                "layout covers {cursor} entries but λ has {len}"
            )));
        }
        Ok(())
    }
}

pub(crate) struct LayoutBuilder {
    blocks: Vec<LayoutBlock>,
    cursor: usize,
}

impl LayoutBuilder {
    pub(crate) fn push(&mut self, name: impl Into<String>, len: usize) -> std::ops::Range<usize> {
        let offset = self.cursor;
        self.blocks.push(LayoutBlock {
            name: name.into(),
            offset,
            len,
        });
        self.cursor += len;
        offset..offset + len
    }

    pub(crate) fn finish(self) -> Layout {
        Layout {
            blocks: self.blocks,
        }
    }
}

/// The full trainable state: scheme structure, flat λ, its layout, and the
/// truncation depth Δ.
#[derive(Clone, Debug)]
pub struct VariationalParams {
    pub scheme: SchemeSpec,
    pub lambda: DVector<f64>,
    pub layout: Layout,
    pub delta: usize,
    /// Seed for deterministic initialization of lazily-allocated parameter
    /// blocks (the non-amortized scheme grows λ as t advances).
    pub init_seed: u64,
}

impl VariationalParams {
    /// Builds a fresh parameter vector for `scheme` with a deterministic
    /// seeded initialization.
    pub fn init(scheme: SchemeSpec, delta: usize, seed: u64) -> Result<VariationalParams> {
        if delta == 0 {
            return Err(Error::Config("truncation depth Δ must be ≥ 1".into()));
        }
        let (lambda, layout) = match &scheme {
            SchemeSpec::LgssmClosedForm { d_x, d_y } => closed_form::init(*d_x, *d_y, seed),
            SchemeSpec::AmortizedConjugate {
                d_x,
                d_y,
                obs_hidden,
            } => conjugate::init(*d_x, *d_y, obs_hidden, seed),
            SchemeSpec::Amortized {
                d_x,
                d_y,
                d_a,
                assim_hidden,
                head_hidden,
                pot_hidden,
            } => amortized::init(*d_x, *d_y, *d_a, assim_hidden, head_hidden, pot_hidden, seed),
            SchemeSpec::NonAmortized { .. } => (DVector::zeros(0), Layout::default()),
        };
        let params = VariationalParams {
            scheme,
            lambda,
            layout,
            delta,
            init_seed: seed,
        };
        params.layout.check_partitions(params.lambda.len())?;
        Ok(params)
    }

    /// Closed-form scheme warm-started at a concrete LGSSM parameter set.
    pub fn from_lgssm(model: &LgssmParams, delta: usize) -> Result<VariationalParams> {
        let d_x = model.mu0().len();
        let d_y = model.b().nrows();
        let mut params = VariationalParams::init(
            SchemeSpec::LgssmClosedForm { d_x, d_y },
            delta,
            0,
        )?;
        closed_form::encode(model, &params.layout, &mut params.lambda)?;
        Ok(params)
    }

    pub fn dim_lambda(&self) -> usize {
        self.lambda.len()
    }

    pub fn block(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.layout.block(name)
    }
}

/// A forward potential `ψ(x_{t−1}, x_t) = exp(η̃(x_t) · T(x_{t−1}))`: a
/// natural-parameter increment whose first component may depend on `x_t`
/// while the quadratic component is constant and negative definite (or zero).
#[derive(Clone, Debug)]
pub enum Potential {
    /// `η̃ ≡ 0` — the uniform potential. The backward kernel collapses to
    /// `q_{t−1}`.
    Zero { eta2: DMatrix<f64> },
    /// `η̃₁(x_t) = G x_t` with constant `η̃₂` — the conjugate linear-Gaussian
    /// potential `G = AᵀQ⁻¹`, `η̃₂ = −½AᵀQ⁻¹A`.
    LinearGaussian {
        g: DMatrix<f64>,
        eta2: DMatrix<f64>,
    },
    /// `η̃₁(x_t) = MLP(x_t)` with constant parameterized `η̃₂ = −(L̃L̃ᵀ + εI)`.
    MlpHead {
        mlp: Mlp,
        params: Vec<f64>,
        eta2: DMatrix<f64>,
    },
}

impl Potential {
    pub fn zero(d: usize) -> Potential {
        Potential::Zero {
            eta2: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.eta2().nrows()
    }

    /// The constant quadratic block `η̃₂`.
    pub fn eta2(&self) -> &DMatrix<f64> {
        match self {
            Potential::Zero { eta2 }
            | Potential::LinearGaussian { eta2, .. }
            | Potential::MlpHead { eta2, .. } => eta2,
        }
    }

    /// `η̃₁(x_t)`.
    pub fn eta1_at(&self, x_t: &DVector<f64>) -> DVector<f64> {
        match self {
            Potential::Zero { eta2 } => DVector::zeros(eta2.nrows()),
            Potential::LinearGaussian { g, .. } => g * x_t,
            Potential::MlpHead { mlp, params, .. } => mlp.forward(params, x_t),
        }
    }

    /// The full increment `η̃(x_t)`.
    pub fn eval(&self, x_t: &DVector<f64>) -> NaturalIncrement {
        NaturalIncrement {
            eta1: self.eta1_at(x_t),
            eta2: self.eta2().clone(),
        }
    }

    /// `log ψ(x_prev, x_t) = η̃₁(x_t)ᵀ x_prev + x_prevᵀ η̃₂ x_prev`.
    pub fn log_value(&self, x_prev: &DVector<f64>, x_t: &DVector<f64>) -> f64 {
        self.eta1_at(x_t).dot(x_prev) + linalg::quad_form(self.eta2(), x_prev)
    }

    /// `log sup_{x_prev} ψ(x_prev, x_t)`, available in closed form at the
    /// Gaussian-potential mode `x* = (−2η̃₂)⁻¹ η̃₁`. A completely flat
    /// potential (both parameters zero) has supremum 1. Errors when `−2η̃₂`
    /// is singular with a non-zero linear term (the sup is then unattained);
    /// callers fall back to exact multinomial sampling.
    pub fn log_sup(&self, x_t: &DVector<f64>) -> Result<f64> {
        match self {
            Potential::Zero { .. } => Ok(0.0),
            _ => {
                let eta1 = self.eta1_at(x_t);
                let eta2 = self.eta2();
                if eta2.iter().all(|v| *v == 0.0) {
                    if eta1.iter().all(|v| *v == 0.0) {
                        return Ok(0.0);
                    }
                    return Err(Error::DegenerateKernel {
                        what: "flat potential curvature with a linear term".into(),
                    });
                }
                let prec = eta2 * (-2.0);
                let chol = linalg::spd_cholesky(&prec, "potential curvature")?;
                let z = linalg::solve_lower(&chol, &eta1);
                Ok(0.5 * z.norm_squared())
            }
        }
    }
}

/// The backward kernel `q_{t−1|t}(x_t, ·)`: the previous marginal multiplied
/// by the potential evaluated at `x_t`, renormalized — in natural
/// coordinates, parameter addition.
pub fn backward_kernel(
    q_prev: &NaturalGaussian,
    pot: &Potential,
    x_t: &DVector<f64>,
) -> Result<NaturalGaussian> {
    q_prev.add_natural(&pot.eval(x_t))
}

/// Conjugate assimilation step: moment prediction through `N(Aᵠx, Qᵠ)`
/// followed by the observation increment (Appendix-style natural update).
pub fn assimilate_conjugate(
    params: &VariationalParams,
    q_prev: &NaturalGaussian,
    y: &DVector<f64>,
) -> Result<NaturalGaussian> {
    conjugate::assimilate_conjugate(params, q_prev, y)
}

/// Amortized assimilation step: `a_t = MLP(a_{t−1}, y_t)`, `η_t = head(a_t)`.
pub fn assimilate(
    params: &VariationalParams,
    state: &AmortizedState,
    y: &DVector<f64>,
) -> Result<(AmortizedState, NaturalGaussian)> {
    amortized::assimilate(params, state, y)
}

/// The per-step `(η_t, ψ_t)` pair of the non-amortized scheme. The slot must
/// already exist in λ (the family allocates slots lazily as it advances).
pub fn nonamortized_slot(
    params: &VariationalParams,
    t: usize,
) -> Result<(NaturalGaussian, Potential)> {
    nonamortized::slot(params, t)
}

/// A marginal recomputed under an alternative λ together with its
/// vector-Jacobian product, used by the finalizer when the score must be
/// taken under the previous step's parameters.
pub struct ReplayedMarginal {
    pub marginal: NaturalGaussian,
    vjp: Box<dyn Fn(&DVector<f64>, &mut DVector<f64>) + Send + Sync>,
}

impl ReplayedMarginal {
    pub(crate) fn new(
        marginal: NaturalGaussian,
        vjp: Box<dyn Fn(&DVector<f64>, &mut DVector<f64>) + Send + Sync>,
    ) -> Self {
        ReplayedMarginal { marginal, vjp }
    }

    /// Accumulates `Jᵀ s` into `out`, where `J = ∂η/∂λ` at the replayed λ.
    pub fn vjp(&self, s: &DVector<f64>, out: &mut DVector<f64>) {
        (self.vjp)(s, out)
    }
}

/// Runtime dispatch over the scheme implementations.
enum SchemeState {
    ClosedForm(closed_form::State),
    Conjugate(conjugate::State),
    Amortized(amortized::State),
    NonAmortized(nonamortized::State),
}

/// A variational family being advanced over a sequence.
///
/// Owns its [`VariationalParams`]; optimizers mutate λ in place between
/// steps via [`VarFamily::lambda_mut`]. The family snapshots λ at each
/// `advance`, so the finalizer can evaluate scores under the previous step's
/// parameters without the driver threading them through.
pub struct VarFamily {
    params: VariationalParams,
    mode: GradMode,
    state: SchemeState,
    t: Option<usize>,
    /// λ as of the previous `advance` (before the current one).
    lambda_prev: Option<DVector<f64>>,
    /// λ used by the most recent `advance`.
    lambda_current: Option<DVector<f64>>,
}

impl VarFamily {
    pub fn new(params: VariationalParams, mode: GradMode) -> Result<VarFamily> {
        if params.delta == 0 {
            return Err(Error::Config("truncation depth Δ must be ≥ 1".into()));
        }
        params.layout.check_partitions(params.lambda.len())?;
        let state = match &params.scheme {
            SchemeSpec::LgssmClosedForm { d_x, d_y } => {
                SchemeState::ClosedForm(closed_form::State::new(*d_x, *d_y))
            }
            SchemeSpec::AmortizedConjugate { d_x, d_y, .. } => {
                SchemeState::Conjugate(conjugate::State::new(*d_x, *d_y))
            }
            SchemeSpec::Amortized { .. } => SchemeState::Amortized(amortized::State::new()),
            SchemeSpec::NonAmortized { .. } => {
                SchemeState::NonAmortized(nonamortized::State::new())
            }
        };
        Ok(VarFamily {
            params,
            mode,
            state,
            t: None,
            lambda_prev: None,
            lambda_current: None,
        })
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn params(&self) -> &VariationalParams {
        &self.params
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.params.lambda
    }

    /// Mutable access for optimizer updates between steps.
    pub fn lambda_mut(&mut self) -> &mut DVector<f64> {
        &mut self.params.lambda
    }

    pub fn dim_lambda(&self) -> usize {
        self.params.lambda.len()
    }

    pub fn delta(&self) -> usize {
        self.params.delta
    }

    /// Current time index; `None` before the first `advance`.
    pub fn t(&self) -> Option<usize> {
        self.t
    }

    /// Clears all sweep state (carriers, windows, time index) while keeping
    /// λ. Call at the start of each epoch.
    pub fn reset(&mut self) {
        match &mut self.state {
            SchemeState::ClosedForm(s) => s.reset(),
            SchemeState::Conjugate(s) => s.reset(),
            SchemeState::Amortized(s) => s.reset(),
            SchemeState::NonAmortized(s) => s.reset(),
        }
        self.t = None;
        self.lambda_prev = None;
        self.lambda_current = None;
    }

    /// Assimilates the next observation, producing the marginal `q_t^λ` (and
    /// for t ≥ 1 the potential linking t−1 to t) under the current λ.
    pub fn advance(&mut self, y: &DVector<f64>) -> Result<()> {
        let t = self.t.map(|t| t + 1).unwrap_or(0);
        self.lambda_prev = self.lambda_current.take();
        self.lambda_current = Some(self.params.lambda.clone());
        // Non-amortized λ grows lazily; allocate slot t before decoding.
        if let SchemeState::NonAmortized(_) = self.state {
            nonamortized::ensure_slot(&mut self.params, t)?;
            self.lambda_current = Some(self.params.lambda.clone());
            if t == 0 {
                self.lambda_prev = None;
            } else if let Some(prev) = &mut self.lambda_prev {
                // The snapshot predates the new slot; extend it with the
                // slot's initial values so replays line up dimensionally.
                let cur = &self.params.lambda;
                if prev.len() < cur.len() {
                    let mut ext = DVector::zeros(cur.len());
                    ext.rows_mut(0, prev.len()).copy_from(prev);
                    ext.rows_mut(prev.len(), cur.len() - prev.len())
                        .copy_from(&cur.rows(prev.len(), cur.len() - prev.len()));
                    *prev = ext;
                }
            }
        }
        let params = &self.params;
        let mode = self.mode;
        match &mut self.state {
            SchemeState::ClosedForm(s) => s.advance(params, mode, t, y)?,
            SchemeState::Conjugate(s) => s.advance(params, mode, t, y)?,
            SchemeState::Amortized(s) => s.advance(params, mode, t, y)?,
            SchemeState::NonAmortized(s) => s.advance(params, mode, t, y)?,
        }
        self.t = Some(t);
        Ok(())
    }

    /// The marginal `q_t^λ` after the latest `advance`.
    pub fn marginal(&self) -> &NaturalGaussian {
        match &self.state {
            SchemeState::ClosedForm(s) => s.marginal(),
            SchemeState::Conjugate(s) => s.marginal(),
            SchemeState::Amortized(s) => s.marginal(),
            SchemeState::NonAmortized(s) => s.marginal(),
        }
    }

    /// The marginal `q_{t−1}` as published at the previous step.
    pub fn prev_marginal(&self) -> &NaturalGaussian {
        match &self.state {
            SchemeState::ClosedForm(s) => s.prev_marginal(),
            SchemeState::Conjugate(s) => s.prev_marginal(),
            SchemeState::Amortized(s) => s.prev_marginal(),
            SchemeState::NonAmortized(s) => s.prev_marginal(),
        }
    }

    /// The potential `ψ_t` between t−1 and t (t ≥ 1).
    pub fn potential(&self) -> &Potential {
        match &self.state {
            SchemeState::ClosedForm(s) => s.potential(),
            SchemeState::Conjugate(s) => s.potential(),
            SchemeState::Amortized(s) => s.potential(),
            SchemeState::NonAmortized(s) => s.potential(),
        }
    }

    /// Accumulates `J_tᵀ s` into `out`, where `J_t = ∂η_t/∂λ` under the
    /// current λ (truncated to the window).
    pub fn marginal_score_vjp(&self, s: &DVector<f64>, out: &mut DVector<f64>) {
        match &self.state {
            SchemeState::ClosedForm(st) => st.marginal_vjp(s, out),
            SchemeState::Conjugate(st) => st.marginal_vjp(s, out),
            SchemeState::Amortized(st) => st.marginal_vjp(s, out),
            SchemeState::NonAmortized(st) => st.marginal_vjp(s, out),
        }
    }

    /// Accumulates `J_{t−1}ᵀ s` into `out`. In online mode the previous
    /// marginal is a constant carried from the last step, so this is a no-op.
    pub fn prev_marginal_score_vjp(&self, s: &DVector<f64>, out: &mut DVector<f64>) {
        if self.mode == GradMode::Online {
            return;
        }
        match &self.state {
            SchemeState::ClosedForm(st) => st.prev_marginal_vjp(s, out),
            SchemeState::Conjugate(st) => st.prev_marginal_vjp(s, out),
            SchemeState::Amortized(st) => st.prev_marginal_vjp(s, out),
            SchemeState::NonAmortized(st) => st.prev_marginal_vjp(s, out),
        }
    }

    /// Accumulates `J̃(x_t)ᵀ s` into `out`, where `J̃ = ∂η̃(x_t)/∂λ` for the
    /// current potential.
    pub fn potential_score_vjp(&self, x_t: &DVector<f64>, s: &DVector<f64>, out: &mut DVector<f64>) {
        match &self.state {
            SchemeState::ClosedForm(st) => st.potential_vjp(x_t, s, out),
            SchemeState::Conjugate(st) => st.potential_vjp(x_t, s, out),
            SchemeState::Amortized(st) => st.potential_vjp(x_t, s, out),
            SchemeState::NonAmortized(st) => st.potential_vjp(x_t, s, out),
        }
    }

    /// Recomputes `q_t` and its Jacobian under the λ snapshot from the
    /// previous `advance`. Falls back to the current λ at t = 0 (there is no
    /// previous step yet).
    pub fn replay_marginal_prev_lambda(&self) -> Result<ReplayedMarginal> {
        let lambda = self
            .lambda_prev
            .as_ref()
            .or(self.lambda_current.as_ref())
            .ok_or_else(|| Error::Config("replay requested before any advance".into()))?;
        match &self.state {
            SchemeState::ClosedForm(st) => st.replay_marginal(&self.params, lambda),
            SchemeState::Conjugate(st) => st.replay_marginal(&self.params, lambda),
            SchemeState::Amortized(st) => st.replay_marginal(&self.params, lambda),
            SchemeState::NonAmortized(st) => st.replay_marginal(&self.params, lambda),
        }
    }

    /// Whether per-particle G statistics are carried across steps. The
    /// non-amortized scheme drops G propagation: parameters are per-step, so
    /// gradients from earlier steps never flow into later slots.
    pub fn propagates_g(&self) -> bool {
        !matches!(self.state, SchemeState::NonAmortized(_))
    }

    /// λ range the current step's gradients are confined to (`None` = all of
    /// λ). Only the non-amortized scheme masks.
    pub fn active_block(&self) -> Option<std::ops::Range<usize>> {
        match &self.state {
            SchemeState::NonAmortized(st) => Some(st.active_range()),
            _ => None,
        }
    }

    /// For schemes whose potential is linear in `x_t`, the backward kernel
    /// at the current step is affine-Gaussian: returns `(F, f, S)` with
    /// `q_{t−1|t}(x_t, ·) = N(F x_t + f, S)`. `None` for MLP potentials.
    pub fn linear_backward_kernel(&self) -> Result<Option<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)>> {
        let pot = self.potential();
        let g = match pot {
            Potential::LinearGaussian { g, .. } => g.clone(),
            Potential::Zero { eta2 } => DMatrix::zeros(eta2.nrows(), eta2.nrows()),
            Potential::MlpHead { .. } => return Ok(None),
        };
        let prev = self.prev_marginal();
        let prec = prev.eta2() * (-2.0) + pot.eta2() * (-2.0);
        let s = linalg::spd_inverse(&prec, "backward-kernel precision")?;
        let f_mat = &s * g;
        let f_vec = &s * prev.eta1();
        Ok(Some((f_mat, f_vec, s)))
    }
}
