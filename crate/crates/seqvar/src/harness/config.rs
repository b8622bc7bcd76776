//! The versioned JSON experiment configuration and its realization into
//! concrete models and variational families.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ChaoticRnnParams, LgssmParams, SsmModel};
use crate::optim::{Driver, StepSchedule};
use crate::varfamily::SchemeSpec;

/// The config format version this build reads.
pub const CONFIG_SCHEMA: u32 = 1;

fn default_m() -> usize {
    2
}

fn default_epochs() -> usize {
    1
}

fn default_clip() -> Option<f64> {
    Some(10.0)
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a run needs, as parsed from `--config <json>`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must equal [`CONFIG_SCHEMA`].
    pub schema: u32,
    pub model: ModelSpec,
    pub scheme: SchemeSpec,
    pub mode: RunMode,
    /// Particle count N.
    pub n: usize,
    /// Backward-sample count M (used by `backward-sampled` propagation).
    #[serde(default = "default_m")]
    pub m: usize,
    /// Truncation depth Δ of the amortization window.
    pub delta: usize,
    /// Horizon T: sequences hold T+1 time points.
    pub t_len: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub propagation: Propagation,
    /// Required for the training modes; ignored by `oracle`/`backward-mc`.
    #[serde(default)]
    pub schedule: Option<StepSchedule>,
    /// Global-norm gradient clip; `null` disables.
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub init: InitSpec,
    /// Load observations from this trajectory CSV instead of simulating.
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Post-training evaluation block.
    #[serde(default)]
    pub eval: Option<EvalSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Offline,
    RecursiveEpoch,
    Online,
    Oracle,
    BackwardMc,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Offline => "offline",
            RunMode::RecursiveEpoch => "recursive-epoch",
            RunMode::Online => "online",
            RunMode::Oracle => "oracle",
            RunMode::BackwardMc => "backward-mc",
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(
            self,
            RunMode::Offline | RunMode::RecursiveEpoch | RunMode::Online
        )
    }
}

/// How each propagation step evaluates the backward sums.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propagation {
    /// Exact O(N²) self-normalized sums.
    #[default]
    Full,
    /// M rejection-sampled ancestor indices per particle.
    BackwardSampled,
}

/// Master seeds for the independent randomness sources of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Trajectory simulation (and random model draws).
    pub data: u64,
    /// Particle and ancestor-index streams.
    pub particles: u64,
    /// Variational parameter initialization.
    pub init: u64,
}

impl Default for Seeds {
    fn default() -> Seeds {
        Seeds {
            data: 1,
            particles: 2,
            init: 3,
        }
    }
}

/// How λ starts out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitSpec {
    /// Seeded random initialization (`seeds.init`).
    #[default]
    Random,
    /// Closed-form scheme encoded at the true LGSSM parameters — the exact
    /// posterior family, used by oracle self-checks.
    WarmStart,
}

/// Post-training evaluation: metrics on the training sequence always run;
/// `fresh_sequences > 0` additionally scores the frozen λ on newly simulated
/// data (the streaming-generalization protocol).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default)]
    pub fresh_sequences: usize,
    /// Particle count for evaluation passes; defaults to the training N.
    #[serde(default)]
    pub n: Option<usize>,
    /// Horizon of fresh sequences; defaults to the training T.
    #[serde(default)]
    pub t_len: Option<usize>,
}

/// Model specification: explicit parameters, or a seeded random instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Lgssm {
        #[serde(default)]
        params: Option<LgssmDto>,
        #[serde(default)]
        d_x: Option<usize>,
        #[serde(default)]
        d_y: Option<usize>,
        /// Seed for `random_stable` when `params` is absent; defaults to
        /// `seeds.data`.
        #[serde(default)]
        seed: Option<u64>,
    },
    ChaoticRnn {
        #[serde(default)]
        params: Option<ChaoticRnnDto>,
        #[serde(default)]
        d_x: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

/// Explicit LGSSM parameters with row-major matrices and explicit dims.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgssmDto {
    pub d_x: usize,
    pub d_y: usize,
    pub mu0: Vec<f64>,
    pub q0: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
}

impl LgssmDto {
    pub fn to_params(&self) -> Result<LgssmParams> {
        let (d_x, d_y) = (self.d_x, self.d_y);
        LgssmParams::new(
            vec_to_vector(&self.mu0, d_x, "mu0")?,
            rows_to_matrix(&self.q0, d_x, d_x, "q0")?,
            rows_to_matrix(&self.a, d_x, d_x, "a")?,
            rows_to_matrix(&self.b, d_y, d_x, "b")?,
            rows_to_matrix(&self.q, d_x, d_x, "q")?,
            rows_to_matrix(&self.r, d_y, d_y, "r")?,
        )
    }

    pub fn from_params(p: &LgssmParams) -> LgssmDto {
        LgssmDto {
            d_x: p.mu0().len(),
            d_y: p.b().nrows(),
            mu0: p.mu0().iter().copied().collect(),
            q0: matrix_to_rows(p.q0()),
            a: matrix_to_rows(p.a()),
            b: matrix_to_rows(p.b()),
            q: matrix_to_rows(p.q()),
            r: matrix_to_rows(p.r()),
        }
    }
}

/// Explicit chaotic-RNN parameters, row-major `w` and `q`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaoticRnnDto {
    pub d_x: usize,
    pub w: Vec<f64>,
    pub step: f64,
    pub tau: f64,
    pub gain: f64,
    pub q: Vec<f64>,
    pub student_dof: f64,
    pub student_scale: f64,
}

impl ChaoticRnnDto {
    pub fn to_params(&self) -> Result<ChaoticRnnParams> {
        let d = self.d_x;
        ChaoticRnnParams::new(
            rows_to_matrix(&self.w, d, d, "w")?,
            self.step,
            self.tau,
            self.gain,
            rows_to_matrix(&self.q, d, d, "q")?,
            self.student_dof,
            self.student_scale,
        )
    }

    pub fn from_params(p: &ChaoticRnnParams) -> ChaoticRnnDto {
        ChaoticRnnDto {
            d_x: p.w.nrows(),
            w: matrix_to_rows(&p.w),
            step: p.step,
            tau: p.tau,
            gain: p.gain,
            q: matrix_to_rows(p.q()),
            student_dof: p.student_dof,
            student_scale: p.student_scale,
        }
    }
}

fn vec_to_vector(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::Dimension {
            what: format!("model parameter {what}"),
            expected: len,
            got: v.len(),
        });
    }
    Ok(DVector::from_row_slice(v))
}

fn rows_to_matrix(v: &[f64], rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Dimension {
            what: format!("model parameter {what} (row-major)"),
            expected: rows * cols,
            got: v.len(),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// A realized generative model.
pub enum BuiltModel {
    Lgssm(LgssmParams),
    ChaoticRnn(ChaoticRnnParams),
}

impl BuiltModel {
    pub fn as_ssm(&self) -> &dyn SsmModel {
        match self {
            BuiltModel::Lgssm(p) => p,
            BuiltModel::ChaoticRnn(p) => p,
        }
    }

    pub fn as_lgssm(&self) -> Option<&LgssmParams> {
        match self {
            BuiltModel::Lgssm(p) => Some(p),
            BuiltModel::ChaoticRnn(_) => None,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, default_seed: u64) -> Result<BuiltModel> {
        match self {
            ModelSpec::Lgssm {
                params: Some(dto), ..
            } => Ok(BuiltModel::Lgssm(dto.to_params()?)),
            ModelSpec::Lgssm {
                params: None,
                d_x,
                d_y,
                seed,
            } => {
                let d_x = d_x
                    .ok_or_else(|| Error::Config("lgssm without params needs d_x".into()))?;
                let d_y = d_y.unwrap_or(d_x);
                Ok(BuiltModel::Lgssm(LgssmParams::random_stable(
                    d_x,
                    d_y,
                    seed.unwrap_or(default_seed),
                )))
            }
            ModelSpec::ChaoticRnn {
                params: Some(dto), ..
            } => Ok(BuiltModel::ChaoticRnn(dto.to_params()?)),
            ModelSpec::ChaoticRnn {
                params: None,
                d_x,
                seed,
            } => {
                let d_x = d_x
                    .ok_or_else(|| Error::Config("chaotic_rnn without params needs d_x".into()))?;
                Ok(BuiltModel::ChaoticRnn(ChaoticRnnParams::standard(
                    d_x,
                    seed.unwrap_or(default_seed),
                )))
            }
        }
    }

    /// Dimensions `(d_x, d_y)` implied by the spec, for cross-validation
    /// against the scheme.
    pub fn dims(&self) -> Result<(usize, usize)> {
        match self {
            ModelSpec::Lgssm {
                params: Some(dto), ..
            } => Ok((dto.d_x, dto.d_y)),
            ModelSpec::Lgssm { params: None, d_x, d_y, .. } => {
                let d_x =
                    d_x.ok_or_else(|| Error::Config("lgssm without params needs d_x".into()))?;
                Ok((d_x, d_y.unwrap_or(d_x)))
            }
            ModelSpec::ChaoticRnn {
                params: Some(dto), ..
            } => Ok((dto.d_x, dto.d_x)),
            ModelSpec::ChaoticRnn { params: None, d_x, .. } => {
                let d_x = d_x
                    .ok_or_else(|| Error::Config("chaotic_rnn without params needs d_x".into()))?;
                Ok((d_x, d_x))
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_json(&text)
    }

    /// Deserializes without mode-specific validation — for consumers that
    /// only use the data section (model, horizon, seeds).
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        if cfg.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "config schema {} not supported (this build reads {CONFIG_SCHEMA})",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "config schema {} not supported (this build reads {CONFIG_SCHEMA})",
                self.schema
            )));
        }
        if self.n < 1 {
            return Err(Error::Config("particle count n must be ≥ 1".into()));
        }
        if self.m < 1 {
            return Err(Error::Config("backward-sample count m must be ≥ 1".into()));
        }
        if self.delta < 1 {
            return Err(Error::Config("truncation depth delta must be ≥ 1".into()));
        }
        if self.t_len < 1 {
            return Err(Error::Config("horizon t_len must be ≥ 1".into()));
        }
        let (d_x, _) = self.model.dims()?;
        if self.scheme.d_x() != d_x {
            return Err(Error::Config(format!(
                "scheme state dimension {} does not match the model's {d_x}",
                self.scheme.d_x()
            )));
        }
        if self.mode.is_training() {
            let schedule = self
                .schedule
                .as_ref()
                .ok_or_else(|| Error::Config("training modes need a schedule".into()))?;
            schedule.validate()?;
            if self.epochs < 1 {
                return Err(Error::Config("epochs must be ≥ 1".into()));
            }
            if self.mode == RunMode::Online && self.epochs != 1 {
                return Err(Error::Config("online mode is single-pass; epochs must be 1".into()));
            }
            if matches!(self.scheme, SchemeSpec::NonAmortized { .. })
                && self.mode == RunMode::Offline
            {
                return Err(Error::Config(
                    "the non-amortized scheme trains per step; use recursive-epoch or online mode"
                        .into(),
                ));
            }
        } else {
            if self.model.dims()?.0 != self.scheme.d_x() {
                return Err(Error::Config("oracle modes need matching dimensions".into()));
            }
            if !matches!(self.scheme, SchemeSpec::LgssmClosedForm { .. })
                || !matches!(self.model, ModelSpec::Lgssm { .. })
            {
                return Err(Error::Config(
                    "oracle and backward-mc modes require an LGSSM model with the closed-form scheme"
                        .into(),
                ));
            }
        }
        if self.init == InitSpec::WarmStart
            && !(matches!(self.scheme, SchemeSpec::LgssmClosedForm { .. })
                && matches!(self.model, ModelSpec::Lgssm { .. }))
        {
            return Err(Error::Config(
                "warm-start init requires an LGSSM model with the closed-form scheme".into(),
            ));
        }
        if let Some(eval) = &self.eval {
            if eval.fresh_sequences > 0
                && matches!(self.scheme, SchemeSpec::NonAmortized { .. })
            {
                return Err(Error::Config(
                    "the non-amortized scheme is tied to one sequence; fresh-sequence \
                     evaluation is undefined"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    /// Checks that everything the run will touch on disk actually exists.
    pub fn check_references(&self) -> Result<()> {
        if let Some(path) = &self.data_path {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "data_path {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// The optimizer this config describes.
    pub fn driver(&self) -> Result<Driver> {
        let schedule = self
            .schedule
            .clone()
            .ok_or_else(|| Error::Config("training modes need a schedule".into()))?;
        Ok(Driver::new(schedule, self.clip))
    }
}
