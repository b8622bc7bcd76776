//! Recursive variational smoothing for state-space models.
//!
//! This crate estimates the evidence lower bound (ELBO) of a variational
//! smoothing distribution — and its gradient with respect to the variational
//! parameters — in a single forward pass over the observations. The
//! variational family factorizes backwards in time through Gaussian backward
//! kernels, which lets both quantities be carried along recursively by a
//! particle population instead of being recomputed from scratch per update.
//!
//! The main pieces:
//!
//! * [`models`] — the state-space models used as test beds: a linear-Gaussian
//!   model and a chaotic recurrent network with heavy-tailed observations.
//! * [`expfam`] — Gaussians in natural coordinates, the currency of the
//!   variational family.
//! * [`varfamily`] — the variational schemes (exact linear-Gaussian,
//!   conjugate amortized, MLP amortized, non-amortized per-step).
//! * [`elbo`] — the particle recursion: cloud initialization, full and
//!   backward-sampled propagation, and the gradient/ELBO finalizer.
//! * [`oracle`] — exact Kalman-based references used to validate the
//!   estimators.
//! * [`optim`] — gradient-ascent drivers (offline, recursive-epoch, online).
//! * [`harness`] — experiment configuration, metrics and output writers.

pub mod elbo;
pub mod error;
pub mod expfam;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod optim;
pub mod oracle;
mod par;
pub mod rngstreams;
pub mod varfamily;

pub use error::{Error, Result};
