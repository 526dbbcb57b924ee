//! Gaussian-process versus latent-neural-process predictive gap: exact GP
//! inference, Mercer spectra, the analytical LNP, amortization-gap estimators,
//! a small trainable LNP and the experiments built on them.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amortization;
pub mod error;
pub mod experiments;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod lnp_analytic;
pub mod mercer;
pub mod nn;
pub mod par;
pub mod report;

pub use error::{Error, Result};
pub use gp::{gp_posterior, ContextSet, GaussianPredictive};
pub use kernel::{Covariance, KernelSpec, NoiseModel};
pub use lnp_analytic::{AggregationMode, LatentGaussian};
pub use mercer::MercerBasis;
