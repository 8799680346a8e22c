//! Self-rewarding sequential Monte Carlo (SR-SMC) decoding for masked
//! diffusion language models.
//!
//! The engine decodes by running `N` particles — independent reverse
//! diffusion processes — and treating each particle's trajectory-level
//! confidence (the product of the model probabilities of every token it has
//! committed to) as its importance weight. Low-confidence trajectories are
//! culled by ESS-adaptive resampling; the final output is the
//! highest-weight particle. No external reward model is involved: the
//! signal is the model's own confidence, read off the drafts it already
//! produces.
//!
//! Module map:
//! - [`core`]: vocab/sequence types, noise schedule, forward masking.
//! - [`model`]: the predictive-model abstraction `p(x0 | xt)` with an
//!   exact-Bayes tabular backend over a known Markov chain and a remote
//!   wire-protocol client.
//! - [`kernel`]: the reverse transition kernel — draft sampling, confidence,
//!   remasking selection, and the step potential.
//! - [`smc`]: the particle system — weights, ESS, resampling, the
//!   propagate/re-weight loop, final selection.
//! - [`pipeline`]: block-wise semi-autoregressive generation, overtake
//!   analysis, metrics, trace persistence.
//! - [`oracle`]: brute-force trajectory enumeration, exact path measures and
//!   normalizer, ratio-form weights — the ground truth the test suite leans
//!   on.
//! - [`config`] / [`runner`]: run configuration and the subcommand
//!   implementations behind the `srsmc` binary.

pub mod config;
pub mod core;
pub mod error;
pub mod kernel;
pub mod model;
mod numeric;
pub mod oracle;
pub mod pipeline;
pub mod runner;
pub mod smc;

pub use error::{Error, Result};
