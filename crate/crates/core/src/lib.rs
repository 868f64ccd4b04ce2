//! Desk-scale laboratory for user-oriented exploration in session-based
//! recommendation: an implicit-quantile critic, a population of actors that
//! each optimize a different lower tail (CVaR) of the return distribution,
//! diversity and stability regularizers arbitrated by a two-armed Thompson
//! bandit, and a simulated recommendation environment to train them in.
//!
//! Module map:
//!
//! - [`nn`]: fixed-topology MLPs with reverse-mode gradients, Adam, soft updates.
//! - [`env`]: synthetic user population, session mechanics, interaction-log fitting.
//! - [`replay`]: the shared replay buffer.
//! - [`critic`]: distributional critic, quantile Huber loss, CVaR estimators.
//! - [`population`]: actors, quantile decay, behavior embeddings, regularizers.
//! - [`bandit`]: stability/diversity arbitration.
//! - [`trainer`]: training loop, critic-trusted inference, evaluation, ablations.
//! - [`metrics`]: CVaR, ATR, Gini, coverage, intra-list similarity.
//! - [`cli`]: experiment configuration, subcommands and result files.

pub mod bandit;
pub mod cli;
pub mod critic;
pub mod env;
mod error;
pub mod metrics;
pub mod nn;
pub mod population;
pub mod replay;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
