//! Reward design and gradient-direction diagnostics for critic-free policy
//! gradient (GRPO / RLOO) on code generation, using an exact tabular policy
//! over enumerable candidate programs.
//!
//! The modules follow the pipeline:
//!
//! * [`corpus`]: tasks, candidate tables with pass vectors and mode labels, generators.
//! * [`policy`]: order-1 autoregressive softmax policy with exact log-probs and gradients.
//! * [`reward`]: binary, pass-rate, reweighted and two-stage rewards; difficulty labeling.
//! * [`estimator`]: group advantages.
//! * [`trainer`]: strict on-policy training loop.
//! * [`probe`]: group- and sample-level probes, conflict statistics.
//! * [`metrics`]: pass@k, reward density, solvability overlap.
//! * [`harness`]: runs real programs against stdin/stdout tests.
//! * [`config`] and [`commands`]: experiment configuration and the CLI subcommands.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod probe;
pub mod report;
pub mod reward;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
