//! Multi-level residual policy ensembles for discrete-action reinforcement
//! learning.
//!
//! The core object is a [`model::PrrModel`]: an ordered stack of small policy
//! networks ("modules"), each trained on a masked subset of tasks while every
//! earlier module stays frozen. Module logits are combined by a learned
//! simplex weight vector and pushed through a softmax, so each module acts as
//! an additive residual on the composed policy's action preferences.
//!
//! The crate ships everything needed to train and study such ensembles at
//! desk scale:
//!
//! - [`nn`] — dense MLP forward/backward passes and Adam, in plain `f64`.
//! - [`env`] — the FetchTheKey key-door grid-world family behind a uniform
//!   [`env::Environment`] trait, with reward scaling and a breadth-first
//!   scripted reference policy.
//! - [`masks`] — binary task masks and the schedules (two-level and
//!   Walsh-derived) that drive top-down training.
//! - [`model`] — the ensemble itself: composition, weight simplex
//!   maintenance, freeze control, and a bit-exact binary model format.
//! - [`ppo`] — clipped-surrogate PPO with generalized advantage estimation.
//! - [`train`] — the training orchestrations: per-module phases, multi-phase
//!   acquisition, new-task reuse, weights-only transfer, and a single-module
//!   fine-tuning baseline.
//! - [`harness`] — experiment configs, presets, multi-seed runs, CSV logs,
//!   curve aggregation, and SVG charts.
//!
//! Everything is deterministic given the configured seeds; repeated runs
//! reproduce logs byte for byte. See the `examples/` directory for runnable
//! entry points covering each capability, and the `prr` binary for the
//! command-line harness.

pub mod env;
pub mod error;
pub mod harness;
pub mod masks;
pub mod model;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
