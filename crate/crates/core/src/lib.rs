//! A desk-scale laboratory for consensus aggregation in trust-region policy
//! optimization.
//!
//! The crate trains diagonal-Gaussian policies on two built-in deterministic
//! control tasks with PPO and TRPO, fans a shared on-policy batch out to `K`
//! PPO replicas that differ only in minibatch shuffle order, and aggregates
//! the replicas into a consensus policy either by parameter averaging or by
//! the logarithmic opinion pool (precision-weighted fusion in natural
//! parameter space, distilled back into a single network under a trust-region
//! line search).
//!
//! Everything is built for exactness and reproducibility rather than scale:
//! 64-bit floats throughout, a hand-written reverse-mode MLP core, analytic
//! Fisher-vector products, and seeded RNG sub-streams so that identical
//! configurations produce byte-identical output artifacts.
//!
//! Module map:
//!
//! - [`nn`]: MLP forward/backward, orthogonal init, Adam, flat parameter
//!   vectors with binary/JSON snapshots.
//! - [`policy`]: diagonal-Gaussian policy, analytic KL/entropy, natural
//!   parameters.
//! - [`envs`]: point-mass and pendulum swing-up tasks plus a vectorized
//!   auto-resetting wrapper.
//! - [`rollout`]: batch collection, GAE, advantage normalization, value fits.
//! - [`optim`]: PPO (clipped surrogate) and TRPO (CG + line search) updates.
//! - [`fisher`]: natural-gradient direction and the signal/waste
//!   decomposition of updates, with cross-expert diagnostics.
//! - [`consensus`]: expert fan-out, the two aggregation operators, optimizer
//!   state carry rules, and compute-matched baselines.
//! - [`oracle`]: closed-form exponential-family checks certifying the
//!   consensus-improvement properties.
//! - [`harness`]: experiment configs, training loops for all methods,
//!   sweeps, and CSV/JSONL emission.

pub mod consensus;
pub mod envs;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod rollout;

pub use error::{Error, Result};
