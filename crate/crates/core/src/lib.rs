//! Tabular POMDPs with windowed agent states, exact dynamic-programming
//! oracles for privileged and symmetric critics, and a small f64 neural
//! stack for advantage-weighted regression.
//!
//! The crate is organized bottom-up:
//!
//! - [`pomdp`]: finite POMDP specs, the sliding-window agent state, the
//!   joint environment/agent-state MDP, and an episode simulator.
//! - [`envs`]: a catalog of small diagnostic environments with privileged
//!   observation maps and scripted demonstration policies.
//! - [`oracle`]: exact policy evaluation, discounted visitation, symmetric
//!   value reductions, TD fixed points, and closed-form policy updates.
//! - [`nn`], [`losses`]: a dense MLP with reverse-mode gradients, Adam, and
//!   the critic/actor losses used by the trainer.
//! - [`trainer`]: replay buffers, offline/online training phases, and
//!   evaluation with strict privileged-input isolation.
//! - [`verify`]: a self-checking report that runs the analytical witnesses
//!   and invariants end to end.

pub mod check;
pub mod envs;
pub mod error;
pub mod losses;
pub mod nn;
pub mod oracle;
pub mod pomdp;
pub mod seeds;
pub mod trainer;
pub mod verify;

pub use error::{CoreError, Result};
