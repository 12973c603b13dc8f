//! Observation-space attacks on constrained reinforcement-learning policies.
//!
//! The attacker never touches the victim's parameters: it learns a constraint
//! network and a surrogate learner policy from demonstrations plus black-box
//! interaction, fits a one-step dynamics model, and then crafts bounded
//! observation perturbations that push the victim toward constraint
//! violations. Gradient-based baselines that do read the victim's critics
//! are included for comparison, along with Lipschitz-based bounds on how much
//! a perturbation budget can raise the episodic cost.

// `!(x <= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod bounds;
pub mod chart;
pub mod cli;
pub mod envs;
pub mod error;
pub mod expert;
pub mod icrl;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod sysid;

pub use error::{Error, Result};
