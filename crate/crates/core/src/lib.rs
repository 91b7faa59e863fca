//! Offline semi-supervised reinforcement learning with semi-pessimistic
//! pseudo labels: reward uncertainty quantification from labeled and
//! unlabeled transitions, pessimistic reward imputation, planners,
//! baselines, environments and an experiment harness.

pub mod error;
pub mod rng;

pub mod baselines;
pub mod environments;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod mdp;
pub mod policy_learning;
pub mod reward_uq;

pub use error::{Result, SplError};
