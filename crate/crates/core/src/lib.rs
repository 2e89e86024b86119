//! Contrastive sub-trajectory sharing across tasks followed by model-based
//! offline RL in a discriminator-gated learned MDP, on a synthetic multi-task
//! grid city.

pub mod contrastive;
pub mod datasets;
pub mod gridsim;
pub mod harness;
pub mod nnkit;
pub mod rng;
pub mod sac;
pub mod worldmodel;
