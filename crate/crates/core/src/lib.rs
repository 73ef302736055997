//! Rainbow: a value-based agent combining double Q-learning, prioritized
//! replay, dueling networks, multi-step targets, distributional value
//! learning and noisy-network exploration, together with small exact MDPs
//! to check it against and an ablation harness.

pub mod agent;
pub mod distributional;
pub mod envs;
pub mod error;
pub mod harness;
pub mod network;
pub mod replay;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/environments.md")]
    struct Environments;
    #[doc = include_str!("../../../book/src/distributional.md")]
    struct Distributional;
    #[doc = include_str!("../../../book/src/replay.md")]
    struct Replay;
    #[doc = include_str!("../../../book/src/network.md")]
    struct Network;
    #[doc = include_str!("../../../book/src/agent.md")]
    struct Agent;
    #[doc = include_str!("../../../book/src/harness.md")]
    struct Harness;
}
