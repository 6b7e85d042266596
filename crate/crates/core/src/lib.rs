//! Skill-conditioned search agent runtime and data pipeline.

pub mod environment;
pub mod evaluation;
pub mod fixtures;
pub mod packer;
pub mod prompt;
pub mod protocol;
pub mod rollout;
pub mod sampler;
pub mod skillbank;
pub mod trajectory;
