//! Reliability coding for agent outputs: diversity combining,
//! retransmission, rateless sampling, parity checks and adaptive routing
//! over stochastic LLM channels.

pub mod channel;
pub mod diversity;
pub mod error;
pub mod fec;
pub mod harness;
pub mod metrics;
pub mod parse;
pub mod prompts;
pub mod rateless;
pub mod record;
pub mod retransmit;
pub mod routing;
pub mod scoring;
pub mod seed;
pub mod task;
pub mod technique;
pub mod theory;

pub use error::{Error, Result};
