//! Closed-loop motion-token planning testbed.
//!
//! A planner proposes discrete motion tokens, a learned collision critic
//! scores each proposal, and rejected proposals accumulate in a correction
//! trace that conditions the next proposal. Training is imitation learning
//! followed by REINFORCE against a frozen learned world model; evaluation
//! runs closed-loop on synthetic conflict scenarios and reports collision,
//! off-road, and progression metrics.

pub mod correction;
pub mod critic;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod render;
pub mod rngutil;
pub mod scene;
pub mod sim;
pub mod suite;
pub mod tokenizer;
pub mod train;
pub mod world;

pub use error::{Error, Result};
