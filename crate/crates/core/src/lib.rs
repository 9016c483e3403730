//! Joint architecture search, channel/layer pruning and dynamic knowledge
//! distillation for a small grid detector on synthetic scenes.

mod error;

pub mod cli;
pub mod distill;
pub mod etp;
pub mod microdet;
pub mod morph;
pub mod netgraph;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
