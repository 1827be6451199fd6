//! Speculative decoding with a multi-stage MLP speculator.
//!
//! A frozen causal transformer ([`model::BaseModel`]) exposes its final
//! residual state per position. A speculator ([`speculator::Speculator`])
//! conditions on that state and on the tokens it has already drafted to emit a
//! tree of candidate continuations. The tree is pruned to the `k` most likely
//! paths, flattened, and verified in a single masked forward pass
//! ([`decode`]); the longest greedy-consistent prefix is kept. With exact-match
//! acceptance the output is token-for-token identical to plain greedy
//! decoding.
//!
//! The [`train`] module trains the base model on next-token prediction and the
//! speculator in two stages: first against ground-truth text, then against
//! the base model's own greedy continuations.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod model;
pub mod params;
pub mod speculator;
pub mod tensor;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
