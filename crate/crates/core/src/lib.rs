//! Concept-space ambiguity analysis on top of sparse autoencoders.
//!
//! The crate turns an SAE into a path-kernel machine, measures distances
//! between a question and its interpretations in concept space, calibrates
//! an ambiguity threshold, estimates semantic entropy, and ranks tool/API
//! documents by predicted missing concepts.

pub mod activation;
pub mod ambiguity;
pub mod bench;
pub mod cli;
pub mod entropy;
pub mod error;
pub mod linalg;
pub mod path_kernel;
pub mod retrieval;
pub mod sae;
pub mod synth;

pub use error::{Error, Result};
