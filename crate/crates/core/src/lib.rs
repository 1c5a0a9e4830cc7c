//! Spatially-aware episodic memory for transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, Adam, gradient checks, checkpoints.
//! - [`embed`]: sinusoidal/learnable time and place embeddings and the observation encoder.
//! - [`memory`]: the capacity-bounded episodic store with FIFO/LIFO/MVFO/LVFO eviction.
//! - [`model`]: memory layers with flat and hierarchical (chunked) reads.
//! - [`ama`]: the Q-learning selector that picks an eviction strategy per task.
//! - [`envs`]: procedurally generated Room Ballet episodes.
//! - [`harness`]: configs, training loops, evaluation, metrics.

pub mod ama;
pub mod embed;
pub mod envs;
pub mod harness;
pub mod memory;
pub mod model;
pub mod tensor;
