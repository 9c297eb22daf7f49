//! Multi-resolution point-cloud feature learning with learnable pooling.
//!
//! This crate implements the PointStack architecture from scratch on the CPU:
//! a hierarchy of residual point-feature blocks produces features at several
//! resolutions, each resolution is summarized to a fixed length by an
//! attention-based *learnable pooling* (keys and values come from the point
//! features, the queries are trained parameters), and a final learnable
//! pooling over the stacked summaries yields one global feature vector.
//!
//! Everything is built on a small reverse-mode differentiation tape over
//! dense 2-D matrices ([`tensor`]), so the whole network is trainable and
//! every gradient can be verified against finite differences
//! ([`training::grad_check`]). The pooling module ships an executable form
//! of the permutation-invariance argument ([`pooling::verify_invariance_proof`]).
//!
//! Start with the runnable programs in `examples/`; each one demonstrates a
//! single capability (pooling, invariance, training, ablations, gradient
//! checking). The `pointstack` binary in the companion CLI crate exposes the
//! same workflows as subcommands.

pub mod backbone;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod pooling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
