//! Per-sample prototype aggregation for few-shot detection.
//!
//! The crate is organised bottom-up: [`tensor`] provides the differentiable
//! substrate, [`attention`] the encoder/decoder stacks used for support
//! refinement and query-support aggregation, [`aggregation`] the two
//! aggregation procedures plus averaged-prototype baselines, [`world`] a
//! synthetic scene generator, [`detector`] a toy two-stage detector,
//! [`trainer`] episodic training and cached inference, and [`eval`] the
//! metrics.

pub mod aggregation;
pub mod attention;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod world;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::{Mode, ParamStore, Tape, Tensor, Var};
