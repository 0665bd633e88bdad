//! Distilled momentum-contrastive self-supervised learning at desk scale.
//!
//! A student encoder is trained with InfoNCE against a queue of momentum keys
//! while a teacher with a frozen generic-domain backbone supervises it through
//! a KL term between key-similarity distributions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck_suite;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
