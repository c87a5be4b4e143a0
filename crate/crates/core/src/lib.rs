//! Core of the persona soft-prompt toolkit.
//!
//! Everything here is pure computation over in-memory values and builds
//! without `std` (an allocator is required). File formats, configuration
//! files and the command line live in the `personaprompt` crate.
//!
//! The pieces, bottom-up:
//!
//! * [`tensor`], [`tape`] and [`optim`]: dense row-major tensors, a
//!   reverse-mode tape covering the ops a small causal decoder needs, and Adam.
//!   [`gradcheck`] holds the finite-difference checks of the tape.
//! * [`tokenizer`]: a whitespace word-level vocabulary.
//! * [`model`]: a pre-norm GPT-style decoder that consumes embedding rows, so
//!   a soft prompt can be placed in front of the token embeddings.
//! * [`prompt`]: the trainable block of persona info tokens.
//! * [`corpus`]: dialogue-pair extraction, persona ranking, splitting,
//!   general-corpus filtering and mixing.
//! * [`trainer`]: pretraining, prompt-tuning and the two fine-tuning baselines.
//! * [`eval`]: greedy decoding, distinct-N and report aggregation.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod prompt;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
