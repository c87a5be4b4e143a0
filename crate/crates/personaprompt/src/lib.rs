//! Persona soft-prompt tuning on small frozen decoder LMs: the file formats,
//! configuration, workflow and command line around `personaprompt-core`.
//!
//! * [`checkpoint`]: the `PFCKPT01` container for models and prompts.
//! * [`io`] and [`bundles`]: JSON Lines, vocab files and bundle directories.
//! * [`config`]: the TOML run configuration.
//! * [`run`]: prepare, pretrain, tune and eval over an output directory.
//! * [`chat`] and [`cli`]: the interactive loop and the subcommands.
//! * [`synthetic`]: a generated world in the canonical corpus schema.

pub mod bundles;
pub mod chat;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod run;
pub mod synthetic;

pub use error::{Error, Result};
