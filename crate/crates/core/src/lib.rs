//! Multi-character role-playing adapters over a frozen toy language model.
//!
//! The crate is `no_std` (with `alloc`). File formats, the command line and
//! checkpoints live in the `rolelora` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agent;
pub mod backbone;
pub mod config;
pub mod corpus;
pub mod dynlora;
pub mod error;
pub mod evalkit;
pub mod gating;
pub mod gradcheck;
pub mod incremental;
pub mod numerics;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
