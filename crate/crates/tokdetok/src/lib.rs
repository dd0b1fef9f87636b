//! File formats, fixtures and the command-line pipeline around
//! [`tokdetok_core`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod pipeline;
pub mod tasks;
pub mod trajectory;
pub mod vocab_file;

pub use error::{Error, Result};
pub use tokdetok_core as core;
