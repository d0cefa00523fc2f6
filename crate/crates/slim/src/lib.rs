//! Store, stages, annotation service and command line around `slim-core`.

#![forbid(unsafe_code)]

pub mod bench;
pub mod cli;
mod error;
pub mod pipeline;
pub mod runlog;
pub mod service;
pub mod session;
pub mod stages;
pub mod store;

pub use error::{Error, Result};
pub use slim_core;
