//! Ownership-guided distributed shared memory.

pub mod addressing;
pub mod bench;
pub mod cache;
pub mod config;
pub mod error;
pub mod heap;
pub mod protocol;
pub mod runtime;
pub mod transport;
pub mod verifier;

pub use error::{Error, Result};
