//! Selective layer-wise KV sharing between two transformers.
//!
//! A sender model prefills a context, a subset of its layers' key/value
//! caches is chosen and shipped, and a receiver model splices those entries
//! in front of its own while processing a query.

pub mod api;
pub mod baselines;
pub mod comm;
pub mod cost;
pub mod error;
pub mod experiments;
pub mod kv;
pub mod model;
pub mod selection;
pub mod tensor;
pub mod tokens;

pub use error::{Error, ErrorKind, Result, Stage, WireError};
