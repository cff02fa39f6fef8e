//! Fine-grained access control middleware: policies are compiled into guarded
//! expressions that are injected into queries before they reach the database.

pub mod bench;
pub mod cache;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod guards;
pub mod policy;
pub mod rewrite;
pub mod selection;
pub mod sql;
pub mod store;
pub mod value;
pub mod workload;

pub use error::{Error, Result};
